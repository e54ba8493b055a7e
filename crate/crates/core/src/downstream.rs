//! Writer identification on top of a pretrained encoder: a linear head over
//! pooled backbone features trained with cross-entropy, word-level accuracy,
//! page-level majority voting and few-label fine-tuning.

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::data::{validate_dataset, DatasetKind, DatasetManifest, SampleRecord, Split};
use crate::encoder::Encoder;
use crate::error::{Error, Result};
use crate::loader::CanvasStore;
use crate::nn::{Adam, AdamConfig, Layer, Linear, Mode, Tensor};
use crate::preprocess::{augment_view, load_canvas, patchify, AugmentConfig, CanvasImage};
use crate::seed::{self, streams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum FinetuneMode {
    /// Backbone frozen (parameters and normalization statistics).
    LinearOnly,
    #[default]
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub mode: FinetuneMode,
    /// Expected number of writers; checked against the training split when set.
    pub num_classes: Option<usize>,
    /// Light augmentation of training images.
    pub augment: bool,
    pub augment_magnitudes: AugmentConfig,
    pub adam: AdamConfig,
    pub cache_mib: usize,
    /// Share of each writer's training words used by few-label fine-tuning.
    pub finetune_fraction: f64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        ProbeConfig {
            epochs: 500,
            lr: 1e-4,
            batch_size: 64,
            mode: FinetuneMode::Full,
            num_classes: None,
            augment: true,
            augment_magnitudes: AugmentConfig::default().scaled(0.25),
            adam: AdamConfig::default(),
            cache_mib: 2048,
            finetune_fraction: 0.1,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: String| {
            Err(Error::Config {
                key: format!("downstream.{key}"),
                message,
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be at least 1".into());
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("lr", format!("{} must be positive", self.lr));
        }
        if self.batch_size == 0 {
            return bad("batch_size", "must be at least 1".into());
        }
        if !(self.finetune_fraction > 0.0 && self.finetune_fraction <= 1.0) {
            return bad(
                "finetune_fraction",
                format!("{} must be in (0, 1]", self.finetune_fraction),
            );
        }
        Ok(())
    }
}

/// Pretrained backbone (projector removed) followed by a linear writer head.
#[derive(Debug, Clone)]
pub struct WriterClassifier {
    pub encoder: Encoder,
    pub head: Linear,
    /// Writer ids in class-index order.
    pub classes: Vec<String>,
}

impl WriterClassifier {
    pub fn new(mut encoder: Encoder, classes: Vec<String>, seed: u64) -> Self {
        encoder.projector = None;
        let mut rng = seed::stream(seed, streams::INIT, 1);
        let head = Linear::new(encoder.embedding_dim(), classes.len(), true, &mut rng);
        WriterClassifier { encoder, head, classes }
    }

    pub fn checkpoint(&mut self, epoch: Option<usize>) -> Checkpoint {
        let meta = CheckpointMeta {
            kind: CheckpointKind::Classifier,
            encoder: self.encoder.config.clone(),
            classes: self.classes.clone(),
            epoch,
        };
        Checkpoint::capture(
            meta,
            &mut [("backbone.", &mut self.encoder.backbone), ("head.", &mut self.head)],
        )
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.meta.kind != CheckpointKind::Classifier {
            return Err(Error::Checkpoint("expected a classifier checkpoint".into()));
        }
        let encoder = Encoder::from_checkpoint(ck, false)?;
        let mut clf = WriterClassifier::new(encoder, ck.meta.classes.clone(), 0);
        ck.restore("head.", &mut clf.head)?;
        Ok(clf)
    }

    fn backbone_mode(&self, mode: FinetuneMode, train: bool) -> Mode {
        if train && mode == FinetuneMode::Full {
            Mode::train()
        } else {
            Mode::eval()
        }
    }

    /// Class probabilities `[N, C]` in evaluation mode.
    pub fn predict_proba(&mut self, canvases: &[CanvasImage]) -> Result<Vec<Vec<f64>>> {
        let feats = self.encoder.features(&patchify(canvases)?, Mode::eval())?;
        let logits = self.head.forward(&feats, Mode::eval())?;
        Ok(logits.data.chunks_exact(self.classes.len()).map(softmax).collect())
    }

    /// `(writer id, confidence)` of the top class for each canvas.
    pub fn predict(&mut self, canvases: &[CanvasImage]) -> Result<Vec<(String, f64)>> {
        Ok(self
            .predict_proba(canvases)?
            .into_iter()
            .map(|p| {
                let (k, c) = argmax(&p);
                (self.classes[k].clone(), c)
            })
            .collect())
    }
}

fn softmax(logits: &[f32]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let e: Vec<f64> = logits.iter().map(|&l| f64::from(l - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// First index of the maximum.
fn argmax(p: &[f64]) -> (usize, f64) {
    p.iter().copied().enumerate().fold(
        (0, f64::NEG_INFINITY),
        |best, (i, v)| if v > best.1 { (i, v) } else { best },
    )
}

/// Mean categorical cross-entropy of `logits` `[B, C]` and its gradient.
pub fn cross_entropy(logits: &Tensor, targets: &[usize]) -> (f64, Tensor) {
    let c = logits.last_dim();
    let b = targets.len();
    let mut grad = Tensor::zeros(&logits.shape);
    let mut loss = 0.0;
    for (i, (row, &t)) in logits.data.chunks_exact(c).zip(targets).enumerate() {
        let p = softmax(row);
        loss -= p[t].max(1e-300).ln();
        for k in 0..c {
            let onehot = if k == t { 1.0 } else { 0.0 };
            grad.data[i * c + k] = ((p[k] - onehot) / b as f64) as f32;
        }
    }
    (loss / b as f64, grad)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeEpoch {
    pub epoch: usize,
    pub loss: f64,
    pub train_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct ProbeReport {
    pub classifier: WriterClassifier,
    pub history: Vec<ProbeEpoch>,
    pub train_images: usize,
    pub skipped_images: usize,
}

fn training_records(manifest: &DatasetManifest) -> Vec<&SampleRecord> {
    if manifest.has_splits() {
        manifest.split(Split::Train).collect()
    } else {
        manifest.records.iter().collect()
    }
}

/// Writer ids of the training records; every writer of the manifest must be
/// among them.
fn class_list(manifest: &DatasetManifest, records: &[&SampleRecord], cfg: &ProbeConfig) -> Result<Vec<String>> {
    let present: BTreeSet<&str> = records.iter().map(|r| r.writer_id.as_str()).collect();
    let missing: Vec<String> = manifest
        .writers()
        .into_iter()
        .filter(|w| !present.contains(w.as_str()))
        .collect();
    if !missing.is_empty() {
        return Err(Error::MissingClasses(missing));
    }
    let classes: Vec<String> = present.into_iter().map(String::from).collect();
    if let Some(n) = cfg.num_classes {
        if n != classes.len() {
            return Err(Error::Config {
                key: "downstream.num_classes".into(),
                message: format!(
                    "configured {n} classes but the training split has {} writers",
                    classes.len()
                ),
            });
        }
    }
    Ok(classes)
}

/// Train a writer classifier from a pretrained checkpoint on the training
/// split of `manifest` (all records when unsplit).
pub fn train_linear_probe(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    let records = training_records(manifest);
    train_on_records(pretrained, manifest, &records, cfg, seed)
}

fn train_on_records(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    records: &[&SampleRecord],
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<ProbeReport> {
    cfg.validate()?;
    if records.is_empty() {
        return Err(Error::InvalidArgument("the training split is empty".into()));
    }
    let classes = class_list(manifest, records, cfg)?;
    let index: BTreeMap<&str, usize> = classes.iter().enumerate().map(|(i, w)| (w.as_str(), i)).collect();

    let report = validate_dataset(manifest);
    let bad: HashSet<&str> = report
        .missing
        .iter()
        .chain(&report.unreadable)
        .map(String::as_str)
        .collect();
    let kept: Vec<&SampleRecord> = records
        .iter()
        .copied()
        .filter(|r| !bad.contains(r.image_path.as_str()))
        .collect();
    let skipped_images = records.len() - kept.len();
    if kept.is_empty() {
        return Err(Error::InvalidArgument("no readable training images".into()));
    }
    let targets: Vec<usize> = kept.iter().map(|r| index[r.writer_id.as_str()]).collect();
    let mut store = CanvasStore::from_records(manifest, kept.iter().copied(), cfg.cache_mib << 20);

    let encoder = Encoder::from_checkpoint(pretrained, false)?;
    let mut clf = WriterClassifier::new(encoder, classes, seed);
    let mut adam = Adam::new(cfg.adam);
    let mode = cfg.mode;
    let lr = cfg.lr as f32;

    // A frozen backbone without augmentation sees the same inputs every
    // epoch, so its features are computed once per image.
    let reuse = mode == FinetuneMode::LinearOnly && !cfg.augment;
    let mut cached: Option<(usize, Vec<f32>)> = None;
    let mut order: Vec<usize> = (0..kept.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(seed, streams::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        if reuse && cached.is_none() {
            let mut all = Vec::new();
            let mut width = 0;
            let ids: Vec<usize> = (0..kept.len()).collect();
            for chunk in ids.chunks(cfg.batch_size) {
                let canvases = chunk
                    .iter()
                    .map(|&i| Ok(store.get(i)?.normalize()))
                    .collect::<Result<Vec<_>>>()?;
                let f = clf.encoder.features(&patchify(&canvases)?, Mode::eval())?;
                width = f.last_dim();
                all.extend_from_slice(&f.data);
            }
            cached = Some((width, all));
        }
        let (mut loss_sum, mut correct) = (0.0, 0usize);
        for chunk in order.chunks(cfg.batch_size) {
            let feats = match &cached {
                Some((width, all)) => {
                    let data = chunk
                        .iter()
                        .flat_map(|&i| all[i * width..(i + 1) * width].iter().copied())
                        .collect();
                    Tensor::new(vec![chunk.len(), *width], data)?
                }
                None => {
                    let mut canvases = Vec::with_capacity(chunk.len());
                    for &i in chunk {
                        let canvas = store.get(i)?;
                        canvases.push(if cfg.augment {
                            let s = seed::derive(seed, streams::AUGMENT, ((epoch as u64) << 32) | i as u64);
                            augment_view(&canvas, &cfg.augment_magnitudes, s)
                        } else {
                            canvas.normalize()
                        });
                    }
                    clf.encoder
                        .features(&patchify(&canvases)?, clf.backbone_mode(mode, true))?
                }
            };
            let logits = clf.head.forward(&feats, Mode::train())?;
            let batch_targets: Vec<usize> = chunk.iter().map(|&i| targets[i]).collect();
            let (loss, grad) = cross_entropy(&logits, &batch_targets);
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("probe loss at epoch {epoch}")));
            }
            correct += logits
                .data
                .chunks_exact(clf.classes.len())
                .zip(&batch_targets)
                .filter(|(row, &t)| {
                    let p: Vec<f64> = row.iter().map(|&v| f64::from(v)).collect();
                    argmax(&p).0 == t
                })
                .count();
            loss_sum += loss * chunk.len() as f64;

            let g = clf.head.backward(&grad);
            match mode {
                FinetuneMode::Full => {
                    clf.encoder.backward_features(&g);
                    adam.step(lr, &mut [&mut clf.encoder.backbone, &mut clf.head]);
                }
                FinetuneMode::LinearOnly => adam.step(lr, &mut [&mut clf.head]),
            }
        }
        let n = kept.len() as f64;
        let rec = ProbeEpoch {
            epoch,
            loss: loss_sum / n,
            train_accuracy: 100.0 * correct as f64 / n,
        };
        log::info!(
            "probe epoch {epoch}: loss {:.4} train accuracy {:.2}",
            rec.loss,
            rec.train_accuracy
        );
        history.push(rec);
    }
    Ok(ProbeReport {
        classifier: clf,
        history,
        train_images: kept.len(),
        skipped_images,
    })
}

/// Percentage rounded to two decimals.
pub fn percent(correct: usize, total: usize) -> f64 {
    if total == 0 {
        return 0.0;
    }
    (10_000.0 * correct as f64 / total as f64).round() / 100.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EvalLevel {
    Word,
    Page,
}

/// Structured result line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub dataset: String,
    pub level: EvalLevel,
    pub accuracy: f64,
    pub n: usize,
    pub excluded_pages: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordPrediction {
    pub image_path: String,
    pub page_id: String,
    pub true_writer: String,
    pub predicted: String,
    pub confidence: f64,
}

/// Test records of the manifest (all records when unsplit).
fn test_records(manifest: &DatasetManifest) -> Vec<&SampleRecord> {
    if manifest.has_splits() {
        manifest.split(Split::Test).collect()
    } else {
        manifest.records.iter().collect()
    }
}

/// Predict every readable test word. Unreadable images are returned
/// separately by path.
pub fn predict_words(
    clf: &mut WriterClassifier,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<(Vec<WordPrediction>, Vec<String>)> {
    let records = test_records(manifest);
    let mut preds = Vec::with_capacity(records.len());
    let mut unreadable = Vec::new();
    for chunk in records.chunks(batch_size.max(1)) {
        let mut canvases = Vec::with_capacity(chunk.len());
        let mut used = Vec::with_capacity(chunk.len());
        for r in chunk {
            match load_canvas(&manifest.resolve(r)) {
                Ok(c) => {
                    canvases.push(c.normalize());
                    used.push(*r);
                }
                Err(e) => {
                    log::warn!("skipping {}: {e}", r.image_path);
                    unreadable.push(r.image_path.clone());
                }
            }
        }
        if canvases.is_empty() {
            continue;
        }
        for (r, (w, c)) in used.iter().zip(clf.predict(&canvases)?) {
            preds.push(WordPrediction {
                image_path: r.image_path.clone(),
                page_id: r.page_id.clone(),
                true_writer: r.writer_id.clone(),
                predicted: w,
                confidence: c,
            });
        }
    }
    Ok((preds, unreadable))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WordEval {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    pub unreadable: usize,
}

pub fn word_accuracy(preds: &[WordPrediction]) -> (f64, usize) {
    let correct = preds.iter().filter(|p| p.predicted == p.true_writer).count();
    (percent(correct, preds.len()), correct)
}

pub fn evaluate_word_level(
    clf: &mut WriterClassifier,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<WordEval> {
    let records = test_records(manifest);
    if records.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()));
    }
    let (preds, unreadable) = predict_words(clf, manifest, batch_size)?;
    let (accuracy, correct) = word_accuracy(&preds);
    Ok(WordEval {
        accuracy,
        correct,
        n: preds.len(),
        unreadable: unreadable.len(),
    })
}

/// Writer with the most votes. Ties go to the larger summed confidence, then
/// to the lexicographically smallest writer id. `None` for an empty page.
pub fn majority_vote(votes: &[(String, f64)]) -> Option<String> {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (w, c) in votes {
        let e = tally.entry(w.as_str()).or_insert((0, 0.0));
        e.0 += 1;
        e.1 += c;
    }
    // BTreeMap iterates in ascending id order, so keeping the first of equals
    // implements the final tie-break.
    let mut best: Option<(&str, usize, f64)> = None;
    for (w, (n, c)) in tally {
        match best {
            Some((_, bn, bc)) if n < bn || (n == bn && c <= bc) => {}
            _ => best = Some((w, n, c)),
        }
    }
    best.map(|(w, _, _)| w.to_string())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PagePrediction {
    pub page_id: String,
    pub true_writer: String,
    pub word_predictions: Vec<(String, f64)>,
    pub voted_writer: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PageEval {
    pub accuracy: f64,
    pub correct: usize,
    pub n: usize,
    /// Pages none of whose words could be read.
    pub excluded_pages: usize,
    pub pages: Vec<PagePrediction>,
}

/// Group word predictions by page and vote. `all_pages` lists every
/// `(page_id, writer)` expected; pages without predictions are excluded.
pub fn vote_pages(preds: &[WordPrediction], all_pages: &BTreeSet<(String, String)>) -> PageEval {
    let mut by_page: BTreeMap<(&str, &str), Vec<(String, f64)>> = BTreeMap::new();
    for p in preds {
        by_page
            .entry((p.page_id.as_str(), p.true_writer.as_str()))
            .or_default()
            .push((p.predicted.clone(), p.confidence));
    }
    let mut pages = Vec::with_capacity(by_page.len());
    for ((page, writer), votes) in by_page {
        let voted_writer = majority_vote(&votes).expect("non-empty page");
        pages.push(PagePrediction {
            page_id: page.to_string(),
            true_writer: writer.to_string(),
            word_predictions: votes,
            voted_writer,
        });
    }
    let correct = pages.iter().filter(|p| p.voted_writer == p.true_writer).count();
    let excluded_pages = all_pages.len().saturating_sub(pages.len());
    PageEval {
        accuracy: percent(correct, pages.len()),
        correct,
        n: pages.len(),
        excluded_pages,
        pages,
    }
}

pub fn evaluate_page_level(
    clf: &mut WriterClassifier,
    manifest: &DatasetManifest,
    batch_size: usize,
) -> Result<PageEval> {
    let records = test_records(manifest);
    if records.is_empty() {
        return Err(Error::InvalidArgument("the test split is empty".into()));
    }
    let all_pages = records
        .iter()
        .map(|r| (r.page_id.clone(), r.writer_id.clone()))
        .collect();
    let (preds, _) = predict_words(clf, manifest, batch_size)?;
    Ok(vote_pages(&preds, &all_pages))
}

/// Per writer, `ceil(fraction * count)` (at least one) randomly chosen
/// records, returned in manifest order.
pub fn stratified_subsample<'a>(
    records: &[&'a SampleRecord],
    fraction: f64,
    seed: u64,
) -> Result<Vec<&'a SampleRecord>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!("fraction {fraction} must be in (0, 1]")));
    }
    let mut by_writer: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, r) in records.iter().enumerate() {
        by_writer.entry(r.writer_id.as_str()).or_default().push(i);
    }
    let mut chosen = Vec::new();
    for (k, idx) in by_writer.values_mut().enumerate() {
        let take = ((fraction * idx.len() as f64).ceil() as usize).clamp(1, idx.len());
        let mut rng = seed::stream(seed, streams::SUBSAMPLE, k as u64);
        idx.shuffle(&mut rng);
        chosen.extend_from_slice(&idx[..take]);
    }
    chosen.sort_unstable();
    Ok(chosen.into_iter().map(|i| records[i]).collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransferMode {
    /// Fine-tune on the dataset used for pretraining.
    IntraScript,
    /// Fine-tune on a different dataset.
    CrossScript,
}

#[derive(Debug, Clone)]
pub struct FinetuneReport {
    pub probe: ProbeReport,
    pub subset_size: usize,
    pub page_eval: PageEval,
    pub transfer: TransferMode,
    pub dataset: DatasetKind,
}

/// Fine-tune the whole network on a writer-stratified fraction of the
/// training split and report page-level accuracy on the test split.
pub fn finetune_semi_supervised(
    pretrained: &Checkpoint,
    manifest: &DatasetManifest,
    fraction: f64,
    transfer: TransferMode,
    cfg: &ProbeConfig,
    seed: u64,
) -> Result<FinetuneReport> {
    let records = training_records(manifest);
    let subset = stratified_subsample(&records, fraction, seed)?;
    let full = ProbeConfig {
        mode: FinetuneMode::Full,
        ..cfg.clone()
    };
    let mut probe = train_on_records(pretrained, manifest, &subset, &full, seed)?;
    let page_eval = evaluate_page_level(&mut probe.classifier, manifest, cfg.batch_size)?;
    Ok(FinetuneReport {
        probe,
        subset_size: subset.len(),
        page_eval,
        transfer,
        dataset: manifest.dataset,
    })
}

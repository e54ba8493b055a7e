//! Self-supervised pretraining: positive pairs from augmentation, a shared
//! encoder, the standardized decorrelation loss and Adam under a warmup +
//! cosine schedule.

use std::f64::consts::PI;
use std::fs::{self, File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use nalgebra::SymmetricEigen;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::checkpoint::CheckpointKind;
use crate::data::{validate_dataset, DatasetManifest, Split};
use crate::encoder::{Encoder, EncoderConfig};
use crate::error::{Error, Result};
use crate::loader::CanvasStore;
use crate::loss::{loss_and_grad, matrix_from_rows, matrix_to_rows, write_correlation_dump, LossConfig, Matrix};
use crate::nn::{Adam, AdamConfig, Mode, Tensor};
use crate::preprocess::{augment_pair, patchify, AugmentConfig};
use crate::seed::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub base_lr: f64,
    pub warmup_epochs: usize,
    /// Images per batch; each contributes 8 patches per view.
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Checkpoint every this many epochs (0: only the final one).
    pub checkpoint_every: usize,
    /// Write the last batch's cross-correlation matrix every this many
    /// epochs (0: only after the final epoch).
    pub dump_every: usize,
    /// Separate batch-norm statistics for the two views.
    pub per_view_bn: bool,
    /// Track the covariance spectrum of the embeddings each epoch.
    pub monitor_spectrum: bool,
    /// Use at most this many training images (0: all).
    pub max_images: usize,
    /// Memory for cached canvases, in MiB.
    pub cache_mib: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 500,
            base_lr: 1e-3,
            warmup_epochs: 10,
            batch_size: 64,
            adam: AdamConfig::default(),
            checkpoint_every: 50,
            dump_every: 0,
            per_view_bn: true,
            monitor_spectrum: true,
            max_images: 0,
            cache_mib: 2048,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |key: &str, message: &str| {
            Err(Error::Config {
                key: format!("pretrain.{key}"),
                message: message.into(),
            })
        };
        if self.epochs == 0 {
            return bad("epochs", "must be positive");
        }
        if self.warmup_epochs >= self.epochs {
            return bad("warmup_epochs", "must be smaller than epochs");
        }
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            return bad("base_lr", "must be positive");
        }
        if self.batch_size < 2 {
            return bad(
                "batch_size",
                "batch normalization of the embeddings needs at least 2 images",
            );
        }
        Ok(())
    }
}

/// Learning rate at (possibly fractional) `progress` epochs: linear ramp from
/// 0 over the warmup, then cosine annealing to 0.
fn lr_at(progress: f64, cfg: &PretrainConfig) -> f64 {
    let warm = cfg.warmup_epochs as f64;
    if progress < warm {
        return cfg.base_lr * progress / warm;
    }
    let span = (cfg.epochs - cfg.warmup_epochs) as f64;
    cfg.base_lr * 0.5 * (1.0 + (PI * (progress - warm) / span).cos())
}

/// Learning rate at the start of `epoch`.
pub fn lr_schedule(epoch: usize, cfg: &PretrainConfig) -> Result<f64> {
    if epoch >= cfg.epochs {
        return Err(Error::InvalidArgument(format!(
            "epoch {epoch} outside 0..{}",
            cfg.epochs
        )));
    }
    Ok(lr_at(epoch as f64, cfg))
}

/// One line of `metrics/pretrain.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub loss: f64,
    pub diag_mean: f64,
    pub offdiag_mean_abs: f64,
    /// Learning rate at the start of the epoch.
    pub lr: f64,
    pub batches: usize,
    pub skipped_batches: usize,
    /// `exp` of the entropy of the normalized covariance eigenvalues of the
    /// (first-view) embeddings seen during the epoch.
    pub effective_rank: Option<f64>,
    /// Same for the correlation matrix (scale-free).
    pub effective_rank_corr: Option<f64>,
}

pub fn read_metrics(path: &Path) -> Result<Vec<EpochMetrics>> {
    let f = File::open(path)?;
    let mut out = Vec::new();
    for line in BufReader::new(f).lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line)?);
        }
    }
    Ok(out)
}

/// Running mean and second moment of D-dimensional rows, in `f64`.
#[derive(Debug, Clone)]
pub struct CovarianceAccumulator {
    n: usize,
    sum: Vec<f64>,
    outer: Matrix,
}

impl CovarianceAccumulator {
    pub fn new(dim: usize) -> Self {
        CovarianceAccumulator {
            n: 0,
            sum: vec![0.0; dim],
            outer: Matrix::zeros(dim, dim),
        }
    }

    pub fn add_rows(&mut self, rows: &Matrix) {
        self.n += rows.nrows();
        for (s, col) in self.sum.iter_mut().zip(rows.column_iter()) {
            *s += col.sum();
        }
        self.outer += rows.tr_mul(rows);
    }

    /// Population covariance, or `None` with fewer than two rows.
    pub fn covariance(&self) -> Option<Matrix> {
        if self.n < 2 {
            return None;
        }
        let n = self.n as f64;
        let d = self.sum.len();
        Some(Matrix::from_fn(d, d, |i, j| {
            self.outer[(i, j)] / n - self.sum[i] * self.sum[j] / (n * n)
        }))
    }
}

/// `exp(H(p))` with `p` the eigenvalues of the symmetric PSD matrix `m`
/// (negatives from round-off clipped to 0) normalized to sum 1.
pub fn effective_rank(m: &Matrix) -> Option<f64> {
    let eig = SymmetricEigen::new(m.clone()).eigenvalues;
    let vals: Vec<f64> = eig.iter().map(|v| v.max(0.0)).collect();
    let total: f64 = vals.iter().sum();
    if !(total > 0.0 && total.is_finite()) {
        return None;
    }
    let h: f64 = vals
        .iter()
        .filter(|&&v| v > 0.0)
        .map(|&v| -(v / total) * (v / total).ln())
        .sum();
    Some(h.exp())
}

/// Covariance rescaled to unit diagonal; zero-variance dimensions dropped.
pub fn correlation_from_covariance(cov: &Matrix) -> Matrix {
    let keep: Vec<usize> = (0..cov.nrows()).filter(|&i| cov[(i, i)] > 0.0).collect();
    Matrix::from_fn(keep.len(), keep.len(), |a, b| {
        let (i, j) = (keep[a], keep[b]);
        cov[(i, j)] / (cov[(i, i)] * cov[(j, j)]).sqrt()
    })
}

#[derive(Debug, Clone)]
pub struct PretrainOptions<'a> {
    pub encoder: &'a EncoderConfig,
    pub loss: &'a LossConfig,
    pub augment: &'a AugmentConfig,
    pub pretrain: &'a PretrainConfig,
    pub seed: u64,
    /// Run directory; `checkpoints/` and `metrics/` are created inside.
    pub out_dir: &'a Path,
}

#[derive(Debug, Clone)]
pub struct PretrainReport {
    pub metrics: Vec<EpochMetrics>,
    pub checkpoints: Vec<PathBuf>,
    pub final_checkpoint: PathBuf,
    pub images: usize,
    pub skipped_images: usize,
}

pub fn checkpoint_path(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir
        .join("checkpoints")
        .join(format!("epoch_{epoch:04}.safetensors"))
}

pub fn final_checkpoint_path(out_dir: &Path) -> PathBuf {
    out_dir.join("checkpoints").join("final.safetensors")
}

/// Pretrain on the training split of `manifest` (all records when the
/// manifest carries no split).
pub fn pretrain(manifest: &DatasetManifest, opts: &PretrainOptions) -> Result<PretrainReport> {
    let cfg = opts.pretrain;
    cfg.validate()?;
    opts.encoder.validate()?;

    let report = validate_dataset(manifest);
    if report.exceeds_missing_threshold() {
        return Err(Error::InvalidArgument(format!(
            "{} of {} images are missing ({:.2}% > 1%); refusing to pretrain",
            report.missing.len(),
            report.total,
            100.0 * report.missing_fraction()
        )));
    }
    let bad: std::collections::HashSet<&str> = report
        .missing
        .iter()
        .chain(&report.unreadable)
        .map(String::as_str)
        .collect();
    let mut records: Vec<_> = if manifest.has_splits() {
        manifest.split(Split::Train).collect()
    } else {
        manifest.records.iter().collect()
    };
    let before = records.len();
    records.retain(|r| !bad.contains(r.image_path.as_str()));
    let skipped_images = before - records.len();
    if cfg.max_images > 0 && records.len() > cfg.max_images {
        records.truncate(cfg.max_images);
    }
    if records.len() < 2 {
        return Err(Error::InvalidArgument(
            "pretraining needs at least 2 readable training images".into(),
        ));
    }
    let mut store = CanvasStore::from_records(manifest, records.iter().copied(), cfg.cache_mib << 20);

    let metrics_dir = opts.out_dir.join("metrics");
    fs::create_dir_all(&metrics_dir)?;
    fs::create_dir_all(opts.out_dir.join("checkpoints"))?;
    let mut log = OpenOptions::new()
        .create(true)
        .append(true)
        .open(metrics_dir.join("pretrain.jsonl"))?;
    let mut spectrum_log = if cfg.monitor_spectrum {
        Some(
            OpenOptions::new()
                .create(true)
                .append(true)
                .open(metrics_dir.join("spectrum.jsonl"))?,
        )
    } else {
        None
    };

    let mut encoder = Encoder::new(opts.encoder, opts.seed)?;
    let mut adam = Adam::new(cfg.adam);
    let dim = encoder.embedding_dim();
    let n_images = store.len();
    let batches_per_epoch = n_images.div_ceil(cfg.batch_size);
    let groups = if cfg.per_view_bn { 2 } else { 1 };

    let mut all_metrics = Vec::new();
    let mut checkpoints = Vec::new();
    let mut order: Vec<usize> = (0..n_images).collect();

    for epoch in 0..cfg.epochs {
        let mut rng = seed::stream(opts.seed, streams::SHUFFLE, epoch as u64);
        order.shuffle(&mut rng);
        let (mut loss_sum, mut diag_sum, mut off_sum) = (0.0, 0.0, 0.0);
        let (mut done, mut skipped) = (0usize, 0usize);
        let mut cov = cfg.monitor_spectrum.then(|| CovarianceAccumulator::new(dim));
        let mut last_c = None;

        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            if chunk.len() < 2 {
                // A single leftover image cannot be normalized over the batch.
                continue;
            }
            let lr = lr_at(epoch as f64 + b as f64 / batches_per_epoch as f64, cfg);
            let mut v1 = Vec::with_capacity(chunk.len());
            let mut v2 = Vec::with_capacity(chunk.len());
            for &i in chunk {
                let canvas = store.get(i)?;
                let s = seed::derive(opts.seed, streams::AUGMENT, ((epoch as u64) << 32) | i as u64);
                let (a, b) = augment_pair(&canvas, opts.augment, s);
                v1.push(a);
                v2.push(b);
            }
            let n = chunk.len();
            let patches = patchify(&v1)?.concat(&patchify(&v2)?);
            let out = encoder.forward_encode(&patches, Mode::train().with_groups(groups))?;
            let za = matrix_from_rows(n, dim, &out.pooled.data[..n * dim]);
            let zb = matrix_from_rows(n, dim, &out.pooled.data[n * dim..]);
            if let Some(cov) = &mut cov {
                cov.add_rows(&za);
            }
            let pair = match loss_and_grad(&za, &zb, opts.loss) {
                Ok(p) => p,
                Err(e @ Error::DegenerateDimension { .. }) => {
                    log::warn!("epoch {epoch} batch {b}: {e}; batch skipped");
                    skipped += 1;
                    continue;
                }
                Err(e @ Error::NonFinite(_)) => {
                    write_abort_dump(&metrics_dir, epoch, b, &e, &za, &zb, last_c.as_ref())?;
                    return Err(e);
                }
                Err(e) => return Err(e),
            };
            let mut grad = matrix_to_rows(&pair.grad_a);
            grad.extend(matrix_to_rows(&pair.grad_b));
            encoder.backward_pooled(&Tensor::new(vec![2 * n, dim], grad)?);
            adam.step(lr as f32, &mut encoder.layers());

            loss_sum += pair.loss.total;
            diag_sum += pair.mean_diagonal();
            off_sum += pair.mean_abs_off_diagonal();
            done += 1;
            last_c = Some((pair.c, pair.loss));
        }

        let denom = done.max(1) as f64;
        let (mut er, mut er_corr) = (None, None);
        if let Some(c) = cov.as_ref().and_then(CovarianceAccumulator::covariance) {
            er = effective_rank(&c);
            er_corr = effective_rank(&correlation_from_covariance(&c));
            if let Some(f) = &mut spectrum_log {
                let mut eig: Vec<f64> = SymmetricEigen::new(c).eigenvalues.iter().copied().collect();
                eig.sort_by(|a, b| b.total_cmp(a));
                writeln!(f, "{}", serde_json::json!({ "epoch": epoch, "eigenvalues": eig }))?;
            }
        }
        let m = EpochMetrics {
            epoch,
            loss: loss_sum / denom,
            diag_mean: diag_sum / denom,
            offdiag_mean_abs: off_sum / denom,
            lr: lr_at(epoch as f64, cfg),
            batches: done,
            skipped_batches: skipped,
            effective_rank: er,
            effective_rank_corr: er_corr,
        };
        writeln!(log, "{}", serde_json::to_string(&m)?)?;
        log.flush()?;
        log::info!(
            "epoch {epoch}: loss {:.4} diag {:.4} |offdiag| {:.4} lr {:.2e} rank {:?}",
            m.loss,
            m.diag_mean,
            m.offdiag_mean_abs,
            m.lr,
            m.effective_rank
        );
        all_metrics.push(m);

        let last = epoch + 1 == cfg.epochs;
        if (cfg.dump_every > 0 && (epoch + 1) % cfg.dump_every == 0) || last {
            if let Some((c, l)) = &last_c {
                write_correlation_dump(&metrics_dir.join(format!("correlation_epoch_{epoch:04}.tsv")), c, l)?;
            }
        }
        if cfg.checkpoint_every > 0 && (epoch + 1) % cfg.checkpoint_every == 0 && !last {
            let path = checkpoint_path(opts.out_dir, epoch);
            encoder.checkpoint(CheckpointKind::Pretrain, Some(epoch)).save(&path)?;
            checkpoints.push(path);
        }
    }
    let final_path = final_checkpoint_path(opts.out_dir);
    encoder
        .checkpoint(CheckpointKind::Pretrain, Some(cfg.epochs - 1))
        .save(&final_path)?;
    checkpoints.push(final_path.clone());
    Ok(PretrainReport {
        metrics: all_metrics,
        checkpoints,
        final_checkpoint: final_path,
        images: n_images,
        skipped_images,
    })
}

fn write_abort_dump(
    dir: &Path,
    epoch: usize,
    batch: usize,
    err: &Error,
    za: &Matrix,
    zb: &Matrix,
    last: Option<&(Matrix, crate::loss::LossBreakdown)>,
) -> Result<()> {
    let nonfinite = |m: &Matrix| m.iter().filter(|v| !v.is_finite()).count();
    let mut f = File::create(dir.join("abort.txt"))?;
    writeln!(f, "epoch\t{epoch}\nbatch\t{batch}\nerror\t{err}")?;
    writeln!(
        f,
        "nonfinite_view1\t{}\nnonfinite_view2\t{}",
        nonfinite(za),
        nonfinite(zb)
    )?;
    if let Some((c, l)) = last {
        write_correlation_dump(&dir.join("abort_correlation.tsv"), c, l)?;
    }
    Ok(())
}

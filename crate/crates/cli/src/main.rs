use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use writer_ssl::checkpoint::{Checkpoint, CheckpointKind};
use writer_ssl::config::ExperimentConfig;
use writer_ssl::data::{
    make_fragnet_splits_with, parse_manifest, scan_cvl, scan_iam, scan_writer_dirs, validate_dataset, DatasetKind,
    DatasetManifest, Split, SplitOptions,
};
use writer_ssl::downstream::{
    evaluate_page_level, finetune_semi_supervised, predict_words, train_linear_probe, word_accuracy, EvalLevel,
    EvalRecord, TransferMode, WriterClassifier,
};
use writer_ssl::encoder::Encoder;
use writer_ssl::preprocess::load_canvas;
use writer_ssl::pretrain::{pretrain, PretrainOptions};
use writer_ssl::stats::{
    bonferroni_adjust, kde_density, left_tailed_t_test, normality_diagnostics, patch_correlation_map, TTestResult,
};
use writer_ssl::synth::{generate_dataset, SynthConfig};
use writer_ssl::Error;

#[derive(Parser, Debug)]
#[command(
    name = "writer-ssl",
    version,
    about = "Self-supervised writer identification on word images"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone, Default)]
struct ConfigArgs {
    /// Experiment config (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config value, e.g. `--set pretrain.epochs=2`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Root seed (same as `--set seed=N`).
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, Error> {
        let mut overrides = self.overrides.clone();
        if let Some(s) = self.seed {
            overrides.push(format!("seed={s}"));
        }
        ExperimentConfig::load(self.config.as_deref(), &overrides)
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum Layout {
    Iam,
    Cvl,
    Firemaker,
    /// `<root>/<writer>/<page>/<image>`.
    Dirs,
    /// Render a synthetic handwriting dataset into `--root`.
    Synthetic,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum DatasetArg {
    Iam,
    Cvl,
    Firemaker,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Iam => DatasetKind::Iam,
            DatasetArg::Cvl => DatasetKind::Cvl,
            DatasetArg::Firemaker => DatasetKind::Firemaker,
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
enum TransferArg {
    Intra,
    Cross,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a manifest for a dataset directory.
    MakeManifest {
        #[arg(long, value_enum)]
        layout: Layout,
        #[arg(long)]
        root: PathBuf,
        /// IAM `forms.txt`.
        #[arg(long)]
        forms: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 5)]
        writers: usize,
        #[arg(long, default_value_t = 100)]
        words_per_writer: usize,
        #[arg(long, default_value_t = 5)]
        pages_per_writer: usize,
        #[arg(long, default_value_t = 1)]
        test_pages: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Assign train/test splits by the per-dataset rules.
    Split {
        #[arg(long, value_enum)]
        dataset: DatasetArg,
        #[arg(long)]
        manifest: PathBuf,
        /// Output manifest; defaults to rewriting `--manifest`.
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Check that every image exists and each writer is in both splits.
    Validate {
        #[arg(long)]
        manifest: PathBuf,
    },
    /// Self-supervised pretraining.
    Pretrain {
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train a writer classifier on a pretrained checkpoint.
    Probe {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Word-level accuracy of a classifier on the test split.
    EvalWord {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Page-level accuracy by majority vote over word predictions.
    EvalPage {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Fine-tune on a stratified fraction of the training split.
    Finetune {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
        #[arg(long, value_enum, default_value = "intra")]
        mode: TransferArg,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Patch correlation maps and t-tests for the images of a manifest.
    Analyze {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        images: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

#[derive(Serialize)]
struct RunInfo<'a> {
    command: &'a str,
    args: Vec<String>,
    seed: u64,
    version: &'static str,
    git_commit: Option<String>,
    started_unix: u64,
}

fn git_commit() -> Option<String> {
    let out = std::process::Command::new("git")
        .args(["rev-parse", "HEAD"])
        .output()
        .ok()?;
    out.status
        .success()
        .then(|| String::from_utf8_lossy(&out.stdout).trim().to_string())
}

/// Create the run directory and record the resolved config and run metadata.
fn start_run(out: &Path, command: &str, cfg: &ExperimentConfig) -> Result<(), Error> {
    fs::create_dir_all(out)?;
    fs::write(out.join("config.resolved.toml"), cfg.to_toml()?)?;
    let info = RunInfo {
        command,
        args: std::env::args().collect(),
        seed: cfg.seed,
        version: env!("CARGO_PKG_VERSION"),
        git_commit: git_commit(),
        started_unix: std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map(|d| d.as_secs())
            .unwrap_or(0),
    };
    fs::write(out.join("run.json"), serde_json::to_string_pretty(&info)?)?;
    Ok(())
}

fn manifest_arg(arg: Option<PathBuf>, cfg: &ExperimentConfig) -> Result<DatasetManifest, Error> {
    let path = arg.or_else(|| cfg.data.manifest.clone()).ok_or_else(|| Error::Config {
        key: "data.manifest".into(),
        message: "no manifest given (use --manifest or set data.manifest)".into(),
    })?;
    parse_manifest(&path)
}

fn emit<T: Serialize>(out: &Path, name: &str, value: &T) -> Result<(), Error> {
    let line = serde_json::to_string(value)?;
    println!("{line}");
    let dir = out.join("metrics");
    fs::create_dir_all(&dir)?;
    fs::write(dir.join(name), line + "\n")?;
    Ok(())
}

fn run(command: Command) -> Result<(), Error> {
    match command {
        Command::MakeManifest {
            layout,
            root,
            forms,
            out,
            writers,
            words_per_writer,
            pages_per_writer,
            test_pages,
            seed,
        } => {
            let manifest = match layout {
                Layout::Iam => {
                    let forms = forms.ok_or_else(|| Error::InvalidArgument("--forms is required for IAM".into()))?;
                    scan_iam(&root, &forms)?
                }
                Layout::Cvl => scan_cvl(&root)?,
                Layout::Firemaker => scan_writer_dirs(&root, DatasetKind::Firemaker)?,
                Layout::Dirs => scan_writer_dirs(&root, DatasetKind::Custom)?,
                Layout::Synthetic => generate_dataset(
                    &root,
                    &SynthConfig {
                        writers,
                        words_per_writer,
                        pages_per_writer,
                        test_pages,
                        seed,
                        ..Default::default()
                    },
                )?,
            };
            if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
                fs::create_dir_all(dir)?;
            }
            if layout == Layout::Synthetic {
                // Generated records are relative to the dataset directory.
                let abs = root.canonicalize()?;
                let records = manifest
                    .records
                    .iter()
                    .map(|r| {
                        let mut r = r.clone();
                        r.image_path = abs.join(&r.image_path).to_string_lossy().into_owned();
                        r
                    })
                    .collect();
                DatasetManifest::new(manifest.dataset, records, PathBuf::from(".")).write(&out)?;
            } else {
                manifest.write(&out)?;
            }
            println!(
                "{} records, {} writers -> {}",
                manifest.records.len(),
                manifest.num_writers,
                out.display()
            );
        }
        Command::Split {
            dataset,
            manifest,
            out,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let m = parse_manifest(&manifest)?.with_dataset(dataset.into());
            let opts = SplitOptions {
                seed: c.seed,
                iam_single_page_test_fraction: c.data.iam_single_page_test_fraction,
            };
            let (split, warnings) = make_fragnet_splits_with(&m, &opts)?;
            for w in &warnings {
                log::warn!("{w:?}");
            }
            let target = out.unwrap_or(manifest);
            let mut tmp = target.as_os_str().to_owned();
            tmp.push(".tmp");
            split.write(Path::new(&tmp))?;
            fs::rename(&tmp, &target)?;
            let train = split.split(Split::Train).count();
            let test = split.split(Split::Test).count();
            println!(
                "train {train}, test {test}, dropped {} -> {}",
                m.records.len() - train - test,
                target.display()
            );
        }
        Command::Validate { manifest } => {
            let m = parse_manifest(&manifest)?;
            let report = validate_dataset(&m);
            println!("{}", serde_json::to_string_pretty(&report)?);
            if report.exceeds_missing_threshold() {
                return Err(Error::InvalidArgument(format!(
                    "{:.2}% of images are missing",
                    100.0 * report.missing_fraction()
                )));
            }
        }
        Command::Pretrain { manifest, out, cfg } => {
            let c = cfg.resolve()?;
            let m = manifest_arg(manifest, &c)?;
            start_run(&out, "pretrain", &c)?;
            let report = pretrain(
                &m,
                &PretrainOptions {
                    encoder: &c.encoder,
                    loss: &c.loss,
                    augment: &c.preprocess,
                    pretrain: &c.pretrain,
                    seed: c.seed,
                    out_dir: &out,
                },
            )?;
            if let Some(last) = report.metrics.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            println!("checkpoint {}", report.final_checkpoint.display());
        }
        Command::Probe {
            checkpoint,
            manifest,
            out,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let m = manifest_arg(manifest, &c)?;
            start_run(&out, "probe", &c)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let mut report = train_linear_probe(&ck, &m, &c.downstream, c.seed)?;
            let dir = out.join("metrics");
            fs::create_dir_all(&dir)?;
            let mut log = fs::File::create(dir.join("probe.jsonl"))?;
            for e in &report.history {
                writeln!(log, "{}", serde_json::to_string(e)?)?;
            }
            let path = out.join("checkpoints").join("classifier.safetensors");
            let epochs = report.history.len();
            report.classifier.checkpoint(Some(epochs)).save(&path)?;
            if let Some(last) = report.history.last() {
                println!("{}", serde_json::to_string(last)?);
            }
            println!("checkpoint {}", path.display());
        }
        Command::EvalWord {
            checkpoint,
            manifest,
            out,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let m = manifest_arg(manifest, &c)?;
            start_run(&out, "eval-word", &c)?;
            let mut clf = WriterClassifier::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let (preds, _) = predict_words(&mut clf, &m, c.downstream.batch_size)?;
            if preds.is_empty() {
                return Err(Error::InvalidArgument("no readable test words".into()));
            }
            let (accuracy, _) = word_accuracy(&preds);
            let mut tsv = String::from("image_path\ttrue_writer\tpredicted\tconfidence\n");
            for p in &preds {
                tsv.push_str(&format!(
                    "{}\t{}\t{}\t{:.6}\n",
                    p.image_path, p.true_writer, p.predicted, p.confidence
                ));
            }
            fs::create_dir_all(out.join("metrics"))?;
            fs::write(out.join("metrics").join("word_predictions.tsv"), tsv)?;
            let record = EvalRecord {
                dataset: m.dataset.to_string(),
                level: EvalLevel::Word,
                accuracy,
                n: preds.len(),
                excluded_pages: 0,
            };
            emit(&out, "eval_word.json", &record)?;
        }
        Command::EvalPage {
            checkpoint,
            manifest,
            out,
            cfg,
        } => {
            let c = cfg.resolve()?;
            let m = manifest_arg(manifest, &c)?;
            start_run(&out, "eval-page", &c)?;
            let mut clf = WriterClassifier::from_checkpoint(&Checkpoint::load(&checkpoint)?)?;
            let eval = evaluate_page_level(&mut clf, &m, c.downstream.batch_size)?;
            write_pages(&out, &eval.pages)?;
            let record = EvalRecord {
                dataset: m.dataset.to_string(),
                level: EvalLevel::Page,
                accuracy: eval.accuracy,
                n: eval.n,
                excluded_pages: eval.excluded_pages,
            };
            emit(&out, "eval_page.json", &record)?;
        }
        Command::Finetune {
            checkpoint,
            manifest,
            fraction,
            mode,
            out,
            cfg,
        } => {
            let mut c = cfg.resolve()?;
            if let Some(f) = fraction {
                c.downstream.finetune_fraction = f;
                c.validate()?;
            }
            let m = manifest_arg(manifest, &c)?;
            start_run(&out, "finetune", &c)?;
            let ck = Checkpoint::load(&checkpoint)?;
            let transfer = match mode {
                TransferArg::Intra => TransferMode::IntraScript,
                TransferArg::Cross => TransferMode::CrossScript,
            };
            let mut report =
                finetune_semi_supervised(&ck, &m, c.downstream.finetune_fraction, transfer, &c.downstream, c.seed)?;
            let path = out.join("checkpoints").join("classifier.safetensors");
            let epochs = report.probe.history.len();
            report.probe.classifier.checkpoint(Some(epochs)).save(&path)?;
            write_pages(&out, &report.page_eval.pages)?;
            log::info!(
                "fine-tuned on {} of {} training words",
                report.subset_size,
                report.probe.train_images
            );
            let record = EvalRecord {
                dataset: m.dataset.to_string(),
                level: EvalLevel::Page,
                accuracy: report.page_eval.accuracy,
                n: report.page_eval.n,
                excluded_pages: report.page_eval.excluded_pages,
            };
            emit(&out, "finetune_page.json", &record)?;
        }
        Command::Analyze {
            checkpoint,
            images,
            out,
            cfg,
        } => {
            let c = cfg.resolve()?;
            start_run(&out, "analyze", &c)?;
            analyze(&checkpoint, &images, &out, &c)?;
        }
    }
    Ok(())
}

fn write_pages(out: &Path, pages: &[writer_ssl::downstream::PagePrediction]) -> Result<(), Error> {
    let mut tsv = String::from("page_id\ttrue_writer\tvoted_writer\twords\n");
    for p in pages {
        tsv.push_str(&format!(
            "{}\t{}\t{}\t{}\n",
            p.page_id,
            p.true_writer,
            p.voted_writer,
            p.word_predictions.len()
        ));
    }
    fs::create_dir_all(out.join("metrics"))?;
    fs::write(out.join("metrics").join("page_predictions.tsv"), tsv)?;
    Ok(())
}

#[derive(Serialize)]
struct AnalysisSummary {
    images: usize,
    tested: usize,
    skipped_images: usize,
    undefined_pairs: usize,
    rho0: f64,
    alpha: f64,
    bonferroni_alpha: f64,
    rejected: usize,
    retained: usize,
    rejected_bonferroni: usize,
    retained_bonferroni: usize,
}

fn analyze(checkpoint: &Path, images: &Path, out: &Path, c: &ExperimentConfig) -> Result<(), Error> {
    let ck = Checkpoint::load(checkpoint)?;
    let with_projector =
        ck.meta.kind == CheckpointKind::Pretrain && ck.tensors.keys().any(|k| k.starts_with("projector."));
    let mut encoder = Encoder::from_checkpoint(&ck, with_projector)?;
    let m = parse_manifest(images)?;
    let dir = out.join("analysis");
    fs::create_dir_all(&dir)?;
    let a = &c.analysis;
    let mut records: Vec<_> = m.records.iter().collect();
    if a.max_images > 0 {
        records.truncate(a.max_images);
    }
    let mut tests: Vec<(String, TTestResult)> = Vec::new();
    let (mut skipped, mut undefined) = (0, 0);
    for (i, r) in records.iter().enumerate() {
        let canvas = match load_canvas(&m.resolve(r)) {
            Ok(c) => c.normalize(),
            Err(e) => {
                log::warn!("skipping {}: {e}", r.image_path);
                skipped += 1;
                continue;
            }
        };
        let map = patch_correlation_map(&mut encoder, &canvas)?;
        let stem = format!("{i:05}");
        let mut tsv = String::new();
        for row in &map.rho {
            let cells: Vec<String> = row.iter().map(|v| format!("{v:.6}")).collect();
            tsv.push_str(&cells.join("\t"));
            tsv.push('\n');
        }
        fs::write(dir.join(format!("{stem}_correlation.tsv")), tsv)?;
        let (values, nan) = map.defined_pairs();
        undefined += nan;
        match kde_density(&values, a.bandwidth, a.kde_points) {
            Ok(kde) => {
                let body: String = kde
                    .x
                    .iter()
                    .zip(&kde.density)
                    .map(|(x, d)| format!("{x:.6}\t{d:.6}\n"))
                    .collect();
                fs::write(dir.join(format!("{stem}_kde.tsv")), format!("x\tdensity\n{body}"))?;
            }
            Err(e) => log::warn!("{}: no density estimate: {e}", r.image_path),
        }
        if let Ok(nd) = normality_diagnostics(&values) {
            let ecdf: String = nd.ecdf.iter().map(|(v, p)| format!("{v:.6}\t{p:.6}\n")).collect();
            fs::write(dir.join(format!("{stem}_ecdf.tsv")), format!("value\tcdf\n{ecdf}"))?;
            let qq: String = nd.qq.iter().map(|(q, v)| format!("{q:.6}\t{v:.6}\n")).collect();
            fs::write(
                dir.join(format!("{stem}_qq.tsv")),
                format!("normal_quantile\tsample\n{qq}"),
            )?;
        }
        match left_tailed_t_test(&values, a.rho0, a.alpha) {
            Ok(t) => tests.push((r.image_path.clone(), t)),
            Err(e) => {
                log::warn!("{}: t-test skipped: {e}", r.image_path);
                skipped += 1;
            }
        }
    }
    let plain: Vec<TTestResult> = tests.iter().map(|(_, t)| *t).collect();
    let adjusted = bonferroni_adjust(&plain, a.alpha);
    let mut tsv = String::from("image_path\tmean_rho\tt\tdof\tp_value\treject\treject_bonferroni\n");
    for ((path, t), adj) in tests.iter().zip(&adjusted) {
        tsv.push_str(&format!(
            "{path}\t{:.6}\t{:.6}\t{}\t{:.6e}\t{}\t{}\n",
            t.mean, t.t_statistic, t.dof, t.p_value, t.reject_null, adj.reject_null
        ));
    }
    fs::write(dir.join("pvalues.tsv"), tsv)?;
    let rejected = plain.iter().filter(|t| t.reject_null).count();
    let rejected_bonferroni = adjusted.iter().filter(|t| t.reject_null).count();
    let summary = AnalysisSummary {
        images: records.len(),
        tested: plain.len(),
        skipped_images: skipped,
        undefined_pairs: undefined,
        rho0: a.rho0,
        alpha: a.alpha,
        bonferroni_alpha: adjusted.first().map_or(a.alpha, |t| t.bonferroni_alpha),
        rejected,
        retained: plain.len() - rejected,
        rejected_bonferroni,
        retained_bonferroni: plain.len() - rejected_bonferroni,
    };
    let line = serde_json::to_string(&summary)?;
    println!("{line}");
    fs::write(dir.join("summary.json"), line + "\n")?;
    Ok(())
}

use std::path::PathBuf;
use std::time::Instant;

use writer_ssl::checkpoint::Checkpoint;
use writer_ssl::downstream::{evaluate_word_level, train_linear_probe, FinetuneMode, ProbeConfig};
use writer_ssl::encoder::EncoderConfig;
use writer_ssl::loss::{LossConfig, LossVariant};
use writer_ssl::preprocess::AugmentConfig;
use writer_ssl::pretrain::{pretrain, PretrainConfig, PretrainOptions};
use writer_ssl::synth::{generate_dataset, SynthConfig};

// Pretrain then linear-probe on a 5-writer synthetic set.
// usage: desk_probe <dir> [pretrain-epochs] [probe-epochs] [probe-lr] [augment-scale] [batch]
fn main() -> writer_ssl::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "desk".into()));
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let data = dir.join("probe-data");
    let manifest = if data.join("manifest.tsv").exists() {
        writer_ssl::data::parse_manifest(&data.join("manifest.tsv"))?
    } else {
        generate_dataset(&data, &SynthConfig::default())?
    };
    let t = Instant::now();
    let run = dir.join(format!("probe-run-{}", args[2..].join("-")));
    let _ = std::fs::remove_dir_all(&run);
    let report = pretrain(
        &manifest.subset(writer_ssl::data::Split::Train),
        &PretrainOptions {
            encoder: &EncoderConfig::small(128),
            loss: &LossConfig {
                variant: LossVariant::Scaled,
                ..Default::default()
            },
            augment: &AugmentConfig::default().scaled(arg(5, 0.02)),
            pretrain: &PretrainConfig {
                epochs: arg(2, 30.0) as usize,
                warmup_epochs: 2,
                base_lr: 1e-3,
                checkpoint_every: 0,
                batch_size: arg(6, 128.0) as usize,
                ..Default::default()
            },
            seed: 0,
            out_dir: &run,
        },
    )?;
    let last = report.metrics.last().unwrap();
    println!(
        "pretrain off {:.4} rank {:?} at {:.1}s",
        last.offdiag_mean_abs,
        last.effective_rank,
        t.elapsed().as_secs_f64()
    );
    let ck = Checkpoint::load(&report.final_checkpoint)?;
    let cfg = ProbeConfig {
        epochs: arg(3, 500.0) as usize,
        lr: arg(4, 1e-4),
        mode: FinetuneMode::LinearOnly,
        augment: false,
        ..Default::default()
    };
    let mut probe = train_linear_probe(&ck, &manifest, &cfg, 0)?;
    for e in probe.history.iter().step_by(25) {
        println!("probe {:4} loss {:.4} acc {:.2}", e.epoch, e.loss, e.train_accuracy);
    }
    let eval = evaluate_word_level(&mut probe.classifier, &manifest, 64)?;
    println!(
        "word accuracy {:.2}% ({}/{}) elapsed {:.1}s",
        eval.accuracy,
        eval.correct,
        eval.n,
        t.elapsed().as_secs_f64()
    );
    Ok(())
}

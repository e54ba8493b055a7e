use std::path::PathBuf;
use std::time::Instant;

use writer_ssl::encoder::EncoderConfig;
use writer_ssl::loss::{LossConfig, LossVariant};
use writer_ssl::preprocess::AugmentConfig;
use writer_ssl::pretrain::{pretrain, PretrainConfig, PretrainOptions};
use writer_ssl::synth::{generate_dataset, SynthConfig};

// Desk-scale pretraining on synthetic handwriting.
// usage: desk_pretrain <dir> [literal|scaled] [dim] [epochs] [lr] [batch] [augment-scale] [words-per-writer]
fn main() -> writer_ssl::Result<()> {
    env_logger::init();
    let args: Vec<String> = std::env::args().collect();
    let dir = PathBuf::from(args.get(1).cloned().unwrap_or_else(|| "desk".into()));
    let variant = match args.get(2).map(String::as_str) {
        Some("scaled") => LossVariant::Scaled,
        _ => LossVariant::Literal,
    };
    let arg = |i: usize, d: f64| args.get(i).and_then(|s| s.parse().ok()).unwrap_or(d);
    let dim = arg(3, 128.0) as usize;
    let epochs = arg(4, 30.0) as usize;
    let words = arg(8, 50.0) as usize;
    let data = dir.join(format!("data-{words}"));
    let manifest = if data.join("manifest.tsv").exists() {
        writer_ssl::data::parse_manifest(&data.join("manifest.tsv"))?
    } else {
        generate_dataset(
            &data,
            &SynthConfig {
                writers: 10,
                words_per_writer: words,
                test_pages: 0,
                ..Default::default()
            },
        )?
    };
    let pre = PretrainConfig {
        epochs,
        warmup_epochs: 2,
        base_lr: arg(5, 1e-3),
        batch_size: arg(6, 64.0) as usize,
        checkpoint_every: 0,
        ..Default::default()
    };
    let t = Instant::now();
    let run = dir.join(format!("run-{variant:?}-{dim}-{}", args[2..].join("-")));
    let _ = std::fs::remove_dir_all(&run);
    let report = pretrain(
        &manifest,
        &PretrainOptions {
            encoder: &EncoderConfig::small(dim),
            loss: &LossConfig {
                variant,
                ..Default::default()
            },
            augment: &AugmentConfig::default().scaled(arg(7, 1.0)),
            pretrain: &pre,
            seed: 0,
            out_dir: &run,
        },
    )?;
    for m in &report.metrics {
        println!(
            "{:3} loss {:10.4} diag {:8.4} off {:8.5} rank {:7.2} rank_corr {:7.2} lr {:.2e}",
            m.epoch,
            m.loss,
            m.diag_mean,
            m.offdiag_mean_abs,
            m.effective_rank.unwrap_or(0.0),
            m.effective_rank_corr.unwrap_or(0.0),
            m.lr
        );
    }
    println!("elapsed {:.1}s", t.elapsed().as_secs_f64());
    Ok(())
}

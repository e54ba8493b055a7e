//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use writer_ssl::checkpoint::Checkpoint;
use writer_ssl::data::{make_fragnet_splits, DatasetKind, DatasetManifest, SampleRecord, Split};
use writer_ssl::downstream::{
    evaluate_word_level, train_linear_probe, vote_pages, FinetuneMode, ProbeConfig, WordPrediction,
};
use writer_ssl::encoder::{Encoder, EncoderConfig};
use writer_ssl::loss::{
    decorrelation_loss, l2_normalize_dims, loss_and_grad, standardize_dims, LossConfig, LossVariant, Matrix,
};
use writer_ssl::nn::Mode;
use writer_ssl::preprocess::{patchify, AugmentConfig, CanvasImage, WordImage, CANVAS_HEIGHT, CANVAS_WIDTH};
use writer_ssl::pretrain::{pretrain, PretrainConfig, PretrainOptions};
use writer_ssl::stats::{bonferroni_adjust, left_tailed_t_test, student_t_cdf};
use writer_ssl::synth::{generate_dataset, SynthConfig};

type Outcome = Result<String, String>;

fn check(cond: bool, msg: impl Into<String>) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn random_matrix(rng: &mut ChaCha8Rng, n: usize, d: usize) -> Matrix {
    Matrix::from_fn(n, d, |_, _| rng.random_range(-2.0..2.0))
}

// ---------------------------------------------------------------------------
// Independent oracles, written loop by loop from the definitions.

fn oracle_step1(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (z.len(), z[0].len());
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mut ss = 0.0;
        for row in z {
            ss += row[j] * row[j];
        }
        for k in 0..n {
            out[k][j] = z[k][j] / ss.sqrt();
        }
    }
    out
}

fn oracle_step2(z: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, d) = (z.len(), z[0].len());
    let mut out = vec![vec![0.0; d]; n];
    for j in 0..d {
        let mean: f64 = z.iter().map(|r| r[j]).sum::<f64>() / n as f64;
        let var: f64 = z.iter().map(|r| (r[j] - mean).powi(2)).sum::<f64>() / n as f64;
        for k in 0..n {
            out[k][j] = (z[k][j] - mean) / var.sqrt();
        }
    }
    out
}

/// `C_ij = Σ_k z_k^i z'_k^j`, then `(1/N) Σ_i [Σ_{j≠i} C_ij² + (C_ii − 1)²]`.
fn oracle_loss(z: &[Vec<f64>], zp: &[Vec<f64>], scale: f64) -> f64 {
    let (n, d) = (z.len(), z[0].len());
    let mut total = 0.0;
    for i in 0..d {
        for j in 0..d {
            let mut c = 0.0;
            for k in 0..n {
                c += z[k][i] * zp[k][j];
            }
            c *= scale;
            total += if i == j { (c - 1.0).powi(2) } else { c * c };
        }
    }
    total / n as f64
}

fn rows(m: &Matrix) -> Vec<Vec<f64>> {
    (0..m.nrows())
        .map(|i| (0..m.ncols()).map(|j| m[(i, j)]).collect())
        .collect()
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-300)
}

// ---------------------------------------------------------------------------

fn criterion_1() -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let n = rng.random_range(2..=8);
        let d = rng.random_range(1..=16);
        let (za, zb) = (random_matrix(&mut rng, n, d), random_matrix(&mut rng, n, d));
        let (oa, ob) = (
            oracle_step2(&oracle_step1(&rows(&za))),
            oracle_step2(&oracle_step1(&rows(&zb))),
        );
        for (variant, scale) in [(LossVariant::Literal, 1.0), (LossVariant::Scaled, 1.0 / n as f64)] {
            let cfg = LossConfig {
                variant,
                ..LossConfig::exact()
            };
            let got = loss_and_grad(&za, &zb, &cfg).map_err(|e| e.to_string())?.loss.total;
            let want = oracle_loss(&oa, &ob, scale);
            worst = worst.max(rel_err(got, want));
            // The loss on already-normalized inputs, without the normalization path.
            let pre_a = Matrix::from_fn(n, d, |i, j| oa[i][j]);
            let pre_b = Matrix::from_fn(n, d, |i, j| ob[i][j]);
            let direct = decorrelation_loss(&pre_a, &pre_b, variant)
                .map_err(|e| e.to_string())?
                .total;
            worst = worst.max(rel_err(direct, want));
        }
    }
    let elapsed = start.elapsed();
    check(worst < 1e-10, format!("max relative error {worst:.3e}"))?;
    check(elapsed < Duration::from_secs(10), format!("took {elapsed:?}"))?;
    Ok(format!(
        "max relative error {worst:.2e} over 100 pairs x 2 variants in {elapsed:.2?}"
    ))
}

fn criterion_2() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (n, d) = (6, 4);
    let (za, zb) = (random_matrix(&mut rng, n, d), random_matrix(&mut rng, n, d));
    let mut worst: f64 = 0.0;
    for variant in [LossVariant::Literal, LossVariant::Scaled] {
        let cfg = LossConfig {
            variant,
            ..LossConfig::exact()
        };
        let pl = loss_and_grad(&za, &zb, &cfg).map_err(|e| e.to_string())?;
        let f = |a: &Matrix, b: &Matrix| loss_and_grad(a, b, &cfg).unwrap().loss.total;
        let h = 1e-5;
        for view in 0..2 {
            for i in 0..n {
                for j in 0..d {
                    let (mut ap, mut am, mut bp, mut bm) = (za.clone(), za.clone(), zb.clone(), zb.clone());
                    let analytic = if view == 0 {
                        ap[(i, j)] += h;
                        am[(i, j)] -= h;
                        pl.grad_a[(i, j)]
                    } else {
                        bp[(i, j)] += h;
                        bm[(i, j)] -= h;
                        pl.grad_b[(i, j)]
                    };
                    let numeric = (f(&ap, &bp) - f(&am, &bm)) / (2.0 * h);
                    // Vanishing entries compare absolutely.
                    let e = if analytic.abs().max(numeric.abs()) < 1e-7 {
                        (analytic - numeric).abs()
                    } else {
                        rel_err(analytic, numeric)
                    };
                    worst = worst.max(e);
                }
            }
        }
    }
    check(worst < 1e-4, format!("max relative error {worst:.3e}"))?;
    Ok(format!(
        "max relative error {worst:.2e} (N=6, D=4, h=1e-5, both variants)"
    ))
}

fn criterion_3() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let cfg = LossConfig::exact();
    let (mut norm_err, mut mean_err, mut var_err, mut idem_err) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
    for _ in 0..50 {
        let n = rng.random_range(2..=64);
        let d = rng.random_range(1..=32);
        let z = random_matrix(&mut rng, n, d);
        let s1 = l2_normalize_dims(&z, &cfg).map_err(|e| e.to_string())?;
        let s2 = standardize_dims(&s1, &cfg).map_err(|e| e.to_string())?;
        let direct = standardize_dims(&z, &cfg).map_err(|e| e.to_string())?;
        for j in 0..d {
            let col1 = s1.column(j);
            norm_err = norm_err.max((col1.norm() - 1.0).abs());
            let col2 = s2.column(j);
            let mean = col2.sum() / n as f64;
            let var = col2.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            mean_err = mean_err.max(mean.abs());
            var_err = var_err.max((var - 1.0).abs());
        }
        idem_err = idem_err.max((&s2 - &direct).amax());
    }
    check(norm_err <= 1e-9, format!("column norm error {norm_err:.3e}"))?;
    check(mean_err <= 1e-9, format!("column mean error {mean_err:.3e}"))?;
    check(var_err <= 1e-6, format!("column variance error {var_err:.3e}"))?;
    check(
        idem_err <= 1e-9,
        format!("Step2(Step1(z)) vs Step2(z) differ by {idem_err:.3e}"),
    )?;
    Ok(format!(
        "norm {norm_err:.1e}, mean {mean_err:.1e}, variance {var_err:.1e}, composition {idem_err:.1e}"
    ))
}

fn random_canvas(rng: &mut ChaCha8Rng) -> CanvasImage {
    let data = (0..CANVAS_HEIGHT * CANVAS_WIDTH * 3)
        .map(|_| rng.random_range(0.0..255.0))
        .collect();
    CanvasImage::from_image(WordImage::new(CANVAS_HEIGHT, CANVAS_WIDTH, data).unwrap())
        .unwrap()
        .normalize()
}

fn criterion_4() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cfg = EncoderConfig::default();
    let mut enc = Encoder::new(&cfg, 0).map_err(|e| e.to_string())?;
    let mut worst: f64 = 0.0;
    for n in [1usize, 2, 7] {
        let canvases: Vec<CanvasImage> = (0..n).map(|_| random_canvas(&mut rng)).collect();
        check(
            canvases.iter().all(|c| (c.image.height, c.image.width) == (64, 128)),
            "canvas is not 64x128",
        )?;
        let patches = patchify(&canvases).map_err(|e| e.to_string())?;
        check(
            patches.shape() == [n * 8, 3, 32, 32],
            format!("patch shape {:?}", patches.shape()),
        )?;
        check(patches.data.len() == n * 8 * 3 * 32 * 32, "patch data length")?;
        let out = enc.forward_encode(&patches, Mode::eval()).map_err(|e| e.to_string())?;
        check(
            out.pooled.shape == vec![n, 2048],
            format!("embedding shape {:?}", out.pooled.shape),
        )?;
        check(
            out.per_patch.shape == vec![n * 8, 2048],
            format!("per-patch shape {:?}", out.per_patch.shape),
        )?;
        for img in 0..n {
            for j in 0..2048 {
                let mean: f64 = (0..8)
                    .map(|p| f64::from(out.per_patch.data[(img * 8 + p) * 2048 + j]))
                    .sum::<f64>()
                    / 8.0;
                worst = worst.max((mean - f64::from(out.pooled.data[img * 2048 + j])).abs());
            }
        }
    }
    check(worst <= 1e-6, format!("pooled vs patch mean differ by {worst:.3e}"))?;
    Ok(format!(
        "N in {{1,2,7}}: (N*8)x3x32x32 -> Nx2048, pooling error {worst:.1e}"
    ))
}

/// Desk-scale pretraining settings shared by criteria 5 and 6.
fn desk_pretrain_config() -> (EncoderConfig, LossConfig, AugmentConfig, PretrainConfig) {
    (
        EncoderConfig::small(128),
        LossConfig {
            variant: LossVariant::Scaled,
            ..Default::default()
        },
        AugmentConfig::default().scaled(0.02),
        PretrainConfig {
            epochs: 30,
            warmup_epochs: 2,
            base_lr: 1e-3,
            batch_size: 128,
            checkpoint_every: 0,
            ..Default::default()
        },
    )
}

fn criterion_5(work: &Path) -> Outcome {
    let start = Instant::now();
    let data = work.join("c5-data");
    let manifest = generate_dataset(
        &data,
        &SynthConfig {
            writers: 10,
            words_per_writer: 100,
            test_pages: 0,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let (encoder, loss, augment, pre) = desk_pretrain_config();
    let report = pretrain(
        &manifest,
        &PretrainOptions {
            encoder: &encoder,
            loss: &loss,
            augment: &augment,
            pretrain: &pre,
            seed: 0,
            out_dir: &work.join("c5-run"),
        },
    )
    .map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let first = &report.metrics[0];
    let last = report.metrics.last().unwrap();
    let drop = 1.0 - last.offdiag_mean_abs / first.offdiag_mean_abs;
    let rank = last.effective_rank.unwrap_or(0.0);
    let summary = format!(
        "{} images, off-diagonal {:.4} -> {:.4} ({:.0}% drop), effective rank {:.1}/128, {:.0}s",
        report.images,
        first.offdiag_mean_abs,
        last.offdiag_mean_abs,
        100.0 * drop,
        rank,
        elapsed.as_secs_f64()
    );
    check(
        report.images >= 500,
        format!("only {} images; {summary}", report.images),
    )?;
    check(last.epoch == 29, format!("last epoch {}", last.epoch))?;
    check(drop >= 0.5, format!("off-diagonal drop below 50%; {summary}"))?;
    check(rank >= 64.0, format!("effective rank below 64; {summary}"))?;
    check(elapsed < Duration::from_secs(15 * 60), format!("too slow; {summary}"))?;
    Ok(summary)
}

fn criterion_6(work: &Path) -> Outcome {
    let start = Instant::now();
    let manifest = generate_dataset(&work.join("c6-data"), &SynthConfig::default()).map_err(|e| e.to_string())?;
    check(manifest.num_writers == 5, "expected 5 writers")?;
    let (encoder, loss, augment, pre) = desk_pretrain_config();
    let report = pretrain(
        &manifest.subset(Split::Train),
        &PretrainOptions {
            encoder: &encoder,
            loss: &loss,
            augment: &augment,
            pretrain: &pre,
            seed: 0,
            out_dir: &work.join("c6-run"),
        },
    )
    .map_err(|e| e.to_string())?;
    let ck = Checkpoint::load(&report.final_checkpoint).map_err(|e| e.to_string())?;
    let cfg = ProbeConfig {
        epochs: 500,
        lr: 1e-3,
        mode: FinetuneMode::LinearOnly,
        augment: false,
        ..Default::default()
    };
    let mut probe = train_linear_probe(&ck, &manifest, &cfg, 0).map_err(|e| e.to_string())?;
    let eval = evaluate_word_level(&mut probe.classifier, &manifest, 64).map_err(|e| e.to_string())?;
    let elapsed = start.elapsed();
    let summary = format!(
        "word accuracy {:.2}% ({}/{}, chance 20%), {:.0}s",
        eval.accuracy,
        eval.correct,
        eval.n,
        elapsed.as_secs_f64()
    );
    check(eval.accuracy >= 60.0, summary.clone())?;
    check(elapsed < Duration::from_secs(20 * 60), format!("too slow; {summary}"))?;
    Ok(summary)
}

/// Most votes, then the largest summed confidence, then the smallest id.
fn brute_force_vote(votes: &[(String, f64)]) -> String {
    let mut tally: BTreeMap<&str, (usize, f64)> = BTreeMap::new();
    for (w, c) in votes {
        let e = tally.entry(w).or_default();
        e.0 += 1;
        e.1 += c;
    }
    let mut best: Option<(&str, usize, f64)> = None;
    for (w, (count, conf)) in tally {
        let better = match best {
            None => true,
            Some((_, bc, bconf)) => count > bc || (count == bc && conf > bconf),
        };
        if better {
            best = Some((w, count, conf));
        }
    }
    best.unwrap().0.to_string()
}

fn criterion_7() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut preds = Vec::new();
    let mut expected = BTreeMap::new();
    let mut all_pages = BTreeSet::new();
    let mut ties = 0;
    for page in 0..1000 {
        let page_id = format!("p{page:04}");
        let true_writer = format!("w{}", rng.random_range(0..4));
        let words = rng.random_range(1..=9);
        let mut votes = Vec::new();
        for _ in 0..words {
            // Confidences on a 1/8 grid sum exactly, so confidence ties occur too.
            let w = format!("w{}", rng.random_range(0..4));
            let c = f64::from(rng.random_range(1..=8u8)) / 8.0;
            votes.push((w, c));
        }
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for (w, _) in &votes {
            *counts.entry(w).or_default() += 1;
        }
        let top = counts.values().max().unwrap();
        if counts.values().filter(|c| *c == top).count() > 1 {
            ties += 1;
        }
        for (k, (w, c)) in votes.iter().enumerate() {
            preds.push(WordPrediction {
                image_path: format!("{page_id}/{k}.png"),
                page_id: page_id.clone(),
                true_writer: true_writer.clone(),
                predicted: w.clone(),
                confidence: *c,
            });
        }
        expected.insert(page_id.clone(), brute_force_vote(&votes));
        all_pages.insert((page_id, true_writer));
    }
    let eval = vote_pages(&preds, &all_pages);
    check(eval.pages.len() == 1000, format!("{} pages voted", eval.pages.len()))?;
    let mismatches = eval
        .pages
        .iter()
        .filter(|p| expected[&p.page_id] != p.voted_writer)
        .count();
    check(
        mismatches == 0,
        format!("{mismatches} pages differ from the brute-force count"),
    )?;
    let correct = eval.pages.iter().filter(|p| p.voted_writer == p.true_writer).count();
    check(eval.correct == correct, "page accuracy count")?;
    Ok(format!("1000 pages match ({ties} with tied vote counts)"))
}

/// Student-t CDF with 27 degrees of freedom, computed with scipy.stats.t.cdf.
const T_CDF_27: [(f64, f64); 20] = [
    (-6.0, 1.057825282131951e-06),
    (-4.5, 5.834470801261976e-05),
    (-3.2, 0.0017497735953869308),
    (-2.771, 0.004996229312315117),
    (-2.473, 0.009992286566436985),
    (-2.052, 0.024991190976795755),
    (-1.703, 0.050027321687101854),
    (-1.314, 0.09995068595554117),
    (-1.0, 0.16309445033986353),
    (-0.5, 0.31056293188162554),
    (-0.25, 0.40223987714984927),
    (-0.1, 0.4605415784686171),
    (0.0, 0.5),
    (0.1, 0.5394584215313829),
    (0.5, 0.6894370681183745),
    (1.0, 0.8369055496601365),
    (1.703, 0.9499726783128981),
    (2.473, 0.990007713433563),
    (3.5, 0.999183255593131),
    (5.0, 0.999984772172782),
];

fn criterion_8() -> Outcome {
    let mut worst: f64 = 0.0;
    for (t, p) in T_CDF_27 {
        worst = worst.max((student_t_cdf(t, 27.0) - p).abs());
    }
    check(worst <= 1e-8, format!("max |p - reference| = {worst:.3e}"))?;
    check(student_t_cdf(0.0, 27.0) == 0.5, "t = 0 must give p = 0.5 exactly")?;

    // The left-tailed test feeds its statistic through the same CDF: 28 values
    // give 27 degrees of freedom.
    let values: Vec<f64> = (0..28)
        .map(|i| 0.6 + 0.01 * f64::from(i % 7) - 0.002 * f64::from(i % 3))
        .collect();
    let t = left_tailed_t_test(&values, 0.8, 0.05).map_err(|e| e.to_string())?;
    check(t.dof == 27, format!("dof {}", t.dof))?;
    check(
        (t.p_value - student_t_cdf(t.t_statistic, 27.0)).abs() == 0.0,
        "p-value is not the t CDF",
    )?;

    let results: Vec<_> = (0..40)
        .map(|i| {
            let v: Vec<f64> = (0..28)
                .map(|k| 0.78 + 0.001 * f64::from(i) + 0.01 * f64::from(k % 5))
                .collect();
            left_tailed_t_test(&v, 0.8, 0.05).unwrap()
        })
        .collect();
    for m in [1usize, 7, 40] {
        let adj = bonferroni_adjust(&results[..m], 0.05);
        check(
            adj.iter().all(|r| r.bonferroni_alpha == 0.05 / m as f64),
            format!("threshold for m={m}"),
        )?;
        check(
            adj.iter()
                .zip(&results[..m])
                .all(|(a, r)| a.reject_null == (r.p_value < 0.05 / m as f64)),
            format!("decisions for m={m}"),
        )?;
    }
    Ok(format!(
        "20 reference values, max error {worst:.1e}; Bonferroni alpha/m exact for m in {{1,7,40}}"
    ))
}

fn rec(path: &str, writer: &str, page: &str, text: u32) -> SampleRecord {
    SampleRecord {
        image_path: path.into(),
        writer_id: writer.into(),
        page_id: page.into(),
        text_index: text,
        split: Split::Unassigned,
    }
}

fn criterion_9() -> Outcome {
    // CVL: texts 1-7 for two writers.
    let mut records = Vec::new();
    for w in ["0001", "0002"] {
        for t in 1..=7 {
            for k in 0..2 {
                records.push(rec(&format!("{w}-{t}-{k}.png"), w, &format!("{w}-{t}"), t));
            }
        }
    }
    let cvl = DatasetManifest::new(DatasetKind::Cvl, records, PathBuf::new());
    let split = make_fragnet_splits(&cvl, 0).map_err(|e| e.to_string())?;
    for r in &split.records {
        let want = if r.text_index <= 3 { Split::Train } else { Split::Test };
        check(
            r.split == want,
            format!("CVL {} text {} -> {:?}", r.image_path, r.text_index, r.split),
        )?;
    }
    let other_seed = make_fragnet_splits(&cvl, 99).map_err(|e| e.to_string())?;
    check(other_seed.records == split.records, "CVL split depends on the seed")?;

    // Firemaker: pages 1-4.
    let mut records = Vec::new();
    for w in ["01", "02"] {
        for p in 1..=4 {
            records.push(rec(&format!("{w}/{p}/a.png"), w, &p.to_string(), p));
        }
    }
    let fm = DatasetManifest::new(DatasetKind::Firemaker, records, PathBuf::new());
    let split = make_fragnet_splits(&fm, 0).map_err(|e| e.to_string())?;
    let by_page: BTreeMap<(String, String), Split> = split
        .records
        .iter()
        .map(|r| ((r.writer_id.clone(), r.page_id.clone()), r.split))
        .collect();
    for w in ["01", "02"] {
        check(
            by_page.get(&(w.into(), "1".into())) == Some(&Split::Train),
            "Firemaker page 1 not train",
        )?;
        check(
            by_page.get(&(w.into(), "4".into())) == Some(&Split::Test),
            "Firemaker page 4 not test",
        )?;
        for p in ["2", "3"] {
            check(
                !by_page.contains_key(&(w.into(), p.into())),
                format!("Firemaker page {p} not dropped"),
            )?;
        }
    }

    // IAM: multi-page writers get one test page; a single-page writer is
    // split by word.
    let mut records = Vec::new();
    for (w, pages) in [
        ("000", vec!["a01-000", "a01-001"]),
        ("001", vec!["b01-000", "b01-001", "b01-002"]),
    ] {
        for p in pages {
            for k in 0..3 {
                records.push(rec(&format!("{p}-{k}.png"), w, p, 0));
            }
        }
    }
    for k in 0..6 {
        records.push(rec(&format!("c01-000-{k}.png"), "002", "c01-000", 0));
    }
    let iam = DatasetManifest::new(DatasetKind::Iam, records, PathBuf::new());
    let mut test_pages_per_seed = Vec::new();
    for seed in 0..8 {
        let a = make_fragnet_splits(&iam, seed).map_err(|e| e.to_string())?;
        let b = make_fragnet_splits(&iam, seed).map_err(|e| e.to_string())?;
        check(
            a.records == b.records,
            format!("IAM split not deterministic for seed {seed}"),
        )?;
        for w in ["000", "001"] {
            let test_pages: BTreeSet<&str> = a
                .records
                .iter()
                .filter(|r| r.writer_id == w && r.split == Split::Test)
                .map(|r| r.page_id.as_str())
                .collect();
            check(
                test_pages.len() == 1,
                format!("writer {w}: {} test pages", test_pages.len()),
            )?;
            let page = *test_pages.iter().next().unwrap();
            check(
                a.records
                    .iter()
                    .filter(|r| r.page_id == page)
                    .all(|r| r.split == Split::Test),
                "test page partly in train",
            )?;
        }
        let single: Vec<Split> = a
            .records
            .iter()
            .filter(|r| r.writer_id == "002")
            .map(|r| r.split)
            .collect();
        check(
            single.contains(&Split::Train) && single.contains(&Split::Test),
            "single-page writer missing from a split",
        )?;
        test_pages_per_seed.push(
            a.records
                .iter()
                .filter(|r| r.split == Split::Test && r.writer_id != "002")
                .map(|r| r.page_id.clone())
                .collect::<BTreeSet<_>>(),
        );
    }
    let distinct: BTreeSet<_> = test_pages_per_seed.iter().collect();
    check(distinct.len() > 1, "IAM test page never changes with the seed")?;
    Ok(format!(
        "CVL, Firemaker and IAM fixtures; {} distinct IAM test-page choices over 8 seeds",
        distinct.len()
    ))
}

// ---------------------------------------------------------------------------
// Criterion 10: the full configurations run end-to-end through the CLI on
// small dataset subsets laid out like the real corpora.

fn cli(args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_writer-ssl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!(
            "`{}` failed: {}",
            args[0],
            String::from_utf8_lossy(&out.stderr).trim()
        ))
    }
}

/// Two writers, two pages each, two words per page, rendered once and copied
/// into each dataset's directory layout.
fn layout_subsets(work: &Path) -> Result<Vec<(&'static str, PathBuf, Vec<String>)>, String> {
    let src = work.join("c10-src");
    let m = generate_dataset(
        &src,
        &SynthConfig {
            writers: 2,
            words_per_writer: 8,
            pages_per_writer: 4,
            test_pages: 0,
            ..Default::default()
        },
    )
    .map_err(|e| e.to_string())?;
    let copy = |from: &SampleRecord, to: &Path| -> Result<(), String> {
        fs::create_dir_all(to.parent().unwrap()).map_err(|e| e.to_string())?;
        fs::copy(m.resolve(from), to).map(|_| ()).map_err(|e| e.to_string())
    };
    let mut per_writer: BTreeMap<&str, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &m.records {
        per_writer.entry(&r.writer_id).or_default().push(r);
    }

    let iam = work.join("c10-iam");
    let mut forms = String::from("# form writer\n");
    for (wi, (_, recs)) in per_writer.iter().enumerate() {
        for (k, r) in recs.iter().take(4).enumerate() {
            let form = format!("a0{wi}-00{}", k / 2);
            copy(r, &iam.join(format!("words/a0{wi}/{form}/{form}-00-0{}.png", k % 2)))?;
            if k % 2 == 0 {
                forms.push_str(&format!("{form} 00{wi} 2 prt 7 5 52 36\n"));
            }
        }
    }
    fs::write(iam.join("forms.txt"), forms).map_err(|e| e.to_string())?;

    let cvl = work.join("c10-cvl");
    for (wi, (_, recs)) in per_writer.iter().enumerate() {
        // Text 1 for training, text 4 for testing.
        for (k, r) in recs.iter().take(4).enumerate() {
            let text = if k < 2 { 1 } else { 4 };
            copy(r, &cvl.join(format!("000{wi}/000{wi}-{text}-0-{k}-word.png")))?;
        }
    }

    let fm = work.join("c10-firemaker");
    for (wi, (_, recs)) in per_writer.iter().enumerate() {
        for (k, r) in recs.iter().take(4).enumerate() {
            let page = if k < 2 { 1 } else { 4 };
            copy(r, &fm.join(format!("w{wi}/{page}/{k}.png")))?;
        }
    }
    let s = |p: PathBuf| p.to_string_lossy().into_owned();
    Ok(vec![
        (
            "iam",
            iam.clone(),
            vec![
                "--root".into(),
                s(iam.join("words")),
                "--forms".into(),
                s(iam.join("forms.txt")),
            ],
        ),
        ("cvl", cvl.clone(), vec!["--root".into(), s(cvl)]),
        ("firemaker", fm.clone(), vec!["--root".into(), s(fm)]),
    ])
}

fn criterion_10(work: &Path) -> Outcome {
    let start = Instant::now();
    let configs = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let smoke = [
        "--set",
        "pretrain.epochs=2",
        "--set",
        "pretrain.warmup_epochs=1",
        "--set",
        "downstream.epochs=2",
    ];
    let mut finetune_dataset: Option<String> = None;
    for (name, root, layout_args) in layout_subsets(work)? {
        let config = configs.join(format!("{name}.toml"));
        let config = config.to_str().unwrap();
        let manifest = root.join("manifest.tsv");
        let manifest = manifest.to_str().unwrap();
        let out = |stage: &str| root.join(stage).to_string_lossy().into_owned();

        let mut args = vec!["make-manifest", "--layout", name, "--out", manifest];
        args.extend(layout_args.iter().map(String::as_str));
        cli(&args)?;
        cli(&["split", "--dataset", name, "--manifest", manifest, "--config", config])?;
        cli(&["validate", "--manifest", manifest])?;

        let with = |mut a: Vec<String>| {
            a.extend(["--manifest", manifest, "--config", config].map(String::from));
            a.extend(smoke.map(String::from));
            a
        };
        let run = |a: Vec<String>| cli(&a.iter().map(String::as_str).collect::<Vec<_>>());
        run(with(vec!["pretrain".into(), "--out".into(), out("pretrain")]))?;
        let ck = format!("{}/checkpoints/final.safetensors", out("pretrain"));
        check(Path::new(&ck).exists(), format!("{name}: no final checkpoint at {ck}"))?;
        run(with(vec![
            "probe".into(),
            "--checkpoint".into(),
            ck.clone(),
            "--out".into(),
            out("probe"),
        ]))?;
        let clf = format!("{}/checkpoints/classifier.safetensors", out("probe"));
        run(with(vec![
            "eval-word".into(),
            "--checkpoint".into(),
            clf.clone(),
            "--out".into(),
            out("word"),
        ]))?;
        run(with(vec![
            "eval-page".into(),
            "--checkpoint".into(),
            clf,
            "--out".into(),
            out("page"),
        ]))?;
        run(with(vec![
            "finetune".into(),
            "--checkpoint".into(),
            ck.clone(),
            "--out".into(),
            out("finetune"),
        ]))?;
        if let Some(other) = &finetune_dataset {
            // Pretrained on the previous dataset, fine-tuned on this one.
            run(with(vec![
                "finetune".into(),
                "--mode".into(),
                "cross".into(),
                "--checkpoint".into(),
                other.clone(),
                "--out".into(),
                out("finetune-cross"),
            ]))?;
        }
        finetune_dataset = Some(ck);
        for stage in ["pretrain", "probe", "word", "page", "finetune"] {
            let dir = root.join(stage);
            check(
                dir.join("config.resolved.toml").exists() && dir.join("run.json").exists(),
                format!("{name}/{stage}: run directory is not self-describing"),
            )?;
        }
    }
    Ok(format!(
        "IAM/CVL/Firemaker full configs (ResNet-50, D=2048) ran every stage at 2 epochs in {:.0}s; \
         the published full-scale accuracies are not reproducible at desk scale",
        start.elapsed().as_secs_f64()
    ))
}

fn main() {
    let filter: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let work = tempfile::tempdir().expect("temp dir");
    let work = work.path();
    type Criterion<'a> = (&'a str, Box<dyn Fn() -> Outcome + 'a>);
    let criteria: Vec<Criterion> = vec![
        ("loss oracle equivalence", Box::new(criterion_1)),
        ("gradient check", Box::new(criterion_2)),
        ("normalization invariants", Box::new(criterion_3)),
        ("shape contract", Box::new(criterion_4)),
        ("desk-scale decorrelation", Box::new(|| criterion_5(work))),
        ("desk-scale probe", Box::new(|| criterion_6(work))),
        ("majority-vote oracle", Box::new(criterion_7)),
        ("t-test correctness", Box::new(criterion_8)),
        ("split-rule fixtures", Box::new(criterion_9)),
        ("full configurations end-to-end", Box::new(|| criterion_10(work))),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let id = (i + 1).to_string();
        if !filter.is_empty() && !filter.iter().any(|f| f == &id) {
            continue;
        }
        let outcome = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {id:>2} PASS  {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("criterion {id:>2} FAIL  {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
}

//! Patch-level disentanglement analysis: Pearson correlation maps between the
//! per-patch embeddings of one word, a left-tailed one-sample t-test against
//! a correlation threshold, Bonferroni correction, kernel density estimates
//! and normality diagnostics.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};
use statrs::function::beta::beta_reg;

use crate::encoder::{Encoder, FeatureExtractor};
use crate::error::{Error, Result};
use crate::nn::Mode;
use crate::preprocess::{patchify, CanvasImage, PATCHES_PER_IMAGE};

/// Pearson correlation of two equally long vectors. `None` when either is
/// constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len(), "pearson on vectors of different length");
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        let (dx, dy) = (x - ma, y - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa == 0.0 || sbb == 0.0 {
        return None;
    }
    Some((sab / (saa.sqrt() * sbb.sqrt())).clamp(-1.0, 1.0))
}

/// Symmetric map of pairwise correlations between the patch vectors of one
/// image. Pairs involving a constant vector are NaN.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationMap {
    pub rho: Vec<Vec<f64>>,
}

impl CorrelationMap {
    pub fn from_vectors(vectors: &[Vec<f64>]) -> Self {
        let k = vectors.len();
        let mut rho = vec![vec![0.0; k]; k];
        for i in 0..k {
            rho[i][i] = 1.0;
            for j in i + 1..k {
                let r = pearson(&vectors[i], &vectors[j]).unwrap_or(f64::NAN);
                rho[i][j] = r;
                rho[j][i] = r;
            }
        }
        CorrelationMap { rho }
    }

    pub fn size(&self) -> usize {
        self.rho.len()
    }

    /// Upper-triangle entries in row-major order (28 for eight patches).
    pub fn pairs(&self) -> Vec<((usize, usize), f64)> {
        let k = self.size();
        let mut out = Vec::with_capacity(k * (k - 1) / 2);
        for i in 0..k {
            for j in i + 1..k {
                out.push(((i, j), self.rho[i][j]));
            }
        }
        out
    }

    /// Defined pair correlations and the number of undefined (NaN) pairs.
    pub fn defined_pairs(&self) -> (Vec<f64>, usize) {
        let all = self.pairs();
        let total = all.len();
        let defined: Vec<f64> = all.into_iter().map(|(_, r)| r).filter(|r| !r.is_nan()).collect();
        let undefined = total - defined.len();
        (defined, undefined)
    }
}

/// Correlation map of the eight pre-pooling projector outputs of `canvas`.
pub fn patch_correlation_map<B: FeatureExtractor>(
    encoder: &mut Encoder<B>,
    canvas: &CanvasImage,
) -> Result<CorrelationMap> {
    let patches = patchify(std::slice::from_ref(canvas))?;
    let out = encoder.forward_encode(&patches, Mode::eval())?;
    let d = out.per_patch.dim(1);
    let vectors: Vec<Vec<f64>> = (0..PATCHES_PER_IMAGE)
        .map(|p| {
            out.per_patch.data[p * d..(p + 1) * d]
                .iter()
                .map(|&v| f64::from(v))
                .collect()
        })
        .collect();
    Ok(CorrelationMap::from_vectors(&vectors))
}

/// Left-tail probability `P(T <= t)` of Student's t with `dof` degrees of
/// freedom, through the regularized incomplete beta function.
pub fn student_t_cdf(t: f64, dof: f64) -> f64 {
    if t == 0.0 {
        return 0.5;
    }
    let tail = 0.5 * beta_reg(dof / 2.0, 0.5, dof / (dof + t * t));
    if t < 0.0 {
        tail
    } else {
        1.0 - tail
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TTestResult {
    pub n: usize,
    pub mean: f64,
    pub std_dev: f64,
    pub t_statistic: f64,
    pub dof: usize,
    pub p_value: f64,
    pub alpha: f64,
    pub bonferroni_alpha: f64,
    pub reject_null: bool,
}

/// One-sample t-test of `H0: mean >= rho0` against `H1: mean < rho0`, with
/// the unbiased sample standard deviation.
pub fn left_tailed_t_test(values: &[f64], rho0: f64, alpha: f64) -> Result<TTestResult> {
    let n = values.len();
    if n < 2 {
        return Err(Error::DegenerateSample(format!(
            "t-test needs at least 2 values, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("t-test input".into()));
    }
    if values.iter().all(|v| *v == values[0]) {
        return Err(Error::DegenerateSample("all values are identical".into()));
    }
    // Summing in sorted order makes the result independent of input order.
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let mean = sorted.iter().sum::<f64>() / nf;
    let var = sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0);
    let std_dev = var.sqrt();
    let t = (mean - rho0) / (std_dev / nf.sqrt());
    let p = student_t_cdf(t, (n - 1) as f64);
    Ok(TTestResult {
        n,
        mean,
        std_dev,
        t_statistic: t,
        dof: n - 1,
        p_value: p,
        alpha,
        bonferroni_alpha: alpha,
        reject_null: p < alpha,
    })
}

/// Recompute every rejection against `alpha / m` for `m` simultaneous tests.
pub fn bonferroni_adjust(results: &[TTestResult], alpha: f64) -> Vec<TTestResult> {
    let threshold = alpha / results.len().max(1) as f64;
    results
        .iter()
        .map(|r| TTestResult {
            alpha,
            bonferroni_alpha: threshold,
            reject_null: r.p_value < threshold,
            ..*r
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Bandwidth {
    /// `0.9 · min(s, IQR/1.34) · n^(-1/5)`.
    #[default]
    Silverman,
    Fixed(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct KdeCurve {
    pub bandwidth: f64,
    pub x: Vec<f64>,
    pub density: Vec<f64>,
}

impl KdeCurve {
    pub fn area(&self) -> f64 {
        self.x
            .windows(2)
            .zip(self.density.windows(2))
            .map(|(x, y)| 0.5 * (x[1] - x[0]) * (y[0] + y[1]))
            .sum()
    }

    /// Grid point of highest density.
    pub fn mode(&self) -> f64 {
        let (i, _) = self
            .density
            .iter()
            .enumerate()
            .fold((0, f64::MIN), |best, (i, &d)| if d > best.1 { (i, d) } else { best });
        self.x[i]
    }
}

fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    let pos = q * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    sorted[lo] + (sorted[hi] - sorted[lo]) * (pos - lo as f64)
}

pub fn silverman_bandwidth(values: &[f64]) -> f64 {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let sd = (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let iqr = quantile_sorted(&sorted, 0.75) - quantile_sorted(&sorted, 0.25);
    let spread = if iqr > 0.0 { sd.min(iqr / 1.34) } else { sd };
    0.9 * spread * n.powf(-0.2)
}

/// Gaussian kernel density on `points` grid points spanning
/// `[min - 3h, max + 3h]`. The mass of the kernels outside that window is
/// cut off and the sampled curve rescaled to unit trapezoid area.
pub fn kde_density(values: &[f64], bandwidth: Bandwidth, points: usize) -> Result<KdeCurve> {
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("kde input".into()));
    }
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.len() < 2 || lo == hi {
        return Err(Error::DegenerateSample("kde needs at least two distinct values".into()));
    }
    if points < 2 {
        return Err(Error::InvalidArgument("kde grid needs at least 2 points".into()));
    }
    let h = match bandwidth {
        Bandwidth::Silverman => silverman_bandwidth(values),
        Bandwidth::Fixed(h) if h > 0.0 => h,
        Bandwidth::Fixed(h) => return Err(Error::InvalidArgument(format!("bandwidth {h} must be positive"))),
    };
    let (a, b) = (lo - 3.0 * h, hi + 3.0 * h);
    let step = (b - a) / (points - 1) as f64;
    let norm = 1.0 / (values.len() as f64 * h * (2.0 * std::f64::consts::PI).sqrt());
    let x: Vec<f64> = (0..points).map(|i| a + step * i as f64).collect();
    let density: Vec<f64> = x
        .iter()
        .map(|&xi| {
            norm * values
                .iter()
                .map(|v| (-0.5 * ((xi - v) / h).powi(2)).exp())
                .sum::<f64>()
        })
        .collect();
    let mut curve = KdeCurve {
        bandwidth: h,
        x,
        density,
    };
    let area = curve.area();
    curve.density.iter_mut().for_each(|d| *d /= area);
    Ok(curve)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalityDiagnostics {
    /// `(value, rank / n)` in ascending order.
    pub ecdf: Vec<(f64, f64)>,
    /// `(standard normal quantile at (i - 0.5)/n, i-th smallest value)`.
    pub qq: Vec<(f64, f64)>,
    /// Largest distance of the z-scored sample quantiles from the identity line.
    pub max_qq_deviation: f64,
}

pub fn normality_diagnostics(values: &[f64]) -> Result<NormalityDiagnostics> {
    let n = values.len();
    if n < 3 {
        return Err(Error::DegenerateSample(format!(
            "normality diagnostics need at least 3 values, got {n}"
        )));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("normality diagnostics input".into()));
    }
    let mut sorted = values.to_vec();
    sorted.sort_by(f64::total_cmp);
    let nf = n as f64;
    let std_normal = Normal::standard();
    let ecdf = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (v, (i + 1) as f64 / nf))
        .collect();
    let qq: Vec<(f64, f64)> = sorted
        .iter()
        .enumerate()
        .map(|(i, &v)| (std_normal.inverse_cdf((i as f64 + 0.5) / nf), v))
        .collect();
    let mean = sorted.iter().sum::<f64>() / nf;
    let sd = (sorted.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (nf - 1.0)).sqrt();
    let max_qq_deviation = if sd > 0.0 {
        qq.iter().map(|(q, v)| ((v - mean) / sd - q).abs()).fold(0.0, f64::max)
    } else {
        f64::NAN
    };
    Ok(NormalityDiagnostics {
        ecdf,
        qq,
        max_qq_deviation,
    })
}

//! Standardized decorrelation objective.
//!
//! Raw pooled embeddings `z~` (N samples x D dimensions) of the two views go
//! through two per-dimension preprocessing steps before the loss:
//!
//! 1. each column is divided by its Euclidean norm over the batch;
//! 2. each column is centered on its batch mean and divided by its batch
//!    standard deviation (population `1/N` by default).
//!
//! With `C = Zᵀ Z'` the loss is
//! `L = (1/N) Σ_i [ Σ_{j≠i} C_ij² + (C_ii − 1)² ]`.
//!
//! All arithmetic is `f64`. Gradients are derived by hand; the test suite
//! checks them against central finite differences.

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Matrix = DMatrix<f64>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StdDenominator {
    /// `1/N`, as in the standardization step.
    #[default]
    Population,
    /// `1/(N-1)`.
    Unbiased,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum LossVariant {
    /// `C = Zᵀ Z'` exactly. After standardization `C_ii = N · corr_i`, so the
    /// diagonal target of 1 corresponds to a cross-view correlation of `1/N`.
    #[default]
    Literal,
    /// `C = Zᵀ Z' / N`: the diagonal target is a cross-view correlation of 1.
    Scaled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Added inside the square roots of both normalization steps.
    pub eps: f64,
    /// Columns whose norm (step 1) or spread (step 2) falls below this are
    /// rejected as degenerate.
    pub degenerate_tol: f64,
    pub std_denominator: StdDenominator,
    pub variant: LossVariant,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            eps: 1e-8,
            degenerate_tol: 1e-12,
            std_denominator: StdDenominator::Population,
            variant: LossVariant::Literal,
        }
    }
}

impl LossConfig {
    /// The normalization equations with nothing added under the roots.
    pub fn exact() -> Self {
        LossConfig {
            eps: 0.0,
            ..Default::default()
        }
    }
}

fn check_batch(z: &Matrix) -> Result<()> {
    if z.nrows() < 2 {
        return Err(Error::InvalidArgument(format!(
            "normalization over the batch needs N >= 2, got {}",
            z.nrows()
        )));
    }
    Ok(())
}

fn check_finite(z: &Matrix, what: &str) -> Result<()> {
    if z.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(what.to_string()))
    }
}

/// Step 1: divide each column by its Euclidean norm over the batch.
pub fn l2_normalize_dims(z: &Matrix, cfg: &LossConfig) -> Result<Matrix> {
    Ok(l2_forward(z, cfg)?.0)
}

fn l2_forward(z: &Matrix, cfg: &LossConfig) -> Result<(Matrix, Vec<f64>)> {
    check_batch(z)?;
    let mut out = z.clone();
    let mut norms = Vec::with_capacity(z.ncols());
    for (i, mut col) in out.column_iter_mut().enumerate() {
        let ss = col.norm_squared();
        if ss.sqrt() < cfg.degenerate_tol {
            return Err(Error::DegenerateDimension {
                dim: i,
                reason: "zero norm over the batch",
            });
        }
        let r = (ss + cfg.eps).sqrt();
        col /= r;
        norms.push(r);
    }
    Ok((out, norms))
}

/// Step 2: per column, subtract the batch mean and divide by the batch
/// standard deviation.
pub fn standardize_dims(z: &Matrix, cfg: &LossConfig) -> Result<Matrix> {
    Ok(standardize_forward(z, cfg)?.0)
}

fn denominator(n: usize, d: StdDenominator) -> f64 {
    match d {
        StdDenominator::Population => n as f64,
        StdDenominator::Unbiased => (n - 1) as f64,
    }
}

fn standardize_forward(z: &Matrix, cfg: &LossConfig) -> Result<(Matrix, Vec<f64>)> {
    check_batch(z)?;
    let n = z.nrows();
    let denom = denominator(n, cfg.std_denominator);
    let mut out = z.clone();
    let mut sigmas = Vec::with_capacity(z.ncols());
    for (i, mut col) in out.column_iter_mut().enumerate() {
        let mean = col.sum() / n as f64;
        col.add_scalar_mut(-mean);
        let var = col.norm_squared() / denom;
        let scale = col.amax().max(mean.abs()).max(1.0);
        if var.sqrt() <= cfg.degenerate_tol * scale {
            return Err(Error::DegenerateDimension {
                dim: i,
                reason: "constant over the batch",
            });
        }
        let sigma = (var + cfg.eps).sqrt();
        col /= sigma;
        sigmas.push(sigma);
    }
    Ok((out, sigmas))
}

/// `C_ij = Σ_k z_k^i z'_k^j`.
pub fn cross_correlation(z: &Matrix, z_prime: &Matrix) -> Result<Matrix> {
    if z.shape() != z_prime.shape() {
        return Err(Error::shape(
            format!("{:?}", z.shape()),
            format!("{:?}", z_prime.shape()),
        ));
    }
    Ok(z.tr_mul(z_prime))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LossBreakdown {
    pub total: f64,
    /// `(1/N) Σ_i (C_ii − 1)²`
    pub on_diagonal: f64,
    /// `(1/N) Σ_{i≠j} C_ij²`
    pub off_diagonal: f64,
}

fn effective_c(z: &Matrix, z_prime: &Matrix, variant: LossVariant) -> Result<Matrix> {
    let c = cross_correlation(z, z_prime)?;
    Ok(match variant {
        LossVariant::Literal => c,
        LossVariant::Scaled => c / z.nrows() as f64,
    })
}

fn breakdown_of(c: &Matrix, n: usize) -> LossBreakdown {
    let d = c.nrows();
    let (mut on, mut off) = (0.0, 0.0);
    for j in 0..d {
        for i in 0..d {
            let v = c[(i, j)];
            if i == j {
                on += (v - 1.0) * (v - 1.0);
            } else {
                off += v * v;
            }
        }
    }
    let n = n as f64;
    LossBreakdown {
        total: (on + off) / n,
        on_diagonal: on / n,
        off_diagonal: off / n,
    }
}

/// The decorrelation loss on embeddings that have already been through
/// both normalization steps.
pub fn decorrelation_loss(z: &Matrix, z_prime: &Matrix, variant: LossVariant) -> Result<LossBreakdown> {
    check_finite(z, "first view embeddings")?;
    check_finite(z_prime, "second view embeddings")?;
    let c = effective_c(z, z_prime, variant)?;
    Ok(breakdown_of(&c, z.nrows()))
}

/// Loss, the (variant-adjusted) cross-correlation matrix and the gradients
/// with respect to the raw embeddings of each view.
#[derive(Debug, Clone)]
pub struct PairLoss {
    pub loss: LossBreakdown,
    pub c: Matrix,
    pub grad_a: Matrix,
    pub grad_b: Matrix,
}

impl PairLoss {
    pub fn mean_diagonal(&self) -> f64 {
        self.c.diagonal().mean()
    }

    pub fn mean_abs_off_diagonal(&self) -> f64 {
        let d = self.c.nrows();
        if d < 2 {
            return 0.0;
        }
        let total: f64 = self.c.iter().map(|v| v.abs()).sum();
        let diag: f64 = self.c.diagonal().iter().map(|v| v.abs()).sum();
        (total - diag) / (d * (d - 1)) as f64
    }
}

/// Backward of step 2 for one column: `dx = (g − mean(g) − z·Σ(g z)/denom) / σ`.
fn standardize_backward(grad: &Matrix, z: &Matrix, sigmas: &[f64], denom: f64) -> Matrix {
    let n = grad.nrows() as f64;
    let mut out = grad.clone();
    for (i, mut col) in out.column_iter_mut().enumerate() {
        let zc = z.column(i);
        let g_mean = col.sum() / n;
        let gz = col.dot(&zc) / denom;
        for (g, zv) in col.iter_mut().zip(zc.iter()) {
            *g = (*g - g_mean - zv * gz) / sigmas[i];
        }
    }
    out
}

/// Backward of step 1 for one column: `dx = (g − y·Σ(g y)) / r`.
fn l2_backward(grad: &Matrix, y: &Matrix, norms: &[f64]) -> Matrix {
    let mut out = grad.clone();
    for (i, mut col) in out.column_iter_mut().enumerate() {
        let yc = y.column(i);
        let gy = col.dot(&yc);
        for (g, yv) in col.iter_mut().zip(yc.iter()) {
            *g = (*g - yv * gy) / norms[i];
        }
    }
    out
}

/// Full forward/backward from raw embeddings: step 1, step 2, loss.
pub fn loss_and_grad(raw_a: &Matrix, raw_b: &Matrix, cfg: &LossConfig) -> Result<PairLoss> {
    if raw_a.shape() != raw_b.shape() {
        return Err(Error::shape(
            format!("{:?}", raw_a.shape()),
            format!("{:?}", raw_b.shape()),
        ));
    }
    check_finite(raw_a, "first view embeddings")?;
    check_finite(raw_b, "second view embeddings")?;
    let n = raw_a.nrows();

    let (ya, norms_a) = l2_forward(raw_a, cfg)?;
    let (yb, norms_b) = l2_forward(raw_b, cfg)?;
    let (za, sig_a) = standardize_forward(&ya, cfg)?;
    let (zb, sig_b) = standardize_forward(&yb, cfg)?;

    let c = effective_c(&za, &zb, cfg.variant)?;
    let loss = breakdown_of(&c, n);
    if !loss.total.is_finite() {
        return Err(Error::NonFinite("loss".into()));
    }

    // dL/dC = (2/N)(C − I), then chain through the optional 1/N scaling.
    let mut g = c.clone();
    for i in 0..g.nrows() {
        g[(i, i)] -= 1.0;
    }
    let mut scale = 2.0 / n as f64;
    if cfg.variant == LossVariant::Scaled {
        scale /= n as f64;
    }
    g *= scale;

    let dza = &zb * g.transpose();
    let dzb = &za * &g;

    let denom = denominator(n, cfg.std_denominator);
    let dya = standardize_backward(&dza, &za, &sig_a, denom);
    let dyb = standardize_backward(&dzb, &zb, &sig_b, denom);
    let grad_a = l2_backward(&dya, &ya, &norms_a);
    let grad_b = l2_backward(&dyb, &yb, &norms_b);

    Ok(PairLoss {
        loss,
        c,
        grad_a,
        grad_b,
    })
}

/// Row-major `f32` buffer to an `f64` matrix.
pub fn matrix_from_rows(rows: usize, cols: usize, data: &[f32]) -> Matrix {
    assert_eq!(data.len(), rows * cols);
    Matrix::from_fn(rows, cols, |r, c| f64::from(data[r * cols + c]))
}

/// `f64` matrix to a row-major `f32` buffer.
pub fn matrix_to_rows(m: &Matrix) -> Vec<f32> {
    let mut out = Vec::with_capacity(m.len());
    for r in 0..m.nrows() {
        out.extend(m.row(r).iter().map(|&v| v as f32));
    }
    out
}

/// Tab-separated dump: one `# total on_diagonal off_diagonal` line, then the
/// rows of `C`.
pub fn write_correlation_dump(path: &Path, c: &Matrix, loss: &LossBreakdown) -> Result<()> {
    let mut s = String::new();
    let _ = writeln!(s, "# total\ton_diagonal\toff_diagonal");
    let _ = writeln!(s, "# {}\t{}\t{}", loss.total, loss.on_diagonal, loss.off_diagonal);
    for r in 0..c.nrows() {
        let row: Vec<String> = c.row(r).iter().map(|v| format!("{v:.9e}")).collect();
        s.push_str(&row.join("\t"));
        s.push('\n');
    }
    std::fs::write(path, s)?;
    Ok(())
}

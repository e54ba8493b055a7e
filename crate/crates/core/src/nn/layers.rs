use rand::Rng;

use super::param::{Param, ParamKind};
use super::tensor::{gemm, Tensor};
use super::{Layer, Mode};
use crate::error::{Error, Result};

/// Batch normalization over the trailing (channel) dimension.
///
/// In training mode the leading dimension is split into `mode.groups`
/// contiguous groups and each group is normalized with its own statistics,
/// which is what running the layer separately on each group would give.
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: Param,
    pub beta: Param,
    pub running_mean: Param,
    pub running_var: Param,
    pub eps: f32,
    pub momentum: f32,
    cache: Option<BnCache>,
}

#[derive(Debug, Clone)]
struct BnCache {
    xhat: Vec<f32>,
    /// One `1/σ` vector per group (a single one in eval mode).
    inv_std: Vec<Vec<f32>>,
    groups: usize,
    train: bool,
}

impl BatchNorm {
    pub fn new(channels: usize) -> Self {
        BatchNorm {
            gamma: Param::filled(&[channels], 1.0, ParamKind::Trainable),
            beta: Param::filled(&[channels], 0.0, ParamKind::Trainable),
            running_mean: Param::filled(&[channels], 0.0, ParamKind::Buffer),
            running_var: Param::filled(&[channels], 1.0, ParamKind::Buffer),
            eps: 1e-5,
            momentum: 0.1,
            cache: None,
        }
    }

    fn channels(&self) -> usize {
        self.gamma.value.len()
    }
}

impl Layer for BatchNorm {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let c = self.channels();
        if x.last_dim() != c {
            return Err(Error::shape(format!("{c} channels"), format!("{:?}", x.shape)));
        }
        let groups = if mode.train { mode.groups.max(1) } else { 1 };
        if !x.dim(0).is_multiple_of(groups) {
            return Err(Error::shape(format!("batch divisible into {groups} groups"), x.dim(0)));
        }
        let rows = x.numel() / c;
        let rows_per_group = rows / groups;
        if mode.train && rows_per_group < 2 {
            return Err(Error::InvalidArgument(
                "batch norm in training mode needs at least 2 rows per group".into(),
            ));
        }
        let mut out = Tensor::zeros(&x.shape);
        let mut inv_stds = Vec::with_capacity(groups);
        for gi in 0..groups {
            let span = gi * rows_per_group * c..(gi + 1) * rows_per_group * c;
            let xs = &x.data[span.clone()];
            let (mean, inv_std) = if mode.train {
                let mut mean = vec![0.0f64; c];
                for row in xs.chunks_exact(c) {
                    for (m, v) in mean.iter_mut().zip(row) {
                        *m += f64::from(*v);
                    }
                }
                let nr = rows_per_group as f64;
                mean.iter_mut().for_each(|m| *m /= nr);
                let mut var = vec![0.0f64; c];
                for row in xs.chunks_exact(c) {
                    for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                        let d = f64::from(*v) - m;
                        *s += d * d;
                    }
                }
                var.iter_mut().for_each(|v| *v /= nr);
                let unbias = nr / (nr - 1.0);
                for ch in 0..c {
                    let rm = &mut self.running_mean.value[ch];
                    *rm = (1.0 - self.momentum) * *rm + self.momentum * mean[ch] as f32;
                    let rv = &mut self.running_var.value[ch];
                    *rv = (1.0 - self.momentum) * *rv + self.momentum * (var[ch] * unbias) as f32;
                }
                let inv: Vec<f32> = var
                    .iter()
                    .map(|v| (1.0 / (v + f64::from(self.eps)).sqrt()) as f32)
                    .collect();
                (mean.iter().map(|&m| m as f32).collect::<Vec<f32>>(), inv)
            } else {
                let inv = self
                    .running_var
                    .value
                    .iter()
                    .map(|v| 1.0 / (v + self.eps).sqrt())
                    .collect();
                (self.running_mean.value.clone(), inv)
            };
            for (xr, orow) in xs.chunks_exact(c).zip(out.data[span].chunks_exact_mut(c)) {
                for ch in 0..c {
                    orow[ch] = (xr[ch] - mean[ch]) * inv_std[ch];
                }
            }
            inv_stds.push(inv_std);
        }
        let xhat = if mode.record { Some(out.data.clone()) } else { None };
        for orow in out.data.chunks_exact_mut(c) {
            for ch in 0..c {
                orow[ch] = orow[ch] * self.gamma.value[ch] + self.beta.value[ch];
            }
        }
        if let Some(xhat) = xhat {
            self.cache = Some(BnCache {
                xhat,
                inv_std: inv_stds,
                groups,
                train: mode.train,
            });
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let cache = self.cache.take().expect("batch norm backward without recorded forward");
        let c = self.channels();
        let rows = grad.numel() / c;
        let rpg = rows / cache.groups;
        let mut dx = Tensor::zeros(&grad.shape);
        for gi in 0..cache.groups {
            let span = gi * rpg * c..(gi + 1) * rpg * c;
            let g = &grad.data[span.clone()];
            let xh = &cache.xhat[span.clone()];
            let mut sum_g = vec![0.0f64; c];
            let mut sum_gx = vec![0.0f64; c];
            for (gr, xr) in g.chunks_exact(c).zip(xh.chunks_exact(c)) {
                for ch in 0..c {
                    sum_g[ch] += f64::from(gr[ch]);
                    sum_gx[ch] += f64::from(gr[ch]) * f64::from(xr[ch]);
                }
            }
            for ch in 0..c {
                self.gamma.grad[ch] += sum_gx[ch] as f32;
                self.beta.grad[ch] += sum_g[ch] as f32;
            }
            let inv = &cache.inv_std[gi];
            let m = rpg as f32;
            for ((gr, xr), dr) in g
                .chunks_exact(c)
                .zip(xh.chunks_exact(c))
                .zip(dx.data[span].chunks_exact_mut(c))
            {
                for ch in 0..c {
                    let scale = self.gamma.value[ch] * inv[ch];
                    dr[ch] = if cache.train {
                        scale * (gr[ch] - sum_g[ch] as f32 / m - xr[ch] * sum_gx[ch] as f32 / m)
                    } else {
                        scale * gr[ch]
                    };
                }
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}gamma"), &mut self.gamma);
        f(&format!("{prefix}beta"), &mut self.beta);
        f(&format!("{prefix}running_mean"), &mut self.running_mean);
        f(&format!("{prefix}running_var"), &mut self.running_var);
    }
}

/// Affine map over the trailing dimension; weight is `in x out`.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: Param,
    pub bias: Option<Param>,
    pub input_grad: bool,
    cache: Option<Tensor>,
}

impl Linear {
    /// Uniform `±1/sqrt(in)` initialization.
    pub fn new<R: Rng>(input: usize, output: usize, bias: bool, rng: &mut R) -> Self {
        let bound = 1.0 / (input as f32).sqrt();
        let weight = Param::uniform(&[input, output], bound, rng);
        let bias = bias.then(|| Param::uniform(&[output], bound, rng));
        Linear {
            weight,
            bias,
            input_grad: true,
            cache: None,
        }
    }

    /// Identity weight (square only) and zero bias.
    pub fn identity(dim: usize, bias: bool) -> Self {
        let mut w = vec![0.0; dim * dim];
        for i in 0..dim {
            w[i * dim + i] = 1.0;
        }
        Linear {
            weight: Param::new(&[dim, dim], w, ParamKind::Trainable),
            bias: bias.then(|| Param::filled(&[dim], 0.0, ParamKind::Trainable)),
            input_grad: true,
            cache: None,
        }
    }

    pub fn in_features(&self) -> usize {
        self.weight.shape[0]
    }

    pub fn out_features(&self) -> usize {
        self.weight.shape[1]
    }
}

impl Layer for Linear {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let (fi, fo) = (self.in_features(), self.out_features());
        if x.shape.len() != 2 || x.dim(1) != fi {
            return Err(Error::shape(format!("[batch, {fi}]"), format!("{:?}", x.shape)));
        }
        let b = x.dim(0);
        let mut out = Tensor::zeros(&[b, fo]);
        if let Some(bias) = &self.bias {
            for row in out.data.chunks_exact_mut(fo) {
                row.copy_from_slice(&bias.value);
            }
        }
        gemm(
            b,
            fi,
            fo,
            &x.data,
            (fi, 1),
            &self.weight.value,
            (fo, 1),
            1.0,
            &mut out.data,
            (fo, 1),
        );
        if mode.record {
            self.cache = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("linear backward without recorded forward");
        let (fi, fo) = (self.in_features(), self.out_features());
        let b = x.dim(0);
        gemm(
            fi,
            b,
            fo,
            &x.data,
            (1, fi),
            &grad.data,
            (fo, 1),
            1.0,
            &mut self.weight.grad,
            (fo, 1),
        );
        if let Some(bias) = &mut self.bias {
            for row in grad.data.chunks_exact(fo) {
                for (g, v) in bias.grad.iter_mut().zip(row) {
                    *g += *v;
                }
            }
        }
        let mut dx = Tensor::zeros(&x.shape);
        if self.input_grad {
            gemm(
                b,
                fo,
                fi,
                &grad.data,
                (fo, 1),
                &self.weight.value,
                (1, fo),
                0.0,
                &mut dx.data,
                (fi, 1),
            );
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}weight"), &mut self.weight);
        if let Some(b) = &mut self.bias {
            f(&format!("{prefix}bias"), b);
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct Relu {
    mask: Option<Vec<bool>>,
}

impl Relu {
    pub fn new() -> Self {
        Relu::default()
    }
}

impl Layer for Relu {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut out = x.clone();
        out.data.iter_mut().for_each(|v| *v = v.max(0.0));
        if mode.record {
            self.mask = Some(x.data.iter().map(|&v| v > 0.0).collect());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mask = self.mask.take().expect("relu backward without recorded forward");
        let mut dx = grad.clone();
        for (g, m) in dx.data.iter_mut().zip(mask) {
            if !m {
                *g = 0.0;
            }
        }
        dx
    }

    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

/// Mean over the spatial dimensions: `[N, H, W, C] -> [N, C]`.
#[derive(Debug, Clone, Default)]
pub struct GlobalAvgPool {
    shape: Option<Vec<usize>>,
}

impl Layer for GlobalAvgPool {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.expect_rank(4, "NHWC pool input")?;
        let (n, hw, c) = (x.dim(0), x.dim(1) * x.dim(2), x.dim(3));
        let mut out = Tensor::zeros(&[n, c]);
        for b in 0..n {
            let dst = &mut out.data[b * c..(b + 1) * c];
            for px in x.data[b * hw * c..(b + 1) * hw * c].chunks_exact(c) {
                for (d, v) in dst.iter_mut().zip(px) {
                    *d += *v;
                }
            }
            dst.iter_mut().for_each(|d| *d /= hw as f32);
        }
        if mode.record {
            self.shape = Some(x.shape.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let shape = self.shape.take().expect("pool backward without recorded forward");
        let (hw, c) = (shape[1] * shape[2], shape[3]);
        let mut dx = Tensor::zeros(&shape);
        for (b, g) in grad.data.chunks_exact(c).enumerate() {
            for px in dx.data[b * hw * c..(b + 1) * hw * c].chunks_exact_mut(c) {
                for (d, v) in px.iter_mut().zip(g) {
                    *d = *v / hw as f32;
                }
            }
        }
        dx
    }

    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::testing::{check_layer_gradients, check_layer_gradients_mode};
    use rand::SeedableRng;

    #[test]
    fn linear_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        check_layer_gradients(&mut Linear::new(5, 4, true, &mut rng), &[3, 5], 1);
        check_layer_gradients(&mut Linear::new(4, 2, false, &mut rng), &[6, 4], 2);
    }

    #[test]
    fn batchnorm_gradients_train_and_eval() {
        let mut bn = BatchNorm::new(3);
        bn.gamma.value = vec![1.5, 0.5, -1.0];
        bn.beta.value = vec![0.1, 0.2, 0.3];
        check_layer_gradients(&mut bn, &[4, 2, 2, 3], 3);
        check_layer_gradients_mode(&mut bn, &[6, 3], 4, Mode::train().with_groups(2));
        check_layer_gradients_mode(&mut bn, &[5, 3], 5, Mode::eval().recording());
    }

    #[test]
    fn batchnorm_groups_equal_separate_calls() {
        let x = Tensor::new(vec![4, 2], vec![1.0, 5.0, 2.0, 3.0, -1.0, 0.5, 4.0, 2.0]).unwrap();
        let mut joint = BatchNorm::new(2);
        let y = joint.forward(&x, Mode::train().with_groups(2)).unwrap();
        let mut a = BatchNorm::new(2);
        let ya = a.forward(&x.rows(0, 2), Mode::train()).unwrap();
        let yb = a.forward(&x.rows(2, 4), Mode::train()).unwrap();
        assert_eq!(&y.data[..4], &ya.data[..]);
        assert_eq!(&y.data[4..], &yb.data[..]);
        assert_eq!(joint.running_mean.value, a.running_mean.value);
    }

    #[test]
    fn train_mode_output_is_standardized() {
        let x = Tensor::new(vec![4, 1], vec![1.0, 2.0, 3.0, 6.0]).unwrap();
        let y = BatchNorm::new(1).forward(&x, Mode::train()).unwrap();
        let mean: f32 = y.data.iter().sum::<f32>() / 4.0;
        let var: f32 = y.data.iter().map(|v| (v - mean).powi(2)).sum::<f32>() / 4.0;
        assert!(mean.abs() < 1e-6 && (var - 1.0).abs() < 1e-4);
    }

    #[test]
    fn pool_and_relu_gradients() {
        check_layer_gradients(&mut GlobalAvgPool::default(), &[2, 3, 2, 4], 6);
        check_layer_gradients(&mut Relu::new(), &[3, 7], 7);
    }
}

use rand::Rng;

use super::param::Param;
use super::tensor::{gemm, Tensor};
use super::{Layer, Mode};
use crate::error::{Error, Result};

/// Upper bound on im2col rows materialized at once.
const MAX_CHUNK_ROWS: usize = 16 * 1024;

/// 2-D convolution without bias over NHWC input. The weight is stored as a
/// `(kh*kw*cin) x cout` matrix.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: Param,
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    /// Skip the input gradient (first layer of a network).
    pub input_grad: bool,
    cache: Option<Tensor>,
}

#[derive(Clone, Copy)]
struct Geometry {
    h: usize,
    w: usize,
    c: usize,
    ho: usize,
    wo: usize,
    k: usize,
    s: usize,
    p: usize,
}

impl Geometry {
    fn patch_len(&self) -> usize {
        self.k * self.k * self.c
    }

    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.s == 1 && self.p == 0
    }
}

fn im2col(x: &[f32], g: Geometry, img0: usize, imgs: usize, cols: &mut [f32]) {
    let kl = g.patch_len();
    let mut r = 0;
    for n in img0..img0 + imgs {
        let base = n * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &mut cols[r * kl..(r + 1) * kl];
                for ky in 0..g.k {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    let dst = &mut row[ky * g.k * g.c..(ky + 1) * g.k * g.c];
                    if iy < 0 || iy >= g.h as isize {
                        dst.fill(0.0);
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        let d = &mut dst[kx * g.c..(kx + 1) * g.c];
                        if ix < 0 || ix >= g.w as isize {
                            d.fill(0.0);
                        } else {
                            let s = base + (iy as usize * g.w + ix as usize) * g.c;
                            d.copy_from_slice(&x[s..s + g.c]);
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

fn col2im(cols: &[f32], g: Geometry, img0: usize, imgs: usize, dx: &mut [f32]) {
    let kl = g.patch_len();
    let mut r = 0;
    for n in img0..img0 + imgs {
        let base = n * g.h * g.w * g.c;
        for oy in 0..g.ho {
            for ox in 0..g.wo {
                let row = &cols[r * kl..(r + 1) * kl];
                for ky in 0..g.k {
                    let iy = (oy * g.s + ky) as isize - g.p as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    for kx in 0..g.k {
                        let ix = (ox * g.s + kx) as isize - g.p as isize;
                        if ix < 0 || ix >= g.w as isize {
                            continue;
                        }
                        let s = base + (iy as usize * g.w + ix as usize) * g.c;
                        let src = &row[(ky * g.k + kx) * g.c..(ky * g.k + kx + 1) * g.c];
                        for (a, b) in dx[s..s + g.c].iter_mut().zip(src) {
                            *a += *b;
                        }
                    }
                }
                r += 1;
            }
        }
    }
}

impl Conv2d {
    /// He-normal initialization (fan-out, ReLU gain).
    pub fn new<R: Rng>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Self {
        let std = (2.0 / (out_channels * kernel * kernel) as f32).sqrt();
        Conv2d {
            weight: Param::normal(&[kernel * kernel * in_channels, out_channels], std, rng),
            in_channels,
            out_channels,
            kernel,
            stride,
            padding,
            input_grad: true,
            cache: None,
        }
    }

    fn geometry(&self, x: &Tensor) -> Result<Geometry> {
        x.expect_rank(4, "NHWC conv input")?;
        let (h, w, c) = (x.dim(1), x.dim(2), x.dim(3));
        if c != self.in_channels {
            return Err(Error::shape(format!("{} input channels", self.in_channels), c));
        }
        if h + 2 * self.padding < self.kernel || w + 2 * self.padding < self.kernel {
            return Err(Error::shape(
                format!("input of at least {0}x{0}", self.kernel),
                format!("{h}x{w}"),
            ));
        }
        Ok(Geometry {
            h,
            w,
            c,
            ho: (h + 2 * self.padding - self.kernel) / self.stride + 1,
            wo: (w + 2 * self.padding - self.kernel) / self.stride + 1,
            k: self.kernel,
            s: self.stride,
            p: self.padding,
        })
    }

    fn chunk_images(g: Geometry) -> usize {
        (MAX_CHUNK_ROWS / (g.ho * g.wo)).max(1)
    }
}

impl Layer for Conv2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let g = self.geometry(x)?;
        let n = x.dim(0);
        let kl = g.patch_len();
        let co = self.out_channels;
        let per_img = g.ho * g.wo;
        let mut out = Tensor::zeros(&[n, g.ho, g.wo, co]);
        if g.is_pointwise() {
            gemm(
                n * per_img,
                kl,
                co,
                &x.data,
                (kl, 1),
                &self.weight.value,
                (co, 1),
                0.0,
                &mut out.data,
                (co, 1),
            );
        } else {
            let chunk = Self::chunk_images(g);
            let mut cols = vec![0.0; chunk.min(n) * per_img * kl];
            for img0 in (0..n).step_by(chunk) {
                let imgs = chunk.min(n - img0);
                let rows = imgs * per_img;
                im2col(&x.data, g, img0, imgs, &mut cols[..rows * kl]);
                let dst = &mut out.data[img0 * per_img * co..(img0 + imgs) * per_img * co];
                gemm(
                    rows,
                    kl,
                    co,
                    &cols[..rows * kl],
                    (kl, 1),
                    &self.weight.value,
                    (co, 1),
                    0.0,
                    dst,
                    (co, 1),
                );
            }
        }
        if mode.record {
            self.cache = Some(x.clone());
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let x = self.cache.take().expect("conv backward without recorded forward");
        let g = self.geometry(&x).expect("cached input is valid");
        let n = x.dim(0);
        let kl = g.patch_len();
        let co = self.out_channels;
        let per_img = g.ho * g.wo;
        let mut dx = Tensor::zeros(&x.shape);
        if g.is_pointwise() {
            let rows = n * per_img;
            gemm(
                kl,
                rows,
                co,
                &x.data,
                (1, kl),
                &grad.data,
                (co, 1),
                1.0,
                &mut self.weight.grad,
                (co, 1),
            );
            if self.input_grad {
                gemm(
                    rows,
                    co,
                    kl,
                    &grad.data,
                    (co, 1),
                    &self.weight.value,
                    (1, co),
                    0.0,
                    &mut dx.data,
                    (kl, 1),
                );
            }
            return dx;
        }
        let chunk = Self::chunk_images(g);
        let mut cols = vec![0.0; chunk.min(n) * per_img * kl];
        for img0 in (0..n).step_by(chunk) {
            let imgs = chunk.min(n - img0);
            let rows = imgs * per_img;
            let gsl = &grad.data[img0 * per_img * co..(img0 + imgs) * per_img * co];
            im2col(&x.data, g, img0, imgs, &mut cols[..rows * kl]);
            gemm(
                kl,
                rows,
                co,
                &cols[..rows * kl],
                (1, kl),
                gsl,
                (co, 1),
                1.0,
                &mut self.weight.grad,
                (co, 1),
            );
            if self.input_grad {
                gemm(
                    rows,
                    co,
                    kl,
                    gsl,
                    (co, 1),
                    &self.weight.value,
                    (1, co),
                    0.0,
                    &mut cols[..rows * kl],
                    (kl, 1),
                );
                col2im(&cols[..rows * kl], g, img0, imgs, &mut dx.data);
            }
        }
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        f(&format!("{prefix}weight"), &mut self.weight);
    }
}

/// Max pooling over NHWC input.
#[derive(Debug, Clone)]
pub struct MaxPool2d {
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    cache: Option<(Vec<usize>, Vec<usize>)>,
}

impl MaxPool2d {
    pub fn new(kernel: usize, stride: usize, padding: usize) -> Self {
        MaxPool2d {
            kernel,
            stride,
            padding,
            cache: None,
        }
    }
}

impl Layer for MaxPool2d {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.expect_rank(4, "NHWC pool input")?;
        let (n, h, w, c) = (x.dim(0), x.dim(1), x.dim(2), x.dim(3));
        let ho = (h + 2 * self.padding - self.kernel) / self.stride + 1;
        let wo = (w + 2 * self.padding - self.kernel) / self.stride + 1;
        let mut out = Tensor::full(&[n, ho, wo, c], f32::NEG_INFINITY);
        let mut arg = vec![0usize; out.numel()];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    let o = ((b * ho + oy) * wo + ox) * c;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= h as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= w as isize {
                                continue;
                            }
                            let i = ((b * h + iy as usize) * w + ix as usize) * c;
                            for ch in 0..c {
                                if x.data[i + ch] > out.data[o + ch] {
                                    out.data[o + ch] = x.data[i + ch];
                                    arg[o + ch] = i + ch;
                                }
                            }
                        }
                    }
                }
            }
        }
        if mode.record {
            self.cache = Some((x.shape.clone(), arg));
        }
        Ok(out)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let (shape, arg) = self.cache.take().expect("pool backward without recorded forward");
        let mut dx = Tensor::zeros(&shape);
        for (g, &i) in grad.data.iter().zip(&arg) {
            dx.data[i] += *g;
        }
        dx
    }

    fn visit(&mut self, _: &str, _: &mut dyn FnMut(&str, &mut Param)) {}
}

//! A small CPU neural-network engine: NHWC convolutions over
//! `matrixmultiply` GEMM, batch norm, linear layers, residual backbones and
//! Adam. Every layer records what its backward pass needs during `forward`
//! (when `Mode::record` is set) and accumulates parameter gradients in
//! `backward`.

mod backbone;
mod conv;
mod layers;
mod optim;
mod param;
mod tensor;

pub use backbone::{Backbone, BackboneConfig, BlockKind};
pub use conv::{Conv2d, MaxPool2d};
pub use layers::{BatchNorm, GlobalAvgPool, Linear, Relu};
pub use optim::{Adam, AdamConfig};
pub use param::{Param, ParamKind};
pub use tensor::Tensor;

use crate::error::Result;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Mode {
    /// Batch statistics (and running-stat updates) instead of running stats.
    pub train: bool,
    /// Independent batch-norm groups along the leading dimension.
    pub groups: usize,
    /// Keep activations for a subsequent backward pass.
    pub record: bool,
}

impl Mode {
    pub fn train() -> Self {
        Mode {
            train: true,
            groups: 1,
            record: true,
        }
    }

    pub fn eval() -> Self {
        Mode {
            train: false,
            groups: 1,
            record: false,
        }
    }

    pub fn with_groups(mut self, groups: usize) -> Self {
        self.groups = groups;
        self
    }

    pub fn recording(mut self) -> Self {
        self.record = true;
        self
    }
}

pub trait Layer {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor>;

    /// Gradient with respect to the input of the last recorded forward;
    /// parameter gradients are accumulated.
    fn backward(&mut self, grad: &Tensor) -> Tensor;

    /// Visit every parameter and buffer with its dotted name.
    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param));

    fn zero_grad(&mut self) {
        self.visit("", &mut |_, p| p.zero_grad());
    }

    fn num_trainable(&mut self) -> usize {
        let mut n = 0;
        self.visit("", &mut |_, p| {
            if p.is_trainable() {
                n += p.value.len();
            }
        });
        n
    }
}

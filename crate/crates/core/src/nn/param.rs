use rand::Rng;
use rand_distr::{Distribution, Normal, Uniform};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamKind {
    Trainable,
    /// Saved with the model but never touched by the optimizer
    /// (batch-norm running statistics).
    Buffer,
}

/// A named model tensor together with its gradient and Adam moments.
#[derive(Debug, Clone)]
pub struct Param {
    pub shape: Vec<usize>,
    pub value: Vec<f32>,
    pub grad: Vec<f32>,
    pub kind: ParamKind,
    pub(crate) m: Vec<f32>,
    pub(crate) v: Vec<f32>,
}

impl Param {
    pub fn new(shape: &[usize], value: Vec<f32>, kind: ParamKind) -> Self {
        assert_eq!(shape.iter().product::<usize>(), value.len());
        let n = value.len();
        let grad = if kind == ParamKind::Trainable {
            vec![0.0; n]
        } else {
            Vec::new()
        };
        Param {
            shape: shape.to_vec(),
            value,
            grad,
            kind,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn filled(shape: &[usize], v: f32, kind: ParamKind) -> Self {
        Param::new(shape, vec![v; shape.iter().product()], kind)
    }

    pub fn normal<R: Rng>(shape: &[usize], std: f32, rng: &mut R) -> Self {
        let dist = Normal::new(0.0, std).expect("finite std");
        let n = shape.iter().product();
        Param::new(shape, (0..n).map(|_| dist.sample(rng)).collect(), ParamKind::Trainable)
    }

    pub fn uniform<R: Rng>(shape: &[usize], bound: f32, rng: &mut R) -> Self {
        let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
        let n = shape.iter().product();
        Param::new(shape, (0..n).map(|_| dist.sample(rng)).collect(), ParamKind::Trainable)
    }

    pub fn is_trainable(&self) -> bool {
        self.kind == ParamKind::Trainable
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

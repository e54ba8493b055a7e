//! Patch encoder: a shared backbone applied to each 32x32 patch, a two-layer
//! projector applied per patch, and mean pooling over the 8 patches of each
//! word image.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::{Checkpoint, CheckpointKind, CheckpointMeta};
use crate::error::{Error, Result};
use crate::nn::{Backbone, BackboneConfig, BatchNorm, Layer, Linear, Mode, Param, Relu, Tensor};
use crate::preprocess::{PatchBatch, CHANNELS, PATCHES_PER_IMAGE, PATCH_COLS, PATCH_ROWS, PATCH_SIZE};
use crate::seed::{self, streams};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EncoderConfig {
    pub backbone: BackboneConfig,
    pub projector_hidden: usize,
    /// Embedding width `D` fed to the loss.
    pub projector_dim: usize,
    /// Batch norm between the two projector layers.
    pub projector_bn: bool,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        EncoderConfig {
            backbone: BackboneConfig::resnet50(),
            projector_hidden: 2048,
            projector_dim: 2048,
            projector_bn: true,
        }
    }
}

impl EncoderConfig {
    /// Four stride-2 conv blocks ending in `dim` channels, with a `dim`-wide
    /// projector.
    pub fn small(dim: usize) -> Self {
        let w = dim.max(8);
        EncoderConfig {
            backbone: BackboneConfig::convnet(&[w / 8, w / 4, w / 2, w]),
            projector_hidden: 2 * dim,
            projector_dim: dim,
            projector_bn: true,
        }
    }

    /// Width of the backbone output (before the projector).
    pub fn feature_dim(&self) -> usize {
        self.backbone.feature_dim()
    }

    pub fn validate(&self) -> Result<()> {
        self.backbone.validate()?;
        if self.projector_hidden == 0 || self.projector_dim == 0 {
            return Err(Error::Config {
                key: "encoder.projector_dim".into(),
                message: "projector widths must be positive".into(),
            });
        }
        Ok(())
    }
}

/// Anything that maps NCHW patches `[B, 3, 32, 32]` to `[B, F]` features.
pub trait FeatureExtractor: Layer {
    fn feature_dim(&self) -> usize;
}

impl FeatureExtractor for Backbone {
    fn feature_dim(&self) -> usize {
        Backbone::feature_dim(self)
    }
}

/// `Linear → [BatchNorm] → ReLU → Linear`.
#[derive(Debug, Clone)]
pub struct Projector {
    pub fc1: Linear,
    pub bn: Option<BatchNorm>,
    relu: Relu,
    pub fc2: Linear,
}

impl Projector {
    pub fn new<R: Rng>(input: usize, hidden: usize, output: usize, bn: bool, rng: &mut R) -> Self {
        Projector {
            fc1: Linear::new(input, hidden, true, rng),
            bn: bn.then(|| BatchNorm::new(hidden)),
            relu: Relu::new(),
            fc2: Linear::new(hidden, output, true, rng),
        }
    }

    /// Identity weights and zero biases, without normalization.
    pub fn identity(dim: usize) -> Self {
        Projector {
            fc1: Linear::identity(dim, true),
            bn: None,
            relu: Relu::new(),
            fc2: Linear::identity(dim, true),
        }
    }

    pub fn in_features(&self) -> usize {
        self.fc1.in_features()
    }

    pub fn out_features(&self) -> usize {
        self.fc2.out_features()
    }
}

impl Layer for Projector {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = self.fc1.forward(x, mode)?;
        if let Some(bn) = &mut self.bn {
            h = bn.forward(&h, mode)?;
        }
        h = self.relu.forward(&h, mode)?;
        self.fc2.forward(&h, mode)
    }

    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = self.fc2.backward(grad);
        g = self.relu.backward(&g);
        if let Some(bn) = &mut self.bn {
            g = bn.backward(&g);
        }
        self.fc1.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.fc1.visit(&format!("{prefix}fc1."), f);
        if let Some(bn) = &mut self.bn {
            bn.visit(&format!("{prefix}bn."), f);
        }
        self.fc2.visit(&format!("{prefix}fc2."), f);
    }
}

/// Per-patch vectors and their per-image means.
#[derive(Debug, Clone)]
pub struct EncodeOutput {
    /// `[N*8, D]`, patch `p` of image `n` at row `n*8 + p`.
    pub per_patch: Tensor,
    /// `[N, D]`.
    pub pooled: Tensor,
}

/// `[N*8, D]` to `[N, D]`: the per-image rows viewed as a `D x 2 x 4` map and
/// averaged over the two spatial axes.
pub fn pool_patches(per_patch: &Tensor) -> Result<Tensor> {
    if per_patch.shape.len() != 2 || !per_patch.dim(0).is_multiple_of(PATCHES_PER_IMAGE) {
        return Err(Error::shape(
            format!("[N*{PATCHES_PER_IMAGE}, D]"),
            format!("{:?}", per_patch.shape),
        ));
    }
    let (n, d) = (per_patch.dim(0) / PATCHES_PER_IMAGE, per_patch.dim(1));
    let mut out = Tensor::zeros(&[n, d]);
    for img in 0..n {
        let dst = &mut out.data[img * d..(img + 1) * d];
        for p in 0..PATCHES_PER_IMAGE {
            let row = &per_patch.data[(img * PATCHES_PER_IMAGE + p) * d..][..d];
            for (o, v) in dst.iter_mut().zip(row) {
                *o += *v;
            }
        }
        dst.iter_mut().for_each(|v| *v /= (PATCH_ROWS * PATCH_COLS) as f32);
    }
    Ok(out)
}

/// Gradient of `pool_patches`: each patch row receives `grad / 8`.
pub fn unpool_grad(grad: &Tensor) -> Tensor {
    let (n, d) = (grad.dim(0), grad.dim(1));
    let mut out = Tensor::zeros(&[n * PATCHES_PER_IMAGE, d]);
    for (img, g) in grad.data.chunks_exact(d).enumerate() {
        for p in 0..PATCHES_PER_IMAGE {
            let dst = &mut out.data[(img * PATCHES_PER_IMAGE + p) * d..][..d];
            for (o, v) in dst.iter_mut().zip(g) {
                *o = *v / PATCHES_PER_IMAGE as f32;
            }
        }
    }
    out
}

pub fn patches_to_tensor(patches: &PatchBatch) -> Result<Tensor> {
    Tensor::new(patches.shape().to_vec(), patches.data.clone())
}

/// Backbone plus optional projector. Downstream models drop the projector
/// and pool raw backbone features.
#[derive(Debug, Clone)]
pub struct Encoder<B = Backbone> {
    pub config: EncoderConfig,
    pub backbone: B,
    pub projector: Option<Projector>,
}

impl Encoder<Backbone> {
    /// Random initialization from the `init` substream of `seed`.
    pub fn new(config: &EncoderConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = seed::stream(seed, streams::INIT, 0);
        let backbone = Backbone::new(&config.backbone, CHANNELS, &mut rng)?;
        let projector = Projector::new(
            backbone.feature_dim(),
            config.projector_hidden,
            config.projector_dim,
            config.projector_bn,
            &mut rng,
        );
        Ok(Encoder {
            config: config.clone(),
            backbone,
            projector: Some(projector),
        })
    }

    pub fn checkpoint(&mut self, kind: CheckpointKind, epoch: Option<usize>) -> Checkpoint {
        let meta = CheckpointMeta {
            kind,
            encoder: self.config.clone(),
            classes: Vec::new(),
            epoch,
        };
        match &mut self.projector {
            Some(p) => Checkpoint::capture(meta, &mut [("backbone.", &mut self.backbone), ("projector.", p)]),
            None => Checkpoint::capture(meta, &mut [("backbone.", &mut self.backbone)]),
        }
    }

    /// Rebuild from a checkpoint. With `with_projector == false` the projector
    /// is dropped even if the checkpoint carries one.
    pub fn from_checkpoint(ck: &Checkpoint, with_projector: bool) -> Result<Self> {
        let mut enc = Encoder::new(&ck.meta.encoder, 0)?;
        ck.restore("backbone.", &mut enc.backbone)?;
        if with_projector {
            let p = enc.projector.as_mut().expect("fresh encoder has a projector");
            ck.restore("projector.", p)?;
        } else {
            enc.projector = None;
        }
        Ok(enc)
    }
}

impl<B: FeatureExtractor> Encoder<B> {
    pub fn with_backbone(config: EncoderConfig, backbone: B, projector: Option<Projector>) -> Self {
        Encoder {
            config,
            backbone,
            projector,
        }
    }

    pub fn embedding_dim(&self) -> usize {
        match &self.projector {
            Some(p) => p.out_features(),
            None => self.backbone.feature_dim(),
        }
    }

    fn check_patches(&self, patches: &PatchBatch) -> Result<()> {
        let expected = patches.n_patches() * CHANNELS * PATCH_SIZE * PATCH_SIZE;
        if patches.data.len() != expected || patches.n_images == 0 {
            return Err(Error::shape(
                format!("({}*8)x3x32x32 patches", patches.n_images),
                format!("{} values", patches.data.len()),
            ));
        }
        Ok(())
    }

    /// Backbone, projector per patch, then mean over the 8 patches.
    pub fn forward_encode(&mut self, patches: &PatchBatch, mode: Mode) -> Result<EncodeOutput> {
        self.check_patches(patches)?;
        let x = patches_to_tensor(patches)?;
        let feats = self.backbone.forward(&x, mode)?;
        let per_patch = match &mut self.projector {
            Some(p) => p.forward(&feats, mode)?,
            None => feats,
        };
        let pooled = pool_patches(&per_patch)?;
        Ok(EncodeOutput { per_patch, pooled })
    }

    /// Backward from a gradient on the pooled output of the last recorded
    /// `forward_encode`.
    pub fn backward_pooled(&mut self, grad: &Tensor) {
        let mut g = unpool_grad(grad);
        if let Some(p) = &mut self.projector {
            g = p.backward(&g);
        }
        self.backbone.backward(&g);
    }

    /// Projector-free pooled backbone features `[N, F]`.
    pub fn features(&mut self, patches: &PatchBatch, mode: Mode) -> Result<Tensor> {
        self.check_patches(patches)?;
        let x = patches_to_tensor(patches)?;
        let feats = self.backbone.forward(&x, mode)?;
        pool_patches(&feats)
    }

    /// Backward through `features` (backbone parameters only).
    pub fn backward_features(&mut self, grad: &Tensor) {
        self.backbone.backward(&unpool_grad(grad));
    }

    pub fn layers(&mut self) -> Vec<&mut dyn Layer> {
        let mut v: Vec<&mut dyn Layer> = vec![&mut self.backbone];
        if let Some(p) = &mut self.projector {
            v.push(p);
        }
        v
    }
}

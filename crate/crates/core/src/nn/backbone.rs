//! Residual and plain convolutional backbones mapping a batch of NCHW
//! patches to one feature vector per patch.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::conv::{Conv2d, MaxPool2d};
use super::layers::{BatchNorm, GlobalAvgPool, Relu};
use super::param::Param;
use super::tensor::Tensor;
use super::{Layer, Mode};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackboneKind {
    /// Residual network.
    Resnet,
    /// Stack of stride-2 3x3 conv + BN + ReLU blocks.
    Convnet,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BlockKind {
    Basic,
    Bottleneck,
}

impl BlockKind {
    fn expansion(self) -> usize {
        match self {
            BlockKind::Basic => 1,
            BlockKind::Bottleneck => 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub kind: BackboneKind,
    pub block: BlockKind,
    /// Residual blocks per stage (resnet only).
    pub layers: Vec<usize>,
    /// Stage widths; for `convnet` the output channels of each block.
    pub widths: Vec<usize>,
    pub stem_channels: usize,
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 3x3/2 max-pool after the stem.
    pub stem_pool: bool,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        BackboneConfig::resnet50()
    }
}

impl BackboneConfig {
    /// ResNet-50 with a 3x3/64 stem and no stem max-pool, for 32x32 inputs.
    pub fn resnet50() -> Self {
        BackboneConfig {
            kind: BackboneKind::Resnet,
            block: BlockKind::Bottleneck,
            layers: vec![3, 4, 6, 3],
            widths: vec![64, 128, 256, 512],
            stem_channels: 64,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: false,
        }
    }

    /// Plain stride-2 conv blocks with the given output channels.
    pub fn convnet(widths: &[usize]) -> Self {
        BackboneConfig {
            kind: BackboneKind::Convnet,
            widths: widths.to_vec(),
            ..BackboneConfig::resnet50()
        }
    }

    pub fn feature_dim(&self) -> usize {
        let last = self.widths.last().copied().unwrap_or(0);
        match self.kind {
            BackboneKind::Resnet => last * self.block.expansion(),
            BackboneKind::Convnet => last,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| {
            Err(Error::Config {
                key: "encoder.backbone".into(),
                message: m.into(),
            })
        };
        if self.widths.is_empty() || self.widths.contains(&0) {
            return bad("widths must be non-empty and positive");
        }
        if self.kind == BackboneKind::Resnet {
            if self.layers.len() != self.widths.len() {
                return bad("layers and widths must have the same length");
            }
            if self.layers.contains(&0)
                || self.stem_channels == 0
                || self.stem_kernel.is_multiple_of(2)
                || self.stem_stride == 0
            {
                return bad("invalid resnet stem or stage sizes");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct ConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ConvBn {
    fn new<R: Rng>(cin: usize, cout: usize, k: usize, stride: usize, rng: &mut R) -> Self {
        ConvBn {
            conv: Conv2d::new(cin, cout, k, stride, k / 2, rng),
            bn: BatchNorm::new(cout),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let h = self.conv.forward(x, mode)?;
        self.bn.forward(&h, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.bn.backward(g);
        self.conv.backward(&g)
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        self.conv.visit(&format!("{prefix}conv."), f);
        self.bn.visit(&format!("{prefix}bn."), f);
    }
}

/// Residual block: `relu(main(x) + shortcut(x))`.
#[derive(Debug, Clone)]
struct ResidualBlock {
    /// conv-bn stages; ReLU between consecutive ones.
    main: Vec<ConvBn>,
    inner_relu: Vec<Relu>,
    shortcut: Option<ConvBn>,
    out_relu: Relu,
}

impl ResidualBlock {
    fn new<R: Rng>(kind: BlockKind, cin: usize, width: usize, stride: usize, rng: &mut R) -> Self {
        let cout = width * kind.expansion();
        let main = match kind {
            BlockKind::Basic => vec![
                ConvBn::new(cin, width, 3, stride, rng),
                ConvBn::new(width, width, 3, 1, rng),
            ],
            BlockKind::Bottleneck => vec![
                ConvBn::new(cin, width, 1, 1, rng),
                ConvBn::new(width, width, 3, stride, rng),
                ConvBn::new(width, cout, 1, 1, rng),
            ],
        };
        let shortcut = (stride != 1 || cin != cout).then(|| ConvBn::new(cin, cout, 1, stride, rng));
        ResidualBlock {
            inner_relu: (1..main.len()).map(|_| Relu::new()).collect(),
            main,
            shortcut,
            out_relu: Relu::new(),
        }
    }

    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        let mut h = x.clone();
        let last = self.main.len() - 1;
        for (i, stage) in self.main.iter_mut().enumerate() {
            h = stage.forward(&h, mode)?;
            if i < last {
                h = self.inner_relu[i].forward(&h, mode)?;
            }
        }
        match &mut self.shortcut {
            Some(s) => h.add_assign(&s.forward(x, mode)?),
            None => h.add_assign(x),
        }
        self.out_relu.forward(&h, mode)
    }

    fn backward(&mut self, g: &Tensor) -> Tensor {
        let g = self.out_relu.backward(g);
        let mut dx = match &mut self.shortcut {
            Some(s) => s.backward(&g),
            None => g.clone(),
        };
        let mut h = g;
        for i in (0..self.main.len()).rev() {
            if i < self.main.len() - 1 {
                h = self.inner_relu[i].backward(&h);
            }
            h = self.main[i].backward(&h);
        }
        dx.add_assign(&h);
        dx
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        for (i, stage) in self.main.iter_mut().enumerate() {
            stage.visit(&format!("{prefix}main{i}."), f);
        }
        if let Some(s) = &mut self.shortcut {
            s.visit(&format!("{prefix}shortcut."), f);
        }
    }
}

#[derive(Debug, Clone)]
enum Block {
    Residual(ResidualBlock),
    Plain(ConvBn, Relu),
}

/// NCHW patches `[B, 3, H, W]` to features `[B, F]`.
#[derive(Debug, Clone)]
pub struct Backbone {
    config: BackboneConfig,
    stem: Option<(ConvBn, Relu)>,
    stem_pool: Option<MaxPool2d>,
    blocks: Vec<Block>,
    gap: GlobalAvgPool,
}

impl Backbone {
    pub fn new<R: Rng>(config: &BackboneConfig, in_channels: usize, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let mut blocks = Vec::new();
        let (stem, stem_pool) = match config.kind {
            BackboneKind::Resnet => {
                let mut stem = ConvBn::new(
                    in_channels,
                    config.stem_channels,
                    config.stem_kernel,
                    config.stem_stride,
                    rng,
                );
                stem.conv.input_grad = false;
                let mut cin = config.stem_channels;
                for (stage, (&n, &width)) in config.layers.iter().zip(&config.widths).enumerate() {
                    for b in 0..n {
                        let stride = if stage > 0 && b == 0 { 2 } else { 1 };
                        let block = ResidualBlock::new(config.block, cin, width, stride, rng);
                        cin = width * config.block.expansion();
                        blocks.push(Block::Residual(block));
                    }
                }
                (
                    Some((stem, Relu::new())),
                    config.stem_pool.then(|| MaxPool2d::new(3, 2, 1)),
                )
            }
            BackboneKind::Convnet => {
                let mut cin = in_channels;
                for (i, &w) in config.widths.iter().enumerate() {
                    let mut cb = ConvBn::new(cin, w, 3, 2, rng);
                    if i == 0 {
                        cb.conv.input_grad = false;
                    }
                    blocks.push(Block::Plain(cb, Relu::new()));
                    cin = w;
                }
                (None, None)
            }
        };
        Ok(Backbone {
            config: config.clone(),
            stem,
            stem_pool,
            blocks,
            gap: GlobalAvgPool::default(),
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim()
    }
}

impl Layer for Backbone {
    fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
        x.expect_rank(4, "NCHW patch batch")?;
        let mut h = x.nchw_to_nhwc();
        if let Some((cb, relu)) = &mut self.stem {
            h = cb.forward(&h, mode)?;
            h = relu.forward(&h, mode)?;
        }
        if let Some(p) = &mut self.stem_pool {
            h = p.forward(&h, mode)?;
        }
        for b in &mut self.blocks {
            h = match b {
                Block::Residual(r) => r.forward(&h, mode)?,
                Block::Plain(cb, relu) => {
                    let t = cb.forward(&h, mode)?;
                    relu.forward(&t, mode)?
                }
            };
        }
        self.gap.forward(&h, mode)
    }

    /// Returns the gradient in NHWC layout; the first convolution skips the
    /// input gradient, so it is all zeros.
    fn backward(&mut self, grad: &Tensor) -> Tensor {
        let mut g = self.gap.backward(grad);
        for b in self.blocks.iter_mut().rev() {
            g = match b {
                Block::Residual(r) => r.backward(&g),
                Block::Plain(cb, relu) => {
                    let t = relu.backward(&g);
                    cb.backward(&t)
                }
            };
        }
        if let Some(p) = &mut self.stem_pool {
            g = p.backward(&g);
        }
        if let Some((cb, relu)) = &mut self.stem {
            g = relu.backward(&g);
            g = cb.backward(&g);
        }
        g
    }

    fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
        if let Some((cb, _)) = &mut self.stem {
            cb.visit(&format!("{prefix}stem."), f);
        }
        for (i, b) in self.blocks.iter_mut().enumerate() {
            let p = format!("{prefix}block{i}.");
            match b {
                Block::Residual(r) => r.visit(&p, f),
                Block::Plain(cb, _) => cb.visit(&p, f),
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn tiny_resnet(block: BlockKind) -> BackboneConfig {
        BackboneConfig {
            kind: BackboneKind::Resnet,
            block,
            layers: vec![1, 1],
            widths: vec![2, 3],
            stem_channels: 4,
            stem_kernel: 3,
            stem_stride: 1,
            stem_pool: true,
        }
    }

    #[test]
    fn feature_dims() {
        assert_eq!(BackboneConfig::resnet50().feature_dim(), 2048);
        assert_eq!(BackboneConfig::convnet(&[8, 16, 128]).feature_dim(), 128);
        assert_eq!(tiny_resnet(BlockKind::Basic).feature_dim(), 3);
        assert_eq!(tiny_resnet(BlockKind::Bottleneck).feature_dim(), 12);
    }

    impl Layer for ResidualBlock {
        fn forward(&mut self, x: &Tensor, mode: Mode) -> Result<Tensor> {
            ResidualBlock::forward(self, x, mode)
        }
        fn backward(&mut self, g: &Tensor) -> Tensor {
            ResidualBlock::backward(self, g)
        }
        fn visit(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param)) {
            ResidualBlock::visit(self, prefix, f)
        }
    }

    #[test]
    fn block_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
        let mut b = ResidualBlock::new(BlockKind::Basic, 3, 3, 1, &mut rng);
        crate::nn::testing::check_directional(&mut b, &[3, 4, 4, 3], 1, true);
        let mut b = ResidualBlock::new(BlockKind::Bottleneck, 3, 2, 2, &mut rng);
        crate::nn::testing::check_directional(&mut b, &[3, 4, 4, 3], 2, true);
    }

    #[test]
    fn residual_gradients() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(9);
        for (i, cfg) in [
            tiny_resnet(BlockKind::Basic),
            tiny_resnet(BlockKind::Bottleneck),
            BackboneConfig::convnet(&[4, 5]),
        ]
        .iter()
        .enumerate()
        {
            let mut net = Backbone::new(cfg, 3, &mut rng).unwrap();
            crate::nn::testing::check_directional(&mut net, &[4, 3, 8, 8], i as u64, false);
        }
    }

    #[test]
    fn resnet50_layout() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
        let mut net = Backbone::new(&BackboneConfig::resnet50(), 3, &mut rng).unwrap();
        let mut names = Vec::new();
        net.visit("", &mut |n, _| names.push(n.to_string()));
        assert_eq!(net.blocks.len(), 16);
        assert!(names.contains(&"stem.conv.weight".to_string()));
        let mut stem_shape = Vec::new();
        net.visit("", &mut |n, p| {
            if n == "stem.conv.weight" {
                stem_shape = p.shape.clone();
            }
        });
        // 3x3 kernel over 3 input channels, 64 output channels.
        assert_eq!(stem_shape, vec![27, 64]);
        assert!(net.stem_pool.is_none());
        // ~23.5M parameters in the convolutional trunk.
        let n = net.num_trainable();
        assert!((23_000_000..24_000_000).contains(&n), "{n}");
    }
}

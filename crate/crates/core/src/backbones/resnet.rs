//! ResNet18 with an optionally slimmed residual block.
//!
//! The slim block holds a single conv + batch-norm:
//! `y = relu(shortcut(x) + BN(Conv3x3(x)))`; the standard basic block holds
//! two. Shape-changing blocks use a strided 1x1 conv + BN shortcut.

use candle_core::{Module, ModuleT, Tensor, D};
use candle_nn::{BatchNorm, Conv2d, Conv2dConfig, VarBuilder};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ResnetSettings {
    pub blocks: [usize; 4],
    pub stem_kernel: usize,
    pub stem_stride: usize,
    /// 2x2 max-pool after the stem.
    pub stem_pool: bool,
    /// One conv+BN per residual block instead of two.
    pub slim: bool,
}

impl Default for ResnetSettings {
    fn default() -> Self {
        Self {
            blocks: [2, 2, 2, 2],
            stem_kernel: 7,
            stem_stride: 2,
            stem_pool: true,
            slim: true,
        }
    }
}

impl ResnetSettings {
    pub(super) fn validate(&self, feature_dim: usize) -> Result<(), String> {
        if feature_dim % 8 != 0 {
            return Err(format!("feature_dim {feature_dim} must be divisible by 8"));
        }
        if self.blocks.iter().any(|&b| b == 0) {
            return Err("every stage needs at least one block".into());
        }
        if self.stem_kernel == 0 || self.stem_stride == 0 {
            return Err("stem kernel and stride must be positive".into());
        }
        Ok(())
    }
}

fn conv(cin: usize, cout: usize, k: usize, stride: usize, vb: VarBuilder) -> candle_core::Result<Conv2d> {
    let cfg = Conv2dConfig {
        padding: k / 2,
        stride,
        ..Default::default()
    };
    candle_nn::conv2d_no_bias(cin, cout, k, cfg, vb)
}

fn bn(c: usize, vb: VarBuilder) -> candle_core::Result<BatchNorm> {
    candle_nn::batch_norm(c, 1e-5, vb)
}

struct Block {
    conv1: Conv2d,
    bn1: BatchNorm,
    // second conv of the standard block
    second: Option<(Conv2d, BatchNorm)>,
    shortcut: Option<(Conv2d, BatchNorm)>,
}

impl Block {
    fn new(cin: usize, cout: usize, stride: usize, slim: bool, vb: VarBuilder) -> candle_core::Result<Self> {
        let second = if slim {
            None
        } else {
            Some((conv(cout, cout, 3, 1, vb.pp("conv2"))?, bn(cout, vb.pp("bn2"))?))
        };
        let shortcut = if stride != 1 || cin != cout {
            Some((conv(cin, cout, 1, stride, vb.pp("down"))?, bn(cout, vb.pp("down_bn"))?))
        } else {
            None
        };
        Ok(Self {
            conv1: conv(cin, cout, 3, stride, vb.pp("conv1"))?,
            bn1: bn(cout, vb.pp("bn1"))?,
            second,
            shortcut,
        })
    }

    fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = self.bn1.forward_t(&self.conv1.forward(x)?, train)?;
        if let Some((c2, b2)) = &self.second {
            h = b2.forward_t(&c2.forward(&h.relu()?)?, train)?;
        }
        let skip = match &self.shortcut {
            Some((c, b)) => b.forward_t(&c.forward(x)?, train)?,
            None => x.clone(),
        };
        (skip + h)?.relu()
    }
}

pub(super) struct Resnet {
    stem: Conv2d,
    stem_bn: BatchNorm,
    stem_pool: bool,
    blocks: Vec<Block>,
}

impl Resnet {
    pub(super) fn new(s: &ResnetSettings, feature_dim: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let widths = [feature_dim / 8, feature_dim / 4, feature_dim / 2, feature_dim];
        let stem_cfg = Conv2dConfig {
            padding: s.stem_kernel / 2,
            stride: s.stem_stride,
            ..Default::default()
        };
        let stem = candle_nn::conv2d_no_bias(1, widths[0], s.stem_kernel, stem_cfg, vb.pp("stem"))?;
        let stem_bn = bn(widths[0], vb.pp("stem_bn"))?;
        let mut blocks = Vec::new();
        let mut cin = widths[0];
        for (stage, (&w, &n)) in widths.iter().zip(s.blocks.iter()).enumerate() {
            for i in 0..n {
                let stride = if stage > 0 && i == 0 { 2 } else { 1 };
                blocks.push(Block::new(cin, w, stride, s.slim, vb.pp(format!("layer{}.{i}", stage + 1)))?);
                cin = w;
            }
        }
        Ok(Self {
            stem,
            stem_bn,
            stem_pool: s.stem_pool,
            blocks,
        })
    }

    pub(super) fn forward(&self, x: &Tensor, train: bool) -> candle_core::Result<Tensor> {
        let mut h = self.stem_bn.forward_t(&self.stem.forward(x)?, train)?.relu()?;
        if self.stem_pool {
            h = h.max_pool2d(2)?;
        }
        for b in &self.blocks {
            h = b.forward(&h, train)?;
        }
        h.mean(D::Minus1)?.mean(D::Minus1)
    }
}

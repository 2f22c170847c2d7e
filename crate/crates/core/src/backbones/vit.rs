//! Vision Transformer: non-overlapping patch embedding, class token,
//! learned positions, pre-norm encoder, class-token output.

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::nn::{layer_norm, LayerNorm, TransformerBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VitSettings {
    pub patch: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for VitSettings {
    fn default() -> Self {
        Self {
            patch: 32,
            depth: 6,
            heads: 8,
            mlp_ratio: 4,
        }
    }
}

impl VitSettings {
    pub(super) fn validate(&self, width: usize, input: usize) -> Result<(), String> {
        if self.patch == 0 || input % self.patch != 0 {
            return Err(format!("patch size {} does not divide input {input}", self.patch));
        }
        if self.depth == 0 || self.heads == 0 || width % self.heads != 0 {
            return Err(format!("width {width} must split over {} heads; depth >= 1", self.heads));
        }
        Ok(())
    }
}

pub(super) struct Vit {
    embed: Conv2d,
    cls: Tensor,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
}

impl Vit {
    pub(super) fn new(s: &VitSettings, width: usize, input: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let grid = input / s.patch;
        let cfg = Conv2dConfig {
            stride: s.patch,
            ..Default::default()
        };
        let init = Init::Randn { mean: 0.0, stdev: 0.02 };
        Ok(Self {
            embed: candle_nn::conv2d(1, width, s.patch, cfg, vb.pp("patch_embed"))?,
            cls: vb.get_with_hints((1, 1, width), "cls_token", init)?,
            pos: vb.get_with_hints((1, grid * grid + 1, width), "pos_embed", init)?,
            blocks: (0..s.depth)
                .map(|i| TransformerBlock::new(width, s.heads, width * s.mlp_ratio, 1, vb.pp(format!("blocks.{i}"))))
                .collect::<candle_core::Result<_>>()?,
            norm: layer_norm(width, vb.pp("norm"))?,
        })
    }

    pub(super) fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let tokens = self.embed.forward(x)?.flatten_from(2)?.transpose(1, 2)?;
        let b = tokens.dim(0)?;
        let cls = self.cls.broadcast_as((b, 1, self.cls.dim(2)?))?;
        let mut h = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            h = blk.forward(&h, None)?;
        }
        self.norm.forward(&h)?.narrow(1, 0, 1)?.squeeze(1)
    }
}

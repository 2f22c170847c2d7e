//! Compact Convolutional Transformer: convolutional tokenizer, transformer
//! encoder, attention-based sequence pooling (no class token).

use candle_core::{Module, Tensor};
use candle_nn::{Conv2d, Conv2dConfig, Init, Linear, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::nn::{layer_norm, linear, LayerNorm, TransformerBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CctSettings {
    pub tokenizer_layers: usize,
    pub kernel: usize,
    pub conv_stride: usize,
    /// Max-pool window (= stride) after each tokenizer conv.
    pub pool: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
}

impl Default for CctSettings {
    fn default() -> Self {
        Self {
            tokenizer_layers: 2,
            kernel: 3,
            conv_stride: 2,
            pool: 2,
            depth: 4,
            heads: 4,
            mlp_ratio: 2,
        }
    }
}

impl CctSettings {
    fn reduction(&self) -> usize {
        (self.conv_stride * self.pool).pow(self.tokenizer_layers as u32)
    }

    pub(super) fn validate(&self, width: usize, input: usize) -> Result<(), String> {
        if self.tokenizer_layers == 0 || self.kernel == 0 || self.conv_stride == 0 || self.pool == 0 {
            return Err("tokenizer sizes must be positive".into());
        }
        if input % self.reduction() != 0 {
            return Err(format!("tokenizer reduction {} does not divide input {input}", self.reduction()));
        }
        if self.depth == 0 || self.heads == 0 || width % self.heads != 0 {
            return Err(format!("width {width} must split over {} heads; depth >= 1", self.heads));
        }
        Ok(())
    }
}

pub(super) struct Cct {
    tokenizer: Vec<Conv2d>,
    pool: usize,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    attention_pool: Linear,
}

impl Cct {
    pub(super) fn new(s: &CctSettings, width: usize, input: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let mut tokenizer = Vec::new();
        let mut cin = 1;
        for i in 0..s.tokenizer_layers {
            let cout = if i + 1 == s.tokenizer_layers { width } else { (width / 2).max(1) };
            let cfg = Conv2dConfig {
                padding: s.kernel / 2,
                stride: s.conv_stride,
                ..Default::default()
            };
            tokenizer.push(candle_nn::conv2d_no_bias(cin, cout, s.kernel, cfg, vb.pp(format!("tokenizer.{i}")))?);
            cin = cout;
        }
        let grid = input / s.reduction();
        Ok(Self {
            tokenizer,
            pool: s.pool,
            pos: vb.get_with_hints((1, grid * grid, width), "pos_embed", Init::Randn { mean: 0.0, stdev: 0.02 })?,
            blocks: (0..s.depth)
                .map(|i| TransformerBlock::new(width, s.heads, width * s.mlp_ratio, 1, vb.pp(format!("blocks.{i}"))))
                .collect::<candle_core::Result<_>>()?,
            norm: layer_norm(width, vb.pp("norm"))?,
            attention_pool: linear(width, 1, vb.pp("attention_pool"))?,
        })
    }

    pub(super) fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mut h = x.clone();
        for conv in &self.tokenizer {
            h = conv.forward(&h)?.relu()?;
            if self.pool > 1 {
                h = h.max_pool2d(self.pool)?;
            }
        }
        let mut h = h.flatten_from(2)?.transpose(1, 2)?.broadcast_add(&self.pos)?;
        for blk in &self.blocks {
            h = blk.forward(&h, None)?;
        }
        let h = self.norm.forward(&h)?;
        // sequence pooling: softmax weights over tokens
        let w = candle_nn::ops::softmax(&self.attention_pool.forward(&h)?, 1)?;
        w.transpose(1, 2)?.contiguous()?.matmul(&h)?.squeeze(1)
    }
}

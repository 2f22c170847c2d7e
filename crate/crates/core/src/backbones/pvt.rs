//! Pyramid Vision Transformer: four stages of strided patch embedding and
//! spatial-reduction attention, mean-pooled at the end.

use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, Init, VarBuilder};
use serde::{Deserialize, Serialize};

use crate::nn::{layer_norm, LayerNorm, TransformerBlock};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PvtSettings {
    pub depths: [usize; 4],
    pub widths: [usize; 4],
    pub heads: [usize; 4],
    pub patch: [usize; 4],
    pub sr_ratios: [usize; 4],
    pub mlp_ratio: usize,
}

impl Default for PvtSettings {
    fn default() -> Self {
        Self {
            depths: [1, 1, 2, 1],
            widths: [32, 64, 128, 256],
            heads: [1, 2, 4, 8],
            patch: [4, 2, 2, 2],
            sr_ratios: [8, 4, 2, 1],
            mlp_ratio: 4,
        }
    }
}

impl PvtSettings {
    pub(super) fn validate(&self, feature_dim: usize, input: usize) -> Result<(), String> {
        if self.widths[3] != feature_dim {
            return Err(format!(
                "last stage width {} must equal feature_dim {feature_dim}",
                self.widths[3]
            ));
        }
        let mut grid = input;
        for i in 0..4 {
            if self.depths[i] == 0 || self.patch[i] == 0 || self.sr_ratios[i] == 0 {
                return Err("depths, patch sizes and reduction ratios must be positive".into());
            }
            if self.heads[i] == 0 || self.widths[i] % self.heads[i] != 0 {
                return Err(format!("stage {i} width does not split over its heads"));
            }
            if grid % self.patch[i] != 0 {
                return Err(format!("stage {i} patch {} does not divide grid {grid}", self.patch[i]));
            }
            grid /= self.patch[i];
            if grid % self.sr_ratios[i] != 0 {
                return Err(format!("stage {i} reduction {} does not divide grid {grid}", self.sr_ratios[i]));
            }
        }
        Ok(())
    }
}

struct Stage {
    embed: Conv2d,
    embed_norm: LayerNorm,
    pos: Tensor,
    blocks: Vec<TransformerBlock>,
    norm: LayerNorm,
    grid: usize,
}

pub(super) struct Pvt {
    stages: Vec<Stage>,
}

impl Pvt {
    pub(super) fn new(s: &PvtSettings, input: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        let mut stages = Vec::new();
        let mut cin = 1;
        let mut grid = input;
        for i in 0..4 {
            let vb = vb.pp(format!("stage{}", i + 1));
            let w = s.widths[i];
            grid /= s.patch[i];
            let cfg = Conv2dConfig {
                stride: s.patch[i],
                ..Default::default()
            };
            stages.push(Stage {
                embed: candle_nn::conv2d(cin, w, s.patch[i], cfg, vb.pp("patch_embed"))?,
                embed_norm: layer_norm(w, vb.pp("patch_norm"))?,
                pos: vb.get_with_hints((1, grid * grid, w), "pos_embed", Init::Randn { mean: 0.0, stdev: 0.02 })?,
                blocks: (0..s.depths[i])
                    .map(|j| {
                        TransformerBlock::new(w, s.heads[i], w * s.mlp_ratio, s.sr_ratios[i], vb.pp(format!("blocks.{j}")))
                    })
                    .collect::<candle_core::Result<_>>()?,
                norm: layer_norm(w, vb.pp("norm"))?,
                grid,
            });
            cin = w;
        }
        Ok(Self { stages })
    }

    pub(super) fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let b = x.dim(0)?;
        let mut img = x.clone();
        let mut tokens = None;
        for st in &self.stages {
            let e = st.embed.forward(&img)?;
            let c = e.dim(1)?;
            let mut h = st.embed_norm.forward(&e.flatten_from(2)?.transpose(1, 2)?)?;
            h = h.broadcast_add(&st.pos)?;
            for blk in &st.blocks {
                h = blk.forward(&h, Some((st.grid, st.grid)))?;
            }
            let h = st.norm.forward(&h)?;
            img = h.transpose(1, 2)?.reshape((b, c, st.grid, st.grid))?;
            tokens = Some(h);
        }
        tokens.expect("four stages").mean(D::Minus2)
    }
}

//! Shared neural-network plumbing on top of `candle`: seeded parameter
//! stores, checkpoints, and the layers used by several models.

mod layers;
mod params;

pub use layers::{
    cross_entropy_per_sample, gelu, layer_norm, linear, positive_probability, Attention,
    LayerNorm, Linear, TransformerBlock,
};
pub use params::{load_checkpoint, save_checkpoint, CheckpointMeta, ParamStore};

/// Training or inference behaviour for normalization layers.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

impl Mode {
    pub fn is_train(self) -> bool {
        self == Mode::Train
    }
}

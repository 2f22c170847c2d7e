use candle_core::{Module, Tensor, D};
use candle_nn::{Conv2d, Conv2dConfig, VarBuilder};

pub use candle_nn::Linear;

pub fn linear(in_dim: usize, out_dim: usize, vb: VarBuilder) -> candle_core::Result<Linear> {
    candle_nn::linear(in_dim, out_dim, vb)
}

pub fn gelu(x: &Tensor) -> candle_core::Result<Tensor> {
    x.gelu_erf()
}

/// Layer normalization over the last dimension, built from differentiable
/// primitives.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    weight: Tensor,
    bias: Tensor,
    eps: f64,
}

pub fn layer_norm(dim: usize, vb: VarBuilder) -> candle_core::Result<LayerNorm> {
    Ok(LayerNorm {
        weight: vb.get_with_hints(dim, "weight", candle_nn::Init::Const(1.0))?,
        bias: vb.get_with_hints(dim, "bias", candle_nn::Init::Const(0.0))?,
        eps: 1e-5,
    })
}

impl Module for LayerNorm {
    fn forward(&self, x: &Tensor) -> candle_core::Result<Tensor> {
        let mean = x.mean_keepdim(D::Minus1)?;
        let centered = x.broadcast_sub(&mean)?;
        let var = centered.sqr()?.mean_keepdim(D::Minus1)?;
        centered
            .broadcast_div(&(var + self.eps)?.sqrt()?)?
            .broadcast_mul(&self.weight)?
            .broadcast_add(&self.bias)
    }
}

/// Spatial reduction of keys/values: a strided convolution over the token
/// grid followed by layer norm.
#[derive(Clone, Debug)]
struct SpatialReduction {
    conv: Conv2d,
    norm: LayerNorm,
}

/// Multi-head scaled dot-product attention with optional spatial reduction
/// of the key/value tokens and an optional additive key bias.
#[derive(Clone, Debug)]
pub struct Attention {
    q: Linear,
    kv: Linear,
    proj: Linear,
    heads: usize,
    head_dim: usize,
    sr: Option<SpatialReduction>,
}

impl Attention {
    pub fn new(dim: usize, heads: usize, vb: VarBuilder) -> candle_core::Result<Self> {
        Self::with_reduction(dim, heads, 1, vb)
    }

    /// `sr_ratio > 1` reduces the key/value grid by that stride.
    pub fn with_reduction(
        dim: usize,
        heads: usize,
        sr_ratio: usize,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        if heads == 0 || dim % heads != 0 {
            candle_core::bail!("attention width {dim} not divisible by {heads} heads");
        }
        let sr = if sr_ratio > 1 {
            let cfg = Conv2dConfig {
                stride: sr_ratio,
                ..Default::default()
            };
            Some(SpatialReduction {
                conv: candle_nn::conv2d(dim, dim, sr_ratio, cfg, vb.pp("sr"))?,
                norm: layer_norm(dim, vb.pp("sr_norm"))?,
            })
        } else {
            None
        };
        Ok(Self {
            q: linear(dim, dim, vb.pp("q"))?,
            kv: linear(dim, 2 * dim, vb.pp("kv"))?,
            proj: linear(dim, dim, vb.pp("proj"))?,
            heads,
            head_dim: dim / heads,
            sr,
        })
    }

    /// `x`: `[B, T, D]`. `grid` gives the `(h, w)` token layout, required
    /// with spatial reduction. `key_bias`: broadcastable to `[B, H, T, Tk]`.
    pub fn forward(
        &self,
        x: &Tensor,
        grid: Option<(usize, usize)>,
        key_bias: Option<&Tensor>,
    ) -> candle_core::Result<Tensor> {
        let (b, t, d) = x.dims3()?;
        let kv_src = match (&self.sr, grid) {
            (Some(sr), Some((h, w))) => {
                let img = x.transpose(1, 2)?.reshape((b, d, h, w))?;
                let red = sr.conv.forward(&img)?;
                let red = red.flatten_from(2)?.transpose(1, 2)?;
                sr.norm.forward(&red)?
            }
            (Some(_), None) => candle_core::bail!("spatial-reduction attention needs a token grid"),
            (None, _) => x.clone(),
        };
        let tk = kv_src.dim(1)?;
        let split = |y: Tensor, len: usize| -> candle_core::Result<Tensor> {
            y.reshape((b, len, self.heads, self.head_dim))?
                .transpose(1, 2)?
                .contiguous()
        };
        let q = split(self.q.forward(x)?, t)?;
        let kv = self.kv.forward(&kv_src)?;
        let k = split(kv.narrow(D::Minus1, 0, d)?, tk)?;
        let v = split(kv.narrow(D::Minus1, d, d)?, tk)?;
        let scale = 1.0 / (self.head_dim as f64).sqrt();
        let mut scores = (q.matmul(&k.t()?)? * scale)?;
        if let Some(bias) = key_bias {
            scores = scores.broadcast_add(bias)?;
        }
        let attn = candle_nn::ops::softmax(&scores, D::Minus1)?;
        let out = attn.matmul(&v)?.transpose(1, 2)?.reshape((b, t, d))?;
        self.proj.forward(&out)
    }
}

/// Pre-norm transformer encoder block with a GELU feed-forward.
#[derive(Clone, Debug)]
pub struct TransformerBlock {
    norm1: LayerNorm,
    attn: Attention,
    norm2: LayerNorm,
    fc1: Linear,
    fc2: Linear,
}

impl TransformerBlock {
    pub fn new(
        dim: usize,
        heads: usize,
        mlp_dim: usize,
        sr_ratio: usize,
        vb: VarBuilder,
    ) -> candle_core::Result<Self> {
        Ok(Self {
            norm1: layer_norm(dim, vb.pp("norm1"))?,
            attn: Attention::with_reduction(dim, heads, sr_ratio, vb.pp("attn"))?,
            norm2: layer_norm(dim, vb.pp("norm2"))?,
            fc1: linear(dim, mlp_dim, vb.pp("fc1"))?,
            fc2: linear(mlp_dim, dim, vb.pp("fc2"))?,
        })
    }

    pub fn forward(&self, x: &Tensor, grid: Option<(usize, usize)>) -> candle_core::Result<Tensor> {
        let x = (x + self.attn.forward(&self.norm1.forward(x)?, grid, None)?)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&self.norm2.forward(&x)?)?)?)?;
        x + h
    }
}

/// Per-sample cross-entropy of `[N, C]` logits against `u32` class ids.
pub fn cross_entropy_per_sample(logits: &Tensor, labels: &Tensor) -> candle_core::Result<Tensor> {
    let logp = candle_nn::ops::log_softmax(logits, D::Minus1)?;
    logp.gather(&labels.unsqueeze(1)?, 1)?.squeeze(1)?.neg()
}

/// Softmax probability of class 1 for `[N, 2]` logits.
pub fn positive_probability(logits: &Tensor) -> candle_core::Result<Tensor> {
    candle_nn::ops::softmax(logits, D::Minus1)?.narrow(1, 1, 1)?.squeeze(1)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use candle_core::{DType, Device};

    #[test]
    fn layer_norm_normalizes_and_backprops() {
        let store = ParamStore::new(DType::F64);
        let ln = layer_norm(4, store.builder(0)).unwrap();
        let x = candle_core::Var::new(&[[1.0f64, 2.0, 3.0, 10.0]], &Device::Cpu).unwrap();
        let y = ln.forward(x.as_tensor()).unwrap();
        let v: Vec<f64> = y.flatten_all().unwrap().to_vec1().unwrap();
        let mean = v.iter().sum::<f64>() / 4.0;
        let var = v.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 4.0;
        assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-4);
        let g = y.sqr().unwrap().sum_all().unwrap().backward().unwrap();
        assert!(g.get(x.as_tensor()).is_some());
    }

    #[test]
    fn cross_entropy_of_uniform_logits_is_ln2() {
        let logits = Tensor::new(&[[0.0f64, 0.0]], &Device::Cpu).unwrap();
        let labels = Tensor::new(&[1u32], &Device::Cpu).unwrap();
        let ce: Vec<f64> = cross_entropy_per_sample(&logits, &labels).unwrap().to_vec1().unwrap();
        assert!((ce[0] - std::f64::consts::LN_2).abs() < 1e-12);
    }

    #[test]
    fn key_bias_masks_keys() {
        let store = ParamStore::new(DType::F64);
        let attn = Attention::new(8, 2, store.builder(1)).unwrap();
        let dev = Device::Cpu;
        let x = Tensor::randn(0f64, 1.0, (1, 3, 8), &dev).unwrap();
        let bias = Tensor::new(&[0.0f64, 0.0, -1e9], &dev).unwrap().reshape((1, 1, 1, 3)).unwrap();
        let a = attn.forward(&x, None, Some(&bias)).unwrap();
        // changing the masked token only changes its own query row
        let mut rows: Vec<Vec<f64>> = x.squeeze(0).unwrap().to_vec2().unwrap();
        rows[2] = vec![5.0; 8];
        let x2 = Tensor::new(rows, &dev).unwrap().unsqueeze(0).unwrap();
        let b = attn.forward(&x2, None, Some(&bias)).unwrap();
        let diff = (a.narrow(1, 0, 2).unwrap() - b.narrow(1, 0, 2).unwrap())
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert_eq!(diff, 0.0);
    }
}

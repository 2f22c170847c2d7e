//! Core-scale classification: per-ROI backbone features are projected to a
//! short token sequence and classified by a small post-norm BERT-style
//! encoder, trained with a γ-weighted mix of core and ROI cross-entropies.

use candle_core::{DType, Device, Module, Tensor};
use candle_nn::{Init, Linear, VarBuilder};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::finetune::{label_tensor, HeadConfig, HeadModel, RoiHead, HEAD_PREFIX};
use crate::nn::{cross_entropy_per_sample, gelu, layer_norm, linear, positive_probability, Attention, LayerNorm, ParamStore};
use crate::seed;
use crate::training::{scalar, LossBreakdown, Schedule, StepLog, Trainer};
use crate::PATCHES_PER_CORE;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MoConfig {
    /// Weight of the core term; `1 - gamma` goes to the ROI term.
    pub gamma: f64,
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    /// Sequence length without the CLS token.
    pub positions: usize,
    pub head: HeadConfig,
}

impl Default for MoConfig {
    fn default() -> Self {
        Self {
            gamma: 0.5,
            layers: 12,
            hidden: 72,
            heads: 8,
            ffn: 288,
            positions: PATCHES_PER_CORE,
            head: HeadConfig::default(),
        }
    }
}

impl MoConfig {
    pub fn validate(&self) -> Result<()> {
        check_gamma(self.gamma)?;
        if self.layers == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden {} must be divisible by {} heads, layers >= 1",
                self.hidden, self.heads
            )));
        }
        if self.ffn == 0 || self.positions == 0 {
            return Err(Error::Config("ffn and positions must be positive".into()));
        }
        Ok(())
    }
}

fn check_gamma(gamma: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&gamma) {
        return Err(Error::Config(format!("gamma must lie in [0, 1], got {gamma}")));
    }
    Ok(())
}

/// Backbone features of one core, unprojected, in needle order.
#[derive(Clone, Debug, PartialEq)]
pub struct CoreSequence {
    pub core_id: String,
    pub feature_dim: usize,
    /// `[positions, feature_dim]`, row-major.
    pub features: Vec<f32>,
    pub validity: Vec<bool>,
    pub label: u8,
}

impl CoreSequence {
    pub fn new(core_id: &str, feature_dim: usize, features: Vec<f32>, validity: Vec<bool>, label: u8) -> Result<Self> {
        if feature_dim == 0 || features.len() != validity.len() * feature_dim {
            return Err(Error::Shape {
                expected: format!("{} x {feature_dim}", validity.len()),
                got: format!("{} values", features.len()),
            });
        }
        if !validity.iter().any(|&v| v) {
            return Err(Error::invalid(format!("core {core_id}: every position is masked")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid(format!("core {core_id}: non-finite feature")));
        }
        if label > 1 {
            return Err(Error::invalid("label must be 0 or 1"));
        }
        Ok(Self {
            core_id: core_id.to_string(),
            feature_dim,
            features,
            validity,
            label,
        })
    }

    /// All positions valid.
    pub fn full(core_id: &str, feature_dim: usize, features: Vec<f32>, label: u8) -> Result<Self> {
        let n = features.len() / feature_dim.max(1);
        Self::new(core_id, feature_dim, features, vec![true; n], label)
    }

    pub fn len(&self) -> usize {
        self.validity.len()
    }

    pub fn is_empty(&self) -> bool {
        self.validity.is_empty()
    }
}

/// Batched inputs: features `[B, T, F]`, mask `[B, T]` (1 valid, 0 masked).
pub struct SequenceBatch {
    pub features: Tensor,
    pub mask: Tensor,
    pub labels: Vec<u8>,
}

impl SequenceBatch {
    pub fn new(cores: &[&CoreSequence], dtype: DType, device: &Device) -> Result<Self> {
        let first = cores.first().ok_or_else(|| Error::invalid("empty core batch"))?;
        let (t, f) = (first.len(), first.feature_dim);
        let mut feats = Vec::with_capacity(cores.len() * t * f);
        let mut mask = Vec::with_capacity(cores.len() * t);
        for c in cores {
            if c.len() != t || c.feature_dim != f {
                return Err(Error::Shape {
                    expected: format!("{t} x {f}"),
                    got: format!("{} x {}", c.len(), c.feature_dim),
                });
            }
            feats.extend_from_slice(&c.features);
            mask.extend(c.validity.iter().map(|&v| if v { 1f32 } else { 0.0 }));
        }
        Ok(Self {
            features: Tensor::from_vec(feats, (cores.len(), t, f), device)?.to_dtype(dtype)?,
            mask: Tensor::from_vec(mask, (cores.len(), t), device)?.to_dtype(dtype)?,
            labels: cores.iter().map(|c| c.label).collect(),
        })
    }
}

pub struct MultiScaleOutput {
    /// `[B, 2]`
    pub core_logits: Tensor,
    /// `[B, T, 2]`
    pub roi_logits: Tensor,
}

/// Single affine map applied row-wise.
pub fn project_features(features: &Tensor, projector: &Linear) -> Result<Tensor> {
    let want = projector.weight().dim(1)?;
    let got = *features.dims().last().unwrap_or(&0);
    if got != want {
        return Err(Error::Shape {
            expected: format!("[.., {want}]"),
            got: format!("{:?}", features.dims()),
        });
    }
    Ok(projector.forward(features)?)
}

struct BertLayer {
    attn: Attention,
    ln1: LayerNorm,
    fc1: Linear,
    fc2: Linear,
    ln2: LayerNorm,
}

impl BertLayer {
    fn new(cfg: &MoConfig, vb: VarBuilder) -> Result<Self> {
        Ok(Self {
            attn: Attention::new(cfg.hidden, cfg.heads, vb.pp("attn"))?,
            ln1: layer_norm(cfg.hidden, vb.pp("ln1"))?,
            fc1: linear(cfg.hidden, cfg.ffn, vb.pp("fc1"))?,
            fc2: linear(cfg.ffn, cfg.hidden, vb.pp("fc2"))?,
            ln2: layer_norm(cfg.hidden, vb.pp("ln2"))?,
        })
    }

    fn forward(&self, x: &Tensor, key_bias: &Tensor) -> Result<Tensor> {
        let x = self.ln1.forward(&(x + self.attn.forward(x, None, Some(key_bias))?)?)?;
        let h = self.fc2.forward(&gelu(&self.fc1.forward(&x)?)?)?;
        Ok(self.ln2.forward(&(x + h)?)?)
    }
}

pub const MODEL_PREFIX: &str = "multiscale";

/// Projector, transformer and ROI head with their parameters.
pub struct MultiScaleModel {
    pub store: ParamStore,
    pub config: MoConfig,
    pub feature_dim: usize,
    projector: Linear,
    cls: Tensor,
    positions: Tensor,
    emb_ln: LayerNorm,
    layers: Vec<BertLayer>,
    pooler: Linear,
    classifier: Linear,
    roi_head: RoiHead,
}

impl MultiScaleModel {
    pub fn new(config: &MoConfig, feature_dim: usize, seed: u64, dtype: DType) -> Result<Self> {
        config.validate()?;
        let store = ParamStore::new(dtype);
        let vb = store.builder(seed::derive(seed, &[seed::label("multiscale")]));
        let tvb = vb.pp(MODEL_PREFIX);
        let small = Init::Randn { mean: 0.0, stdev: 0.02 };
        let layers = (0..config.layers)
            .map(|i| BertLayer::new(config, tvb.pp(format!("layer{i:02}"))))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            projector: linear(feature_dim, config.hidden, tvb.pp("projector"))?,
            cls: tvb.get_with_hints((1, 1, config.hidden), "cls", small)?,
            positions: tvb.get_with_hints((1, config.positions + 1, config.hidden), "positions", small)?,
            emb_ln: layer_norm(config.hidden, tvb.pp("emb_ln"))?,
            layers,
            pooler: linear(config.hidden, config.hidden, tvb.pp("pooler"))?,
            classifier: linear(config.hidden, 2, tvb.pp("classifier"))?,
            roi_head: RoiHead::new(feature_dim, &config.head, vb.pp(HEAD_PREFIX))?,
            store,
            config: config.clone(),
            feature_dim,
        })
    }

    /// Copies the weights of a fine-tuned ROI head.
    pub fn init_roi_head(&self, head: &HeadModel) -> Result<usize> {
        self.store.copy_from(&head.store, HEAD_PREFIX, HEAD_PREFIX)
    }

    pub fn transformer_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable_under(MODEL_PREFIX)
    }

    pub fn roi_head_vars(&self) -> Vec<candle_core::Var> {
        self.store.trainable_under(HEAD_PREFIX)
    }

    pub fn forward(&self, batch: &SequenceBatch) -> Result<MultiScaleOutput> {
        let (b, t, _) = batch.features.dims3()?;
        if t != self.config.positions {
            return Err(Error::Shape {
                expected: format!("{} positions", self.config.positions),
                got: t.to_string(),
            });
        }
        let valid = batch.mask.sum(1)?.to_dtype(DType::F64)?.to_vec1::<f64>()?;
        if let Some(i) = valid.iter().position(|&v| v < 0.5) {
            return Err(Error::invalid(format!("sequence {i} is fully masked")));
        }
        let tokens = project_features(&batch.features, &self.projector)?;
        let cls = self.cls.broadcast_as((b, 1, self.config.hidden))?;
        let x = Tensor::cat(&[&cls, &tokens], 1)?.broadcast_add(&self.positions)?;
        let mut x = self.emb_ln.forward(&x)?;
        // CLS is always attendable; masked ROI keys get a large negative bias
        let ones = Tensor::ones((b, 1), batch.mask.dtype(), batch.mask.device())?;
        let keep = Tensor::cat(&[&ones, &batch.mask], 1)?;
        let bias = ((keep - 1.0)? * 1e9)?.reshape((b, 1, 1, t + 1))?;
        for layer in &self.layers {
            x = layer.forward(&x, &bias)?;
        }
        let pooled = self.pooler.forward(&x.narrow(1, 0, 1)?.squeeze(1)?)?.tanh()?;
        Ok(MultiScaleOutput {
            core_logits: self.classifier.forward(&pooled)?,
            roi_logits: self.roi_head.forward(&batch.features)?,
        })
    }

    /// Core-level cancer probability per sequence.
    pub fn predict(&self, cores: &[&CoreSequence]) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(cores.len());
        for chunk in cores.chunks(32) {
            let batch = SequenceBatch::new(chunk, self.store.dtype(), self.store.device())?;
            let p = positive_probability(&self.forward(&batch)?.core_logits)?;
            out.extend(p.to_dtype(DType::F64)?.to_vec1::<f64>()?);
        }
        Ok(out)
    }
}

pub struct MoLoss {
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

/// `gamma * CE(core) + (1 - gamma) * mean over valid ROIs of CE(roi)`,
/// both averaged over the batch.
pub fn mo_loss(out: &MultiScaleOutput, labels: &[u8], mask: &Tensor, gamma: f64) -> Result<MoLoss> {
    check_gamma(gamma)?;
    let (b, t, c) = out.roi_logits.dims3()?;
    if out.core_logits.dims() != [b, 2] || c != 2 || mask.dims() != [b, t] || labels.len() != b {
        return Err(Error::Shape {
            expected: format!("core [{b}, 2], roi [{b}, {t}, 2], mask [{b}, {t}], {b} labels"),
            got: format!(
                "core {:?}, roi {:?}, mask {:?}, {} labels",
                out.core_logits.dims(),
                out.roi_logits.dims(),
                mask.dims(),
                labels.len()
            ),
        });
    }
    let device = out.core_logits.device();
    let y = label_tensor(labels, device)?;
    let core_term = cross_entropy_per_sample(&out.core_logits, &y)?.mean_all()?;
    let y_roi = y.unsqueeze(1)?.broadcast_as((b, t))?.flatten_all()?;
    let roi_ce = cross_entropy_per_sample(&out.roi_logits.reshape((b * t, 2))?, &y_roi)?.reshape((b, t))?;
    let mask = mask.to_dtype(roi_ce.dtype())?;
    let per_core = ((roi_ce * &mask)?.sum(1)? / mask.sum(1)?)?;
    let roi_term = per_core.mean_all()?;
    let total = ((core_term.clone() * gamma)? + (roi_term.clone() * (1.0 - gamma))?)?;
    let breakdown = LossBreakdown::new(
        scalar(&total)?,
        &[("core_term", scalar(&core_term)?), ("roi_term", scalar(&roi_term)?)],
    );
    Ok(MoLoss { total, breakdown })
}

/// Trains projector, transformer and ROI head on precomputed features.
/// When `init_head` is given the ROI head starts from its weights.
pub fn multiscale_train(
    train: &[CoreSequence],
    config: &MoConfig,
    schedule: &Schedule,
    init_head: Option<&HeadModel>,
    seed: u64,
) -> Result<(MultiScaleModel, Vec<StepLog>)> {
    schedule.validate(1)?;
    let first = train.first().ok_or_else(|| Error::invalid("no training cores"))?;
    let model = MultiScaleModel::new(config, first.feature_dim, seed, DType::F32)?;
    if let Some(head) = init_head {
        model.init_roi_head(head)?;
    }
    let history = train_model(&model, train, schedule, seed)?;
    Ok((model, history))
}

pub fn train_model(model: &MultiScaleModel, train: &[CoreSequence], schedule: &Schedule, seed: u64) -> Result<Vec<StepLog>> {
    let mut trainer = Trainer::new(model.store.trainable(), schedule)?;
    let batch = schedule.batch_size.min(train.len());
    let mut history = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let mut rng = seed::rng(seed, &[seed::label("core-batch"), step as u64]);
        let idx = sample(&mut rng, train.len(), batch);
        let cores: Vec<&CoreSequence> = idx.iter().map(|i| &train[i]).collect();
        let b = SequenceBatch::new(&cores, model.store.dtype(), model.store.device())?;
        let loss = mo_loss(&model.forward(&b)?, &b.labels, &b.mask, model.config.gamma)?;
        loss.breakdown.ensure_finite("multiscale", step)?;
        let lr = trainer.step(step, &loss.total)?;
        history.push(StepLog {
            step,
            learning_rate: lr,
            loss: loss.breakdown,
        });
    }
    Ok(history)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_config(gamma: f64) -> MoConfig {
        MoConfig {
            gamma,
            layers: 2,
            positions: 6,
            head: HeadConfig { hidden: 16 },
            ..MoConfig::default()
        }
    }

    fn core(id: &str, f: usize, t: usize, label: u8, shift: f32) -> CoreSequence {
        let feats = (0..t * f).map(|i| ((i * 37 % 17) as f32 / 17.0 - 0.5) + shift).collect();
        CoreSequence::full(id, f, feats, label).unwrap()
    }

    fn logits(rows: &[[f64; 2]]) -> Tensor {
        Tensor::from_vec(rows.concat(), (rows.len(), 2), &Device::Cpu).unwrap()
    }

    #[test]
    fn worked_example() {
        let out = MultiScaleOutput {
            core_logits: logits(&[[0.0, 4f64.ln()]]),
            roi_logits: logits(&[[0.0, 1.5f64.ln()], [0.0, 9f64.ln()]]).unsqueeze(0).unwrap(),
        };
        let mask = Tensor::ones((1, 2), DType::F64, &Device::Cpu).unwrap();
        let l = mo_loss(&out, &[1], &mask, 0.5).unwrap();
        let core = l.breakdown.component("core_term").unwrap();
        let roi = l.breakdown.component("roi_term").unwrap();
        assert!((core + 0.8f64.ln()).abs() < 1e-12);
        assert!((roi - (-(0.6f64.ln()) - 0.9f64.ln()) / 2.0).abs() < 1e-12);
        assert!((l.breakdown.total - 0.26562).abs() < 1e-4);
        let one = mo_loss(&out, &[1], &mask, 1.0).unwrap().breakdown;
        assert_eq!(one.total, core);
        let zero = mo_loss(&out, &[1], &mask, 0.0).unwrap().breakdown;
        assert_eq!(zero.total, roi);
        assert!(mo_loss(&out, &[1], &mask, 1.5).is_err());
    }

    #[test]
    fn masked_roi_positions_do_not_count() {
        let out = MultiScaleOutput {
            core_logits: logits(&[[0.0, 0.0]]),
            roi_logits: logits(&[[0.0, 1.0], [5.0, -5.0]]).unsqueeze(0).unwrap(),
        };
        let mask = Tensor::new(&[[1.0f64, 0.0]], &Device::Cpu).unwrap();
        let roi = mo_loss(&out, &[1], &mask, 0.0).unwrap().breakdown.total;
        assert!((roi - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12);
    }

    #[test]
    fn projection_width_and_shapes() {
        let cfg = small_config(0.5);
        let m = MultiScaleModel::new(&cfg, 10, 0, DType::F32).unwrap();
        let c = core("a", 10, 6, 1, 0.0);
        let b = SequenceBatch::new(&[&c, &c], DType::F32, &Device::Cpu).unwrap();
        let out = m.forward(&b).unwrap();
        assert_eq!(out.core_logits.dims(), &[2, 2]);
        assert_eq!(out.roi_logits.dims(), &[2, 6, 2]);
        assert_eq!(project_features(&b.features, &m.projector).unwrap().dims(), &[2, 6, 72]);
        let wrong = core("b", 9, 6, 1, 0.0);
        let b = SequenceBatch::new(&[&wrong], DType::F32, &Device::Cpu).unwrap();
        assert!(m.forward(&b).is_err());
    }

    #[test]
    fn all_masked_is_rejected() {
        assert!(CoreSequence::new("x", 2, vec![0.0; 4], vec![false, false], 0).is_err());
        assert!(MoConfig { hidden: 70, ..MoConfig::default() }.validate().is_err());
    }

    #[test]
    fn training_is_deterministic_and_learns() {
        let train: Vec<CoreSequence> = (0..8)
            .map(|i| core(&format!("c{i}"), 8, 6, (i % 2) as u8, if i % 2 == 1 { 0.6 } else { -0.6 }))
            .collect();
        let schedule = Schedule {
            steps: 40,
            batch_size: 4,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            warmup: 0,
        };
        let cfg = small_config(0.5);
        let (_, h1) = multiscale_train(&train, &cfg, &schedule, None, 7).unwrap();
        let (m, h2) = multiscale_train(&train, &cfg, &schedule, None, 7).unwrap();
        assert_eq!(h1, h2);
        let head: f64 = h1[..5].iter().map(|s| s.loss.total).sum::<f64>() / 5.0;
        let tail: f64 = h1[35..].iter().map(|s| s.loss.total).sum::<f64>() / 5.0;
        assert!(tail < head, "{head} -> {tail}");
        let refs: Vec<&CoreSequence> = train.iter().collect();
        let p = m.predict(&refs).unwrap();
        assert!(p.iter().all(|v| (0.0..=1.0).contains(v)));
    }
}

//! ROI-scale fine-tuning: an MLP head on top of encoder features, trained
//! on weak (core-inherited) labels, with mean aggregation to the core.

use candle_core::{DType, Module, Tensor};
use candle_nn::{Linear, VarBuilder};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::backbones::{images_to_tensor, Backbone};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy_per_sample, linear, positive_probability, Mode, ParamStore};
use crate::seed;
use crate::training::{scalar, LossBreakdown, Schedule, StepLog, Trainer};

/// Whether the encoder is updated during ROI fine-tuning.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Frozen encoder; only the head is trained.
    #[default]
    Linear,
    Full,
}

impl FinetuneMode {
    pub fn label(self) -> &'static str {
        match self {
            FinetuneMode::Linear => "Linear",
            FinetuneMode::Full => "Full",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub hidden: usize,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self { hidden: 128 }
    }
}

/// `feature_dim → hidden → ReLU → 2`.
#[derive(Clone, Debug)]
pub struct RoiHead {
    l1: Linear,
    l2: Linear,
    feature_dim: usize,
}

impl RoiHead {
    pub fn new(feature_dim: usize, cfg: &HeadConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.hidden == 0 || feature_dim == 0 {
            return Err(Error::Config("head dimensions must be positive".into()));
        }
        Ok(Self {
            l1: linear(feature_dim, cfg.hidden, vb.pp("l1"))?,
            l2: linear(cfg.hidden, 2, vb.pp("l2"))?,
            feature_dim,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.feature_dim
    }

    /// `[.., feature_dim]` → `[.., 2]` logits.
    pub fn forward(&self, h: &Tensor) -> Result<Tensor> {
        let last = *h.dims().last().unwrap_or(&0);
        if last != self.feature_dim {
            return Err(Error::Shape {
                expected: format!("[.., {}]", self.feature_dim),
                got: format!("{:?}", h.dims()),
            });
        }
        Ok(self.l2.forward(&self.l1.forward(h)?.relu()?)?)
    }
}

/// A head together with the parameters it owns.
pub struct HeadModel {
    pub store: ParamStore,
    pub head: RoiHead,
    pub config: HeadConfig,
}

pub const HEAD_PREFIX: &str = "head";

impl HeadModel {
    pub fn new(feature_dim: usize, config: &HeadConfig, seed: u64, dtype: DType) -> Result<Self> {
        let store = ParamStore::new(dtype);
        let head = RoiHead::new(
            feature_dim,
            config,
            store.builder(seed::derive(seed, &[seed::label("head")])).pp(HEAD_PREFIX),
        )?;
        Ok(Self {
            store,
            head,
            config: *config,
        })
    }
}

/// One optimizer step on a batch of patches with weak labels. With
/// [`FinetuneMode::Full`] the `trainer` is expected to hold encoder
/// parameters as well; the loss is the same either way.
pub fn finetune_step(
    encoder: &Backbone,
    head: &RoiHead,
    trainer: &mut Trainer,
    patches: &[&Matrix],
    labels: &[u8],
    step: usize,
) -> Result<LossBreakdown> {
    if patches.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", patches.len()),
            got: labels.len().to_string(),
        });
    }
    let x = images_to_tensor(patches, encoder.params().device())?;
    let h = encoder.encode(&x, Mode::Train)?;
    let loss = head_loss(head, &h, labels)?;
    let breakdown = LossBreakdown::new(scalar(&loss)?, &[("cross_entropy", scalar(&loss)?)]);
    breakdown.ensure_finite("finetune", step)?;
    trainer.step(step, &loss)?;
    Ok(breakdown)
}

/// Mean cross-entropy of the head's logits on features `h` (`[N, F]`).
pub fn head_loss(head: &RoiHead, h: &Tensor, labels: &[u8]) -> Result<Tensor> {
    let y = label_tensor(labels, h.device())?;
    let logits = head.forward(h)?;
    Ok(cross_entropy_per_sample(&logits, &y)?.mean_all()?)
}

pub(crate) fn label_tensor(labels: &[u8], device: &candle_core::Device) -> Result<Tensor> {
    if let Some(bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::invalid(format!("label must be 0 or 1, got {bad}")));
    }
    let v: Vec<u32> = labels.iter().map(|&l| l as u32).collect();
    Ok(Tensor::from_vec(v, labels.len(), device)?)
}

/// Row-major `[n, dim]` feature table with one weak label per row.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureSet {
    pub dim: usize,
    pub values: Vec<f32>,
    pub labels: Vec<u8>,
}

impl FeatureSet {
    pub fn new(dim: usize, values: Vec<f32>, labels: Vec<u8>) -> Result<Self> {
        if dim == 0 || values.len() != dim * labels.len() {
            return Err(Error::Shape {
                expected: format!("{} x {dim}", labels.len()),
                got: format!("{} values", values.len()),
            });
        }
        Ok(Self { dim, values, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn rows(&self, idx: &[usize], dtype: DType) -> Result<Tensor> {
        let mut data = Vec::with_capacity(idx.len() * self.dim);
        for &i in idx {
            data.extend_from_slice(&self.values[i * self.dim..(i + 1) * self.dim]);
        }
        Ok(Tensor::from_vec(data, (idx.len(), self.dim), &candle_core::Device::Cpu)?.to_dtype(dtype)?)
    }
}

/// Trains only the head on precomputed (frozen-encoder) features.
pub fn train_head(
    model: &HeadModel,
    train: &FeatureSet,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<StepLog>> {
    train_head_with_validation(model, train, None, schedule, seed)
}

/// As [`train_head`]; when `validation` is given, every step log also
/// carries a `validation` loss component.
pub fn train_head_with_validation(
    model: &HeadModel,
    train: &FeatureSet,
    validation: Option<&FeatureSet>,
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<StepLog>> {
    schedule.validate(1)?;
    if train.is_empty() {
        return Err(Error::invalid("no training features"));
    }
    let mut trainer = Trainer::new(model.store.trainable(), schedule)?;
    let batch = schedule.batch_size.min(train.len());
    let dtype = model.store.dtype();
    let val = match validation {
        Some(v) => Some((v.rows(&(0..v.len()).collect::<Vec<_>>(), dtype)?, &v.labels)),
        None => None,
    };
    let mut history = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let mut rng = seed::rng(seed, &[seed::label("head-batch"), step as u64]);
        let idx = sample(&mut rng, train.len(), batch).into_vec();
        let x = train.rows(&idx, dtype)?;
        let labels: Vec<u8> = idx.iter().map(|&i| train.labels[i]).collect();
        let loss = head_loss(&model.head, &x, &labels)?;
        let ce = scalar(&loss)?;
        let mut parts = vec![("cross_entropy", ce)];
        if let Some((vx, vl)) = &val {
            parts.push(("validation", scalar(&head_loss(&model.head, vx, vl)?)?));
        }
        let breakdown = LossBreakdown::new(ce, &parts);
        breakdown.ensure_finite("finetune", step)?;
        let lr = trainer.step(step, &loss)?;
        history.push(StepLog {
            step,
            learning_rate: lr,
            loss: breakdown,
        });
    }
    Ok(history)
}

/// Full fine-tuning: encoder and head are updated together.
pub fn finetune_full(
    encoder: &Backbone,
    model: &HeadModel,
    patches: &[Matrix],
    labels: &[u8],
    schedule: &Schedule,
    seed: u64,
) -> Result<Vec<StepLog>> {
    schedule.validate(1)?;
    if patches.is_empty() || patches.len() != labels.len() {
        return Err(Error::invalid("need one label per patch and at least one patch"));
    }
    let mut vars = encoder.params().trainable();
    vars.extend(model.store.trainable());
    let mut trainer = Trainer::new(vars, schedule)?;
    let batch = schedule.batch_size.min(patches.len());
    let mut history = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let mut rng = seed::rng(seed, &[seed::label("full-batch"), step as u64]);
        let idx = sample(&mut rng, patches.len(), batch).into_vec();
        let xs: Vec<&Matrix> = idx.iter().map(|&i| &patches[i]).collect();
        let ys: Vec<u8> = idx.iter().map(|&i| labels[i]).collect();
        let loss = finetune_step(encoder, &model.head, &mut trainer, &xs, &ys, step)?;
        history.push(StepLog {
            step,
            learning_rate: schedule.lr_at(step),
            loss,
        });
    }
    Ok(history)
}

/// Cancer probability per patch, eval mode.
pub fn predict_roi(encoder: &Backbone, head: &RoiHead, patches: &[&Matrix]) -> Result<Vec<f64>> {
    let mut out = Vec::with_capacity(patches.len());
    for group in patches.chunks(16) {
        let x = images_to_tensor(group, encoder.params().device())?;
        let h = encoder.encode(&x, Mode::Eval)?;
        out.extend(predict_features(head, &h)?);
    }
    Ok(out)
}

/// Cancer probability per row of a `[N, feature_dim]` feature tensor.
pub fn predict_features(head: &RoiHead, h: &Tensor) -> Result<Vec<f64>> {
    let p = positive_probability(&head.forward(h)?)?;
    Ok(p.to_dtype(DType::F64)?.to_vec1::<f64>()?)
}

/// Arithmetic mean of ROI probabilities.
pub fn aggregate_core(roi_probs: &[f64]) -> Result<f64> {
    if roi_probs.is_empty() {
        return Err(Error::invalid("cannot aggregate an empty set of ROI probabilities"));
    }
    if let Some(p) = roi_probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
        return Err(Error::invalid(format!("ROI probability {p} outside [0, 1]")));
    }
    Ok(roi_probs.iter().sum::<f64>() / roi_probs.len() as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CorePrediction {
    pub core_id: String,
    pub probability: f64,
    pub label: u8,
    pub fold: usize,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub roi_probabilities: Vec<f64>,
}

impl CorePrediction {
    pub fn from_rois(core_id: &str, roi_probabilities: Vec<f64>, label: u8, fold: usize) -> Result<Self> {
        Ok(Self {
            core_id: core_id.to_string(),
            probability: aggregate_core(&roi_probabilities)?,
            label,
            fold,
            roi_probabilities,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::Device;

    #[test]
    fn aggregate_examples() {
        assert!((aggregate_core(&[0.2, 0.4, 0.9]).unwrap() - 0.5).abs() < 1e-12);
        assert!((aggregate_core(&[0.7; 55]).unwrap() - 0.7).abs() < 1e-12);
        assert!(aggregate_core(&[]).is_err());
        assert!(aggregate_core(&[1.5]).is_err());
    }

    #[test]
    fn probability_from_logits() {
        let head_probs = |rows: &[[f64; 2]]| {
            let logits = Tensor::from_vec(rows.concat(), (rows.len(), 2), &Device::Cpu).unwrap();
            positive_probability(&logits).unwrap().to_vec1::<f64>().unwrap()
        };
        let p = head_probs(&[[1.7, 1.7], [0.0, 3f64.ln()]]);
        assert!((p[0] - 0.5).abs() < 1e-12);
        assert!((p[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn head_rejects_wrong_width() {
        let m = HeadModel::new(8, &HeadConfig::default(), 0, DType::F64).unwrap();
        let h = Tensor::zeros((3, 7), DType::F64, &Device::Cpu).unwrap();
        assert!(m.head.forward(&h).is_err());
        let h = Tensor::zeros((3, 8), DType::F64, &Device::Cpu).unwrap();
        assert_eq!(m.head.forward(&h).unwrap().dims(), &[3, 2]);
    }

    #[test]
    fn head_overfits_eight_points() {
        let dim = 6;
        let mut values = Vec::new();
        let mut labels = Vec::new();
        for i in 0..8 {
            for j in 0..dim {
                values.push(((i * 7 + j * 3) % 11) as f32 / 11.0 - 0.5 + if j == i % dim { 0.5 } else { 0.0 });
            }
            labels.push((i % 2) as u8);
        }
        let set = FeatureSet::new(dim, values, labels).unwrap();
        let model = HeadModel::new(dim, &HeadConfig::default(), 3, DType::F64).unwrap();
        let schedule = Schedule {
            steps: 200,
            batch_size: 8,
            learning_rate: 1e-2,
            weight_decay: 0.0,
            warmup: 0,
        };
        let hist = train_head(&model, &set, &schedule, 1).unwrap();
        assert!(hist.last().unwrap().loss.total < 0.01, "{:?}", hist.last());
    }
}

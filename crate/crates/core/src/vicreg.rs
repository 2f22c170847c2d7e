//! VICReg self-supervised pre-training.
//!
//! Two augmented views of each patch are encoded and expanded by a
//! three-layer projector; the loss combines an invariance term (MSE between
//! the views), a variance hinge keeping every embedding dimension's standard
//! deviation near a target, and a covariance penalty on off-diagonal entries
//! of the embedding covariance.

use candle_core::{Module, ModuleT, Tensor};
use candle_nn::{BatchNorm, Linear, VarBuilder};
use rand::seq::index::sample;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::backbones::{images_to_tensor, Backbone};
use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::nn::{linear, Mode, ParamStore};
use crate::seed;
use crate::training::{scalar, LossBreakdown, Schedule, StepLog, Trainer};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    /// Maximum absolute rotation in degrees.
    pub rotation_deg: f64,
    pub scale_range: (f64, f64),
    /// Fraction of the image area kept by the random crop.
    pub crop_area_range: (f64, f64),
    /// Exponent range of the intensity gamma curve.
    pub gamma_range: (f64, f64),
    pub horizontal_flip: bool,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            rotation_deg: 10.0,
            scale_range: (0.8, 1.2),
            crop_area_range: (0.7, 1.0),
            gamma_range: (0.8, 1.25),
            horizontal_flip: false,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            rotation_deg: 0.0,
            scale_range: (1.0, 1.0),
            crop_area_range: (1.0, 1.0),
            gamma_range: (1.0, 1.0),
            horizontal_flip: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ordered = |(a, b): (f64, f64)| a <= b && a > 0.0;
        if !(self.rotation_deg >= 0.0)
            || !ordered(self.scale_range)
            || !ordered(self.gamma_range)
            || !ordered(self.crop_area_range)
            || self.crop_area_range.1 > 1.0
        {
            return Err(Error::Config("augmentation ranges must be positive, ordered, crop area <= 1".into()));
        }
        Ok(())
    }
}

fn sample_clamped(m: &Matrix, y: f64, x: f64) -> f64 {
    let (h, w) = m.shape();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let y0 = (y.floor() as usize).min(h.saturating_sub(2));
    let x0 = (x.floor() as usize).min(w.saturating_sub(2));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let top = m.get(y0, x0) as f64 * (1.0 - fx) + m.get(y0, x1) as f64 * fx;
    let bot = m.get(y1, x0) as f64 * (1.0 - fx) + m.get(y1, x1) as f64 * fx;
    top * (1.0 - fy) + bot * fy
}

/// One random view: crop-and-resize, rotation and scaling about the image
/// center, optional flip, gamma. Output keeps the input shape, clamped to
/// `[0, 1]`.
pub fn augment(x: &Matrix, policy: &AugmentationPolicy, rng: &mut impl Rng) -> Matrix {
    let (h, w) = x.shape();
    let area = rng.random_range(policy.crop_area_range.0..=policy.crop_area_range.1);
    let side = area.sqrt();
    let crop_h = side * (h - 1) as f64;
    let crop_w = side * (w - 1) as f64;
    let oy = rng.random_range(0.0..=((h - 1) as f64 - crop_h).max(0.0));
    let ox = rng.random_range(0.0..=((w - 1) as f64 - crop_w).max(0.0));
    let theta = rng
        .random_range(-policy.rotation_deg..=policy.rotation_deg)
        .to_radians();
    let scale = rng.random_range(policy.scale_range.0..=policy.scale_range.1);
    let flip = policy.horizontal_flip && rng.random_bool(0.5);
    let gamma = rng.random_range(policy.gamma_range.0..=policy.gamma_range.1);

    let (cy, cx) = ((h - 1) as f64 / 2.0, (w - 1) as f64 / 2.0);
    let (cos, sin) = (theta.cos(), theta.sin());
    let sy = crop_h / (h - 1).max(1) as f64;
    let sx = crop_w / (w - 1).max(1) as f64;
    Matrix::from_fn(h, w, |i, j| {
        let j = if flip { w - 1 - j } else { j };
        // position in the cropped-and-resized image
        let py = oy + i as f64 * sy - cy;
        let px = ox + j as f64 * sx - cx;
        // inverse rotation/scale about the center
        let src_y = cy + (cos * py + sin * px) / scale;
        let src_x = cx + (-sin * py + cos * px) / scale;
        let v = sample_clamped(x, src_y, src_x).clamp(0.0, 1.0);
        v.powf(gamma) as f32
    })
}

/// Two independent views of `x`, deterministic in `(x, seed)`.
pub fn augment_pair(x: &Matrix, policy: &AugmentationPolicy, seed: u64) -> (Matrix, Matrix) {
    let mut rng = seed::rng(seed, &[seed::label("views")]);
    let a = augment(x, policy, &mut rng);
    let b = augment(x, policy, &mut rng);
    (a, b)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct VicregWeights {
    pub lambda_inv: f64,
    pub mu_var: f64,
    pub nu_cov: f64,
    pub variance_target: f64,
    pub variance_eps: f64,
}

impl Default for VicregWeights {
    fn default() -> Self {
        Self {
            lambda_inv: 25.0,
            mu_var: 25.0,
            nu_cov: 1.0,
            variance_target: 1.0,
            variance_eps: 1e-4,
        }
    }
}

pub struct VicregLoss {
    /// Differentiable total.
    pub total: Tensor,
    pub breakdown: LossBreakdown,
}

impl VicregLoss {
    pub fn invariance(&self) -> f64 {
        self.breakdown.component("invariance").unwrap()
    }

    pub fn variance(&self) -> f64 {
        self.breakdown.component("variance").unwrap()
    }

    pub fn covariance(&self) -> f64 {
        self.breakdown.component("covariance").unwrap()
    }
}

/// `(variance hinge, covariance penalty)` of one `[N, d]` embedding batch.
fn variance_covariance(z: &Tensor, w: &VicregWeights) -> candle_core::Result<(Tensor, Tensor)> {
    let (n, d) = z.dims2()?;
    let centered = z.broadcast_sub(&z.mean_keepdim(0)?)?;
    let var = (centered.sqr()?.sum(0)? / (n - 1) as f64)?;
    let std = (var.clone() + w.variance_eps)?.sqrt()?;
    let hinge = (std.neg()? + w.variance_target)?.relu()?.mean_all()?;
    let cov = (centered.t()?.matmul(&centered)? / (n - 1) as f64)?;
    // sum of squared off-diagonal entries = all squares minus the diagonal
    let off = (cov.sqr()?.sum_all()? - var.sqr()?.sum_all()?)?;
    Ok((hinge, (off / d as f64)?))
}

pub fn vicreg_loss(z1: &Tensor, z2: &Tensor, w: &VicregWeights) -> Result<VicregLoss> {
    let (n, d) = z1.dims2()?;
    if z2.dims() != z1.dims() {
        return Err(Error::Shape {
            expected: format!("{:?}", z1.dims()),
            got: format!("{:?}", z2.dims()),
        });
    }
    if n < 2 {
        return Err(Error::invalid("VICReg needs a batch of at least 2 (variance undefined)"));
    }
    if d < 2 {
        return Err(Error::invalid("VICReg needs embeddings of dimension >= 2"));
    }
    let invariance = (z1 - z2)?.sqr()?.mean_all()?;
    let (v1, c1) = variance_covariance(z1, w)?;
    let (v2, c2) = variance_covariance(z2, w)?;
    let variance = (v1 + v2)?;
    let covariance = (c1 + c2)?;
    let total = ((invariance.clone() * w.lambda_inv)?
        + (variance.clone() * w.mu_var)?
        + (covariance.clone() * w.nu_cov)?)?;
    let breakdown = LossBreakdown::new(
        scalar(&total)?,
        &[
            ("invariance", scalar(&invariance)?),
            ("variance", scalar(&variance)?),
            ("covariance", scalar(&covariance)?),
        ],
    );
    Ok(VicregLoss { total, breakdown })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProjectorConfig {
    pub hidden: usize,
    pub output: usize,
}

impl Default for ProjectorConfig {
    fn default() -> Self {
        Self {
            hidden: 512,
            output: 512,
        }
    }
}

/// Expander: linear → BN → ReLU → linear → BN → ReLU → linear.
pub struct Projector {
    l1: Linear,
    bn1: BatchNorm,
    l2: Linear,
    bn2: BatchNorm,
    l3: Linear,
}

impl Projector {
    pub fn new(input: usize, cfg: &ProjectorConfig, vb: VarBuilder) -> Result<Self> {
        if cfg.output < 2 || cfg.hidden == 0 {
            return Err(Error::Config("projector output dim must be >= 2".into()));
        }
        Ok(Self {
            l1: linear(input, cfg.hidden, vb.pp("l1"))?,
            bn1: candle_nn::batch_norm(cfg.hidden, 1e-5, vb.pp("bn1"))?,
            l2: linear(cfg.hidden, cfg.hidden, vb.pp("l2"))?,
            bn2: candle_nn::batch_norm(cfg.hidden, 1e-5, vb.pp("bn2"))?,
            l3: linear(cfg.hidden, cfg.output, vb.pp("l3"))?,
        })
    }

    pub fn forward(&self, h: &Tensor, mode: Mode) -> Result<Tensor> {
        let t = mode.is_train();
        let x = self.bn1.forward_t(&self.l1.forward(h)?, t)?.relu()?;
        let x = self.bn2.forward_t(&self.l2.forward(&x)?, t)?.relu()?;
        Ok(self.l3.forward(&x)?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainOutcome {
    pub history: Vec<StepLog>,
}

impl PretrainOutcome {
    pub fn first_total(&self) -> Option<f64> {
        self.history.first().map(|s| s.loss.total)
    }

    pub fn last_total(&self) -> Option<f64> {
        self.history.last().map(|s| s.loss.total)
    }
}

/// Optimizes the encoder (and a throw-away projector) on VICReg. Each step
/// draws `batch_size` distinct images; views are seeded per `(step, slot)`.
pub fn pretrain(
    encoder: &Backbone,
    projector: &ProjectorConfig,
    images: &[Matrix],
    policy: &AugmentationPolicy,
    weights: &VicregWeights,
    schedule: &Schedule,
    seed: u64,
) -> Result<PretrainOutcome> {
    schedule.validate(2)?;
    policy.validate()?;
    if images.is_empty() {
        return Err(Error::invalid("pre-training dataset is empty"));
    }
    if images.len() < schedule.batch_size {
        return Err(Error::invalid(format!(
            "pre-training needs at least batch_size = {} images, got {}",
            schedule.batch_size,
            images.len()
        )));
    }
    let proj_store = ParamStore::new(encoder.params().dtype());
    let proj = Projector::new(
        encoder.feature_dim(),
        projector,
        proj_store.builder(seed::derive(seed, &[seed::label("projector")])).pp("projector"),
    )?;
    let mut vars = encoder.params().trainable();
    vars.extend(proj_store.trainable());
    let mut trainer = Trainer::new(vars, schedule)?;
    let device = encoder.params().device().clone();

    let mut history = Vec::with_capacity(schedule.steps);
    for step in 0..schedule.steps {
        let mut rng = seed::rng(seed, &[seed::label("batch"), step as u64]);
        let picks = sample(&mut rng, images.len(), schedule.batch_size);
        let (v1, v2): (Vec<Matrix>, Vec<Matrix>) = picks
            .iter()
            .enumerate()
            .map(|(slot, i)| {
                augment_pair(&images[i], policy, seed::derive(seed, &[step as u64, slot as u64]))
            })
            .unzip();
        let x1 = images_to_tensor(&v1.iter().collect::<Vec<_>>(), &device)?;
        let x2 = images_to_tensor(&v2.iter().collect::<Vec<_>>(), &device)?;
        let z1 = proj.forward(&encoder.encode(&x1, Mode::Train)?, Mode::Train)?;
        let z2 = proj.forward(&encoder.encode(&x2, Mode::Train)?, Mode::Train)?;
        let loss = vicreg_loss(&z1, &z2, weights)?;
        loss.breakdown.ensure_finite("pretrain", step)?;
        let lr = trainer.step(step, &loss.total)?;
        log::debug!("pretrain step {step}: {:.4}", loss.breakdown.total);
        history.push(StepLog {
            step,
            learning_rate: lr,
            loss: loss.breakdown,
        });
    }
    Ok(PretrainOutcome { history })
}

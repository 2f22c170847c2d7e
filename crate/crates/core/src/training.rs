//! Bits shared by every training loop: loss breakdowns, schedules, and the
//! optimizer.

use std::collections::BTreeMap;

use candle_core::{Tensor, Var};
use candle_nn::{AdamW, Optimizer, ParamsAdamW};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Scalar loss plus its named components.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub components: BTreeMap<String, f64>,
}

impl LossBreakdown {
    pub fn new(total: f64, components: &[(&str, f64)]) -> Self {
        Self {
            total,
            components: components.iter().map(|(k, v)| (k.to_string(), *v)).collect(),
        }
    }

    pub fn component(&self, name: &str) -> Option<f64> {
        self.components.get(name).copied()
    }

    /// Fails with the name of the first non-finite value.
    pub fn ensure_finite(&self, stage: &'static str, step: usize) -> Result<()> {
        let bad = self
            .components
            .iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(k, _)| k.clone())
            .or_else(|| (!self.total.is_finite()).then(|| "total".to_string()));
        match bad {
            Some(component) => Err(Error::NonFiniteLoss {
                stage,
                component,
                step,
            }),
            None => Ok(()),
        }
    }
}

/// One optimizer step in a training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub learning_rate: f64,
    #[serde(flatten)]
    pub loss: LossBreakdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Schedule {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    /// Linear warm-up length in steps.
    pub warmup: usize,
}

impl Default for Schedule {
    fn default() -> Self {
        Self {
            steps: 100,
            batch_size: 16,
            learning_rate: 1e-3,
            weight_decay: 1e-4,
            warmup: 0,
        }
    }
}

impl Schedule {
    pub fn validate(&self, min_batch: usize) -> Result<()> {
        if self.batch_size < min_batch {
            return Err(Error::invalid(format!(
                "batch size must be at least {min_batch}, got {}",
                self.batch_size
            )));
        }
        if !(self.learning_rate > 0.0) || self.weight_decay < 0.0 {
            return Err(Error::invalid("learning rate must be positive, weight decay >= 0"));
        }
        Ok(())
    }

    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup > 0 && step < self.warmup {
            self.learning_rate * (step + 1) as f64 / self.warmup as f64
        } else {
            self.learning_rate
        }
    }
}

/// AdamW wrapper that follows a [`Schedule`].
pub struct Trainer {
    opt: AdamW,
    schedule: Schedule,
}

impl Trainer {
    pub fn new(vars: Vec<Var>, schedule: &Schedule) -> Result<Self> {
        let params = ParamsAdamW {
            lr: schedule.lr_at(0),
            weight_decay: schedule.weight_decay,
            ..Default::default()
        };
        Ok(Self {
            opt: AdamW::new(vars, params)?,
            schedule: schedule.clone(),
        })
    }

    /// Back-propagates `loss` and applies one update; returns the learning
    /// rate used.
    pub fn step(&mut self, step: usize, loss: &Tensor) -> Result<f64> {
        let lr = self.schedule.lr_at(step);
        self.opt.set_learning_rate(lr);
        self.opt.backward_step(loss)?;
        Ok(lr)
    }
}

pub(crate) fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(candle_core::DType::F64)?.to_scalar::<f64>()?)
}

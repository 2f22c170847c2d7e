use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::backbones::{BackboneConfig, Variant};
use crate::data::{RoiParams, SynthConfig};
use crate::error::{Error, Result};
use crate::finetune::{FinetuneMode, HeadConfig};
use crate::multiscale::MoConfig;
use crate::training::Schedule;
use crate::vicreg::{AugmentationPolicy, ProjectorConfig, VicregWeights};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Seed for splits, initialization and training.
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_k")]
    pub k: usize,
    pub output_dir: PathBuf,
    #[serde(default)]
    pub dataset: DatasetConfig,
    pub backbone: BackboneConfig,
    #[serde(default)]
    pub stages: Stages,
    #[serde(default)]
    pub pretrain: PretrainConfig,
    #[serde(default)]
    pub finetune: FinetuneConfig,
    #[serde(default)]
    pub multiscale: MultiscaleConfig,
    #[serde(default)]
    pub evaluation: EvaluationConfig,
}

fn default_k() -> usize {
    5
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DatasetConfig {
    /// Existing dataset directory (with `manifest.json`). When absent the
    /// synthetic generator is used.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<PathBuf>,
    #[serde(default)]
    pub synthetic: SynthConfig,
    #[serde(default)]
    pub extraction: RoiParams,
    /// Also store the preprocessed ROIs of every core.
    #[serde(default)]
    pub write_rois: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stages {
    pub pretrain: bool,
    pub roi_finetune: bool,
    pub multiscale: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Self {
            pretrain: true,
            roi_finetune: true,
            multiscale: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PretrainConfig {
    pub schedule: Schedule,
    /// ROIs sampled from the training cores of each leg.
    pub images_per_leg: usize,
    pub augmentation: AugmentationPolicy,
    pub weights: VicregWeights,
    pub projector: ProjectorConfig,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            schedule: Schedule::default(),
            images_per_leg: 256,
            augmentation: AugmentationPolicy::default(),
            weights: VicregWeights::default(),
            projector: ProjectorConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub head: HeadConfig,
    #[serde(deserialize_with = "finetune_schedule")]
    pub schedule: Schedule,
    /// Undersample benign training cores to the cancer count.
    pub balance: bool,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Linear,
            head: HeadConfig::default(),
            schedule: Schedule {
                steps: 300,
                batch_size: 64,
                ..Schedule::default()
            },
            balance: true,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MultiscaleConfig {
    pub model: MoConfig,
    /// Each value trains a separate core model; `model.gamma` is ignored
    /// when this list is non-empty.
    pub gammas: Vec<f64>,
    #[serde(deserialize_with = "multiscale_schedule")]
    pub schedule: Schedule,
}

impl Default for MultiscaleConfig {
    fn default() -> Self {
        Self {
            model: MoConfig::default(),
            gammas: Vec::new(),
            schedule: Schedule {
                steps: 300,
                batch_size: 8,
                learning_rate: 1e-4,
                ..Schedule::default()
            },
        }
    }
}

/// Schedule table in which missing keys keep the stage's own defaults
/// rather than the generic ones.
#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PartialSchedule {
    steps: Option<usize>,
    batch_size: Option<usize>,
    learning_rate: Option<f64>,
    weight_decay: Option<f64>,
    warmup: Option<usize>,
}

impl PartialSchedule {
    fn over(self, base: Schedule) -> Schedule {
        Schedule {
            steps: self.steps.unwrap_or(base.steps),
            batch_size: self.batch_size.unwrap_or(base.batch_size),
            learning_rate: self.learning_rate.unwrap_or(base.learning_rate),
            weight_decay: self.weight_decay.unwrap_or(base.weight_decay),
            warmup: self.warmup.unwrap_or(base.warmup),
        }
    }
}

fn finetune_schedule<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Schedule, D::Error> {
    Ok(PartialSchedule::deserialize(d)?.over(FinetuneConfig::default().schedule))
}

fn multiscale_schedule<'de, D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Schedule, D::Error> {
    Ok(PartialSchedule::deserialize(d)?.over(MultiscaleConfig::default().schedule))
}

impl MultiscaleConfig {
    pub fn gamma_values(&self) -> Vec<f64> {
        if self.gammas.is_empty() {
            vec![self.model.gamma]
        } else {
            self.gammas.clone()
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ThresholdMode {
    /// 0.5 on the cancer probability.
    #[default]
    Fixed,
    /// Per leg, the validation-fold threshold maximizing balanced accuracy.
    Validation,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvaluationConfig {
    pub threshold: ThresholdMode,
}

impl ExperimentConfig {
    /// Defaults for a variant, writing to `output_dir`.
    pub fn new(variant: Variant, output_dir: impl Into<PathBuf>) -> Self {
        Self {
            seed: 0,
            k: default_k(),
            output_dir: output_dir.into(),
            dataset: DatasetConfig::default(),
            backbone: BackboneConfig::desk(variant),
            stages: Stages::default(),
            pretrain: PretrainConfig::default(),
            finetune: FinetuneConfig::default(),
            multiscale: MultiscaleConfig::default(),
            evaluation: EvaluationConfig::default(),
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Reads and parses a config file; relative paths inside it are
    /// resolved against the file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        if cfg.output_dir.is_relative() {
            cfg.output_dir = base.join(&cfg.output_dir);
        }
        if let Some(m) = cfg.dataset.manifest.as_mut() {
            if m.is_relative() {
                *m = base.join(&*m);
            }
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string_pretty(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Sets the experiment seed and the synthetic-data seed together.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self.dataset.synthetic.seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.k < 3 {
            return Err(Error::Config(format!(
                "k must be at least 3 (test, validation and training folds), got {}",
                self.k
            )));
        }
        if let Some(m) = &self.dataset.manifest {
            if !m.join("manifest.json").is_file() {
                return Err(Error::Config(format!("dataset manifest not found under {}", m.display())));
            }
        } else {
            self.dataset.synthetic.validate()?;
        }
        let ex = &self.dataset.extraction;
        if ex.n_patches == 0 || !(ex.roi_mm > 0.0) || ex.out_size < 2 {
            return Err(Error::Config("extraction parameters must be positive".into()));
        }
        if ex.out_size != self.backbone.input_size {
            return Err(Error::Config(format!(
                "ROI size {} differs from backbone input size {}",
                ex.out_size, self.backbone.input_size
            )));
        }
        self.backbone.validate()?;
        if self.stages.pretrain {
            self.pretrain.schedule.validate(2)?;
            self.pretrain.augmentation.validate()?;
            if self.pretrain.images_per_leg < self.pretrain.schedule.batch_size {
                return Err(Error::Config("pretrain.images_per_leg must be >= batch_size".into()));
            }
            if self.pretrain.projector.output < 2 {
                return Err(Error::Config("projector output must be >= 2".into()));
            }
        }
        self.finetune.schedule.validate(1)?;
        if self.stages.multiscale {
            if !self.stages.roi_finetune {
                return Err(Error::Config(
                    "the multiscale stage needs roi_finetune (its ROI head and features)".into(),
                ));
            }
            self.multiscale.schedule.validate(1)?;
            self.multiscale.model.validate()?;
            if self.multiscale.model.positions != ex.n_patches {
                return Err(Error::Config(format!(
                    "multiscale.model.positions ({}) must equal extraction.n_patches ({})",
                    self.multiscale.model.positions, ex.n_patches
                )));
            }
            for g in self.multiscale.gamma_values() {
                if !(0.0..=1.0).contains(&g) {
                    return Err(Error::Config(format!("gamma must lie in [0, 1], got {g}")));
                }
            }
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(&serde_json::to_value(self).expect("config serializes"))
    }
}

pub(crate) fn hash_json(value: &serde_json::Value) -> String {
    let mut h = Sha256::new();
    h.update(value.to_string().as_bytes());
    hex::encode(h.finalize())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toml_roundtrip() {
        let mut cfg = ExperimentConfig::new(Variant::Resnet18Slim, "out");
        cfg.multiscale.gammas = vec![0.0, 0.5, 1.0];
        let text = cfg.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), cfg);
        cfg.validate().unwrap();
    }

    #[test]
    fn minimal_file_uses_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "output_dir = \"x\"\n[backbone]\nvariant = \"vit\"\nfeature_dim = 256\n",
        )
        .unwrap();
        assert_eq!(cfg.k, 5);
        assert_eq!(cfg.backbone.variant, Variant::Vit);
        assert_eq!(cfg.multiscale.gamma_values(), vec![0.5]);
    }

    #[test]
    fn partial_schedule_keeps_stage_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "output_dir = \"x\"\n[backbone]\nvariant = \"vit\"\nfeature_dim = 256\n\
             [multiscale.schedule]\nsteps = 7\n[finetune.schedule]\nlearning_rate = 0.01\n",
        )
        .unwrap();
        assert_eq!(cfg.multiscale.schedule.steps, 7);
        assert_eq!(cfg.multiscale.schedule.learning_rate, 1e-4);
        assert_eq!(cfg.multiscale.schedule.batch_size, 8);
        assert_eq!(cfg.finetune.schedule.batch_size, 64);
        assert_eq!(cfg.finetune.schedule.learning_rate, 0.01);
        assert!(ExperimentConfig::from_toml(
            "output_dir = \"x\"\n[backbone]\nvariant = \"vit\"\nfeature_dim = 256\n[finetune.schedule]\nstep = 1\n"
        )
        .is_err());
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        let err = ExperimentConfig::from_toml("output_dir = \"x\"\nbogus = 1\n[backbone]\nvariant = \"vit\"\nfeature_dim = 256\n");
        assert!(err.is_err());
        let mut cfg = ExperimentConfig::new(Variant::Resnet18Slim, "out");
        cfg.multiscale.gammas = vec![1.5];
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(Variant::Resnet18Slim, "out");
        cfg.dataset.manifest = Some("/nonexistent/dataset".into());
        assert!(cfg.validate().is_err());
        let mut cfg = ExperimentConfig::new(Variant::Resnet18Slim, "out");
        cfg.k = 2;
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn hash_tracks_content() {
        let a = ExperimentConfig::new(Variant::Resnet18Slim, "out");
        let b = a.clone().with_seed(3);
        assert_eq!(a.hash(), a.clone().hash());
        assert_ne!(a.hash(), b.hash());
        assert_eq!(b.dataset.synthetic.seed, 3);
    }
}

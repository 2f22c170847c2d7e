//! ROI-scale image encoders: a slimmed ResNet18, ViT, CCT, and PvT, all
//! mapping `[N, 1, S, S]` patches in `[0, 1]` to `[N, feature_dim]`.

mod cct;
mod pvt;
mod resnet;
mod vit;

use std::fmt;
use std::str::FromStr;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::Matrix;
use crate::error::{Error, Result};
use crate::nn::{Mode, ParamStore};

pub use cct::CctSettings;
pub use pvt::PvtSettings;
pub use resnet::ResnetSettings;
pub use vit::VitSettings;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Variant {
    #[serde(rename = "resnet18_slim")]
    Resnet18Slim,
    Vit,
    Cct,
    Pvt,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Resnet18Slim, Variant::Vit, Variant::Cct, Variant::Pvt];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Resnet18Slim => "resnet18_slim",
            Variant::Vit => "vit",
            Variant::Cct => "cct",
            Variant::Pvt => "pvt",
        }
    }

    /// Label used in report tables.
    pub fn display_name(self) -> &'static str {
        match self {
            Variant::Resnet18Slim => "ResNet18",
            Variant::Vit => "ViT",
            Variant::Cct => "CCT",
            Variant::Pvt => "PvT",
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown backbone variant `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackboneConfig {
    pub variant: Variant,
    /// Width of the output feature vector. For the ResNet this is the last
    /// stage width; stages use `f/8, f/4, f/2, f`.
    pub feature_dim: usize,
    #[serde(default = "default_input_size")]
    pub input_size: usize,
    #[serde(default = "default_true")]
    pub desk_scale: bool,
    #[serde(default)]
    pub resnet: ResnetSettings,
    #[serde(default)]
    pub vit: VitSettings,
    #[serde(default)]
    pub cct: CctSettings,
    #[serde(default)]
    pub pvt: PvtSettings,
}

fn default_input_size() -> usize {
    crate::ROI_SIZE
}

fn default_true() -> bool {
    true
}

impl BackboneConfig {
    /// Desk-scale defaults for a variant.
    pub fn desk(variant: Variant) -> Self {
        let feature_dim = match variant {
            Variant::Resnet18Slim => 512,
            _ => 256,
        };
        Self {
            variant,
            feature_dim,
            input_size: crate::ROI_SIZE,
            desk_scale: true,
            resnet: ResnetSettings::default(),
            vit: VitSettings::default(),
            cct: CctSettings::default(),
            pvt: PvtSettings::default(),
        }
    }

    /// Architecture sizes close to the published base models.
    pub fn full_scale(variant: Variant) -> Self {
        let mut c = Self::desk(variant);
        c.desk_scale = false;
        match variant {
            Variant::Resnet18Slim => {}
            Variant::Vit => {
                c.feature_dim = 768;
                c.vit = VitSettings {
                    patch: 16,
                    depth: 12,
                    heads: 12,
                    mlp_ratio: 4,
                };
            }
            Variant::Cct => {
                c.feature_dim = 384;
                c.cct = CctSettings {
                    depth: 14,
                    heads: 6,
                    mlp_ratio: 3,
                    ..CctSettings::default()
                };
            }
            Variant::Pvt => {
                c.feature_dim = 512;
                c.pvt = PvtSettings {
                    depths: [3, 4, 6, 3],
                    widths: [64, 128, 320, 512],
                    heads: [1, 2, 5, 8],
                    ..PvtSettings::default()
                };
            }
        }
        c
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(format!("backbone {}: {m}", self.variant)));
        if self.feature_dim < 8 {
            return bad(format!("feature_dim must be >= 8, got {}", self.feature_dim));
        }
        if self.input_size < 8 {
            return bad("input_size must be >= 8".into());
        }
        match self.variant {
            Variant::Resnet18Slim => self.resnet.validate(self.feature_dim).or_else(bad),
            Variant::Vit => self.vit.validate(self.feature_dim, self.input_size).or_else(bad),
            Variant::Cct => self.cct.validate(self.feature_dim, self.input_size).or_else(bad),
            Variant::Pvt => self.pvt.validate(self.feature_dim, self.input_size).or_else(bad),
        }
    }
}

enum Net {
    Resnet(resnet::Resnet),
    Vit(vit::Vit),
    Cct(cct::Cct),
    Pvt(pvt::Pvt),
}

/// A constructed encoder and its parameters.
pub struct Backbone {
    config: BackboneConfig,
    store: ParamStore,
    net: Net,
}

impl fmt::Debug for Backbone {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Backbone")
            .field("variant", &self.config.variant)
            .field("feature_dim", &self.config.feature_dim)
            .field("parameters", &self.store.parameter_count())
            .finish()
    }
}

/// Parameter prefix of encoder weights inside a store.
pub const ENCODER_PREFIX: &str = "encoder";

pub fn build_backbone(config: &BackboneConfig, seed: u64) -> Result<Backbone> {
    build_backbone_with(config, seed, DType::F32)
}

pub fn build_backbone_with(config: &BackboneConfig, seed: u64, dtype: DType) -> Result<Backbone> {
    config.validate()?;
    let store = ParamStore::new(dtype);
    let vb = store.builder(seed).pp(ENCODER_PREFIX);
    let net = match config.variant {
        Variant::Resnet18Slim => {
            Net::Resnet(resnet::Resnet::new(&config.resnet, config.feature_dim, vb)?)
        }
        Variant::Vit => Net::Vit(vit::Vit::new(&config.vit, config.feature_dim, config.input_size, vb)?),
        Variant::Cct => Net::Cct(cct::Cct::new(&config.cct, config.feature_dim, config.input_size, vb)?),
        Variant::Pvt => Net::Pvt(pvt::Pvt::new(&config.pvt, config.input_size, vb)?),
    };
    Ok(Backbone {
        config: config.clone(),
        store,
        net,
    })
}

impl Backbone {
    pub fn config(&self) -> &BackboneConfig {
        &self.config
    }

    pub fn feature_dim(&self) -> usize {
        self.config.feature_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    /// `batch`: `[N, 1, S, S]` → `[N, feature_dim]`.
    pub fn encode(&self, batch: &Tensor, mode: Mode) -> Result<Tensor> {
        let s = self.config.input_size;
        let dims = batch.dims();
        if dims.len() != 4 || dims[1] != 1 || dims[2] != s || dims[3] != s {
            return Err(Error::Shape {
                expected: format!("[N, 1, {s}, {s}]"),
                got: format!("{dims:?}"),
            });
        }
        let batch = batch.to_dtype(self.store.dtype())?;
        let train = mode.is_train();
        let out = match &self.net {
            Net::Resnet(n) => n.forward(&batch, train)?,
            Net::Vit(n) => n.forward(&batch)?,
            Net::Cct(n) => n.forward(&batch)?,
            Net::Pvt(n) => n.forward(&batch)?,
        };
        Ok(out)
    }

    /// Encodes preprocessed patches in chunks of `chunk`, eval mode, and
    /// returns row-major `[N, feature_dim]` values.
    pub fn encode_patches(&self, patches: &[&Matrix], chunk: usize) -> Result<Vec<f32>> {
        let mut out = Vec::with_capacity(patches.len() * self.feature_dim());
        for group in patches.chunks(chunk.max(1)) {
            let x = images_to_tensor(group, self.store.device())?;
            let f = self.encode(&x, Mode::Eval)?.to_dtype(DType::F32)?;
            out.extend(f.flatten_all()?.to_vec1::<f32>()?);
        }
        Ok(out)
    }
}

/// Stacks equally sized single-channel images into `[N, 1, H, W]`.
pub fn images_to_tensor(images: &[&Matrix], device: &candle_core::Device) -> Result<Tensor> {
    let Some(first) = images.first() else {
        return Err(Error::invalid("empty image batch"));
    };
    let (h, w) = first.shape();
    let mut data = Vec::with_capacity(images.len() * h * w);
    for m in images {
        if m.shape() != (h, w) {
            return Err(Error::Shape {
                expected: format!("{h}x{w}"),
                got: format!("{:?}", m.shape()),
            });
        }
        data.extend_from_slice(m.as_slice());
    }
    Ok(Tensor::from_vec(data, (images.len(), 1, h, w), device)?)
}

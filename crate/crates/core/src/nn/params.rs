use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::sync::Mutex;

use candle_core::{DType, Device, Shape, Tensor, Var};
use candle_nn::init::NormalOrUniform;
use candle_nn::var_builder::SimpleBackend;
use candle_nn::{Init, VarBuilder, VarMap};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

/// Variable backend that draws initial values from a seeded ChaCha stream.
/// Parameters are created in model-construction order, so the same
/// construction code and seed always yield identical weights.
struct SeededBackend {
    map: VarMap,
    rng: Mutex<ChaCha8Rng>,
}

impl SeededBackend {
    fn init_values(&self, shape: &Shape, init: Init) -> Vec<f64> {
        let n = shape.elem_count();
        let mut rng = self.rng.lock().unwrap();
        match init {
            Init::Const(v) => vec![v; n],
            Init::Uniform { lo, up } => (0..n).map(|_| rng.random_range(lo..up)).collect(),
            Init::Randn { mean, stdev } => (0..n)
                .map(|_| mean + stdev * rng.sample::<f64, _>(StandardNormal))
                .collect(),
            Init::Kaiming {
                dist,
                fan,
                non_linearity,
            } => {
                let fan = fan.for_shape(shape);
                let gain = non_linearity.gain();
                let std = gain / (fan.max(1) as f64).sqrt();
                match dist {
                    NormalOrUniform::Uniform => {
                        let b = 3f64.sqrt() * std;
                        (0..n).map(|_| rng.random_range(-b..b)).collect()
                    }
                    NormalOrUniform::Normal => (0..n)
                        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
                        .collect(),
                }
            }
        }
    }
}

impl SimpleBackend for SeededBackend {
    fn get(
        &self,
        s: Shape,
        name: &str,
        h: Init,
        dtype: DType,
        dev: &Device,
    ) -> candle_core::Result<Tensor> {
        let mut data = self.map.data().lock().unwrap();
        if let Some(var) = data.get(name) {
            if var.shape() != &s {
                candle_core::bail!("shape mismatch for {name}: {:?} vs {s:?}", var.shape());
            }
            return Ok(var.as_tensor().clone());
        }
        let values = self.init_values(&s, h);
        let tensor = Tensor::from_vec(values, s, dev)?.to_dtype(dtype)?;
        let var = Var::from_tensor(&tensor)?;
        data.insert(name.to_string(), var.clone());
        Ok(var.as_tensor().clone())
    }

    fn get_unchecked(&self, name: &str, _dtype: DType, _dev: &Device) -> candle_core::Result<Tensor> {
        match self.map.data().lock().unwrap().get(name) {
            Some(v) => Ok(v.as_tensor().clone()),
            None => candle_core::bail!("unknown parameter {name}"),
        }
    }

    fn contains_tensor(&self, name: &str) -> bool {
        self.map.data().lock().unwrap().contains_key(name)
    }
}

/// Named parameters of one model plus the builder that creates them.
#[derive(Clone)]
pub struct ParamStore {
    map: VarMap,
    dtype: DType,
    device: Device,
}

impl std::fmt::Debug for ParamStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ParamStore")
            .field("tensors", &self.map.data().lock().unwrap().len())
            .field("dtype", &self.dtype)
            .finish()
    }
}

impl ParamStore {
    pub fn new(dtype: DType) -> Self {
        Self {
            map: VarMap::new(),
            dtype,
            device: Device::Cpu,
        }
    }

    /// A builder whose fresh parameters are drawn from `seed`.
    pub fn builder(&self, seed: u64) -> VarBuilder<'static> {
        let backend = SeededBackend {
            map: self.map.clone(),
            rng: Mutex::new(seed::rng(seed, &[seed::label("init")])),
        };
        VarBuilder::from_backend(Box::new(backend), self.dtype, self.device.clone())
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Trainable variables sorted by name. Batch-norm running statistics
    /// are excluded.
    pub fn trainable(&self) -> Vec<Var> {
        self.named()
            .into_iter()
            .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
            .map(|(_, v)| v)
            .collect()
    }

    /// Trainable variables whose name starts with `prefix`.
    pub fn trainable_under(&self, prefix: &str) -> Vec<Var> {
        self.named()
            .into_iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .filter(|(n, _)| !n.ends_with("running_mean") && !n.ends_with("running_var"))
            .map(|(_, v)| v)
            .collect()
    }

    pub fn named(&self) -> Vec<(String, Var)> {
        let data = self.map.data().lock().unwrap();
        let mut v: Vec<_> = data.iter().map(|(k, v)| (k.clone(), v.clone())).collect();
        v.sort_by(|a, b| a.0.cmp(&b.0));
        v
    }

    pub fn shapes(&self) -> BTreeMap<String, Vec<usize>> {
        self.named()
            .into_iter()
            .map(|(n, v)| (n, v.dims().to_vec()))
            .collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.trainable().iter().map(|v| v.elem_count()).sum()
    }

    /// Overwrites parameters with values from `other` for every name they
    /// share (optionally renaming a prefix). Returns the number copied.
    pub fn copy_from(&self, other: &ParamStore, from_prefix: &str, to_prefix: &str) -> Result<usize> {
        let mine = self.map.data().lock().unwrap();
        let mut copied = 0;
        for (name, var) in other.named() {
            let Some(rest) = name.strip_prefix(from_prefix) else {
                continue;
            };
            if let Some(target) = mine.get(&format!("{to_prefix}{rest}")) {
                target.set(&var.as_tensor().to_dtype(self.dtype)?)?;
                copied += 1;
            }
        }
        Ok(copied)
    }

    fn as_tensors(&self) -> Result<Vec<(String, Tensor)>> {
        Ok(self
            .named()
            .into_iter()
            .map(|(n, v)| (n, v.as_tensor().to_dtype(DType::F32).unwrap()))
            .collect())
    }
}

/// Sidecar written next to every checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointMeta {
    pub kind: String,
    pub config: serde_json::Value,
    pub tensors: BTreeMap<String, Vec<usize>>,
}

/// Writes `<path>` (safetensors, f32) and `<path>.json` (config + shapes).
pub fn save_checkpoint(
    store: &ParamStore,
    path: &Path,
    kind: &str,
    config: serde_json::Value,
) -> Result<Vec<std::path::PathBuf>> {
    let tensors = store.as_tensors()?;
    candle_core::safetensors::save(
        &tensors.into_iter().collect::<std::collections::HashMap<_, _>>(),
        path,
    )?;
    let meta = CheckpointMeta {
        kind: kind.to_string(),
        config,
        tensors: store.shapes(),
    };
    let meta_path = path.with_extension("json");
    fs::write(&meta_path, serde_json::to_string_pretty(&meta)? + "\n")
        .map_err(|e| Error::io(&meta_path, e))?;
    Ok(vec![path.to_path_buf(), meta_path])
}

/// Loads tensors into an already constructed store; names and shapes must
/// match exactly.
pub fn load_checkpoint(store: &ParamStore, path: &Path) -> Result<CheckpointMeta> {
    let meta_path = path.with_extension("json");
    let text = fs::read_to_string(&meta_path).map_err(|e| Error::io(&meta_path, e))?;
    let meta: CheckpointMeta = serde_json::from_str(&text)?;
    let loaded = candle_core::safetensors::load(path, store.device())?;
    let vars = store.named();
    if vars.len() != loaded.len() {
        return Err(Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: format!("checkpoint has {} tensors, model has {}", loaded.len(), vars.len()),
        });
    }
    for (name, var) in vars {
        let t = loaded.get(&name).ok_or_else(|| Error::MissingArtifact {
            path: path.to_path_buf(),
            reason: format!("tensor {name} missing"),
        })?;
        if t.dims() != var.dims() {
            return Err(Error::Shape {
                expected: format!("{name} {:?}", var.dims()),
                got: format!("{:?}", t.dims()),
            });
        }
        var.set(&t.to_dtype(store.dtype())?)?;
    }
    Ok(meta)
}

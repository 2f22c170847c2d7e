use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::DType;
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::config::{hash_json, ExperimentConfig, ThresholdMode};
use super::manifest::{RunManifest, StageRecord, StageStatus};
use super::report::{self, PredictionRow, RowInfo, METRICS_DIR};
use crate::backbones::{build_backbone, Backbone};
use crate::data::{extract_patches, load_core, read_manifest, write_dataset, synth_generate, CoreMeta, Matrix};
use crate::error::{Error, Result};
use crate::finetune::{aggregate_core, finetune_full, train_head, FeatureSet, FinetuneMode, HeadModel};
use crate::metrics::{tune_threshold, FoldMetrics, MetricsReport};
use crate::multiscale::{multiscale_train, CoreSequence, MultiScaleModel};
use crate::nn::{load_checkpoint, save_checkpoint};
use crate::seed;
use crate::splits::{audit_leakage, nested_kfold, undersample_benign, FoldPlan, Role};
use crate::tensor_io::TensorFile;
use crate::vicreg::pretrain;

const STAGE_FILE: &str = "stage.json";

#[derive(Serialize, Deserialize)]
struct StageMarker {
    key: String,
    files: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct FeatureMeta {
    core_id: String,
    patient_id: String,
    label: u8,
    feature_dim: usize,
    validity: Vec<bool>,
}

/// Drives the stages of one experiment inside its output directory. Every
/// stage reads its inputs from disk, so stages can be re-run separately.
pub struct Runner {
    config: ExperimentConfig,
    out: PathBuf,
    manifest: RunManifest,
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::MissingArtifact {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(serde_json::from_str(&text)?)
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn gamma_dir(gamma: f64) -> String {
    format!("gamma_{gamma:.2}")
}

impl Runner {
    /// Validates the config, creates the output directory, writes the
    /// effective config and picks up the manifest of an earlier run.
    pub fn new(config: ExperimentConfig) -> Result<Self> {
        config.validate()?;
        let out = config.output_dir.clone();
        fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
        let mut manifest = RunManifest::read(&out).unwrap_or_default();
        manifest.config_hash = config.hash();
        manifest.seed = config.seed;
        manifest.data_seed = config.dataset.synthetic.seed;
        manifest.k = config.k;
        let mut runner = Self {
            config,
            out,
            manifest,
        };
        let cfg_path = runner.out.join("config.toml");
        write_text(&cfg_path, &runner.config.to_toml()?)?;
        runner.manifest.files.insert(runner.rel(&cfg_path));
        runner.save_manifest()?;
        Ok(runner)
    }

    pub fn config(&self) -> &ExperimentConfig {
        &self.config
    }

    pub fn out_dir(&self) -> &Path {
        &self.out
    }

    pub fn manifest(&self) -> &RunManifest {
        &self.manifest
    }

    fn rel(&self, path: &Path) -> String {
        path.strip_prefix(&self.out)
            .unwrap_or(path)
            .to_string_lossy()
            .replace('\\', "/")
    }

    fn save_manifest(&self) -> Result<()> {
        self.manifest.write(&self.out).map(|_| ())
    }

    fn leg_dir(&self, leg: usize) -> PathBuf {
        self.out.join(format!("leg_{leg}"))
    }

    fn data_dir(&self) -> PathBuf {
        match &self.config.dataset.manifest {
            Some(p) => p.clone(),
            None => self.out.join("data"),
        }
    }

    fn key(&self, parts: serde_json::Value) -> String {
        hash_json(&parts)
    }

    fn data_key(&self) -> String {
        self.key(serde_json::json!({ "stage": "data", "dataset": self.config.dataset }))
    }

    fn split_key(&self) -> String {
        self.key(serde_json::json!({
            "stage": "split", "data": self.data_key(), "k": self.config.k, "seed": self.config.seed,
        }))
    }

    fn pretrain_key(&self, leg: usize) -> String {
        self.key(serde_json::json!({
            "stage": "pretrain", "split": self.split_key(), "leg": leg,
            "backbone": self.config.backbone, "pretrain": self.config.pretrain,
            "enabled": self.config.stages.pretrain,
        }))
    }

    fn finetune_key(&self, leg: usize) -> String {
        self.key(serde_json::json!({
            "stage": "finetune", "pretrain": self.pretrain_key(leg), "finetune": self.config.finetune,
        }))
    }

    fn multiscale_key(&self, leg: usize, gamma: f64) -> String {
        let mut model = self.config.multiscale.model.clone();
        model.gamma = gamma;
        self.key(serde_json::json!({
            "stage": "multiscale", "finetune": self.finetune_key(leg), "model": model,
            "schedule": self.config.multiscale.schedule,
        }))
    }

    /// Runs `body` unless `dir` holds a marker with the same key whose files
    /// all exist. `body` returns the files it wrote.
    fn stage(
        &mut self,
        name: &str,
        leg: Option<usize>,
        gamma: Option<f64>,
        dir: &Path,
        key: String,
        body: impl FnOnce(&Self) -> Result<Vec<PathBuf>>,
    ) -> Result<()> {
        let marker_path = dir.join(STAGE_FILE);
        if let Ok(marker) = read_json::<StageMarker>(&marker_path) {
            if marker.key == key && marker.files.iter().all(|f| self.out.join(f).is_file()) {
                log::info!("{name}{}: reusing earlier outputs", leg.map(|l| format!(" leg {l}")).unwrap_or_default());
                let mut artifacts = marker.files;
                artifacts.push(self.rel(&marker_path));
                self.manifest.record(StageRecord {
                    stage: name.to_string(),
                    leg,
                    gamma,
                    key,
                    status: StageStatus::Resumed,
                    artifacts,
                    error: None,
                });
                return self.save_manifest();
            }
        }
        log::info!("{name}{}: running", leg.map(|l| format!(" leg {l}")).unwrap_or_default());
        // a stale marker must not survive a failed rerun
        let _ = fs::remove_file(&marker_path);
        match body(self) {
            Ok(files) => {
                let files: Vec<String> = files.iter().map(|f| self.rel(f)).collect();
                write_json(
                    &marker_path,
                    &StageMarker {
                        key: key.clone(),
                        files: files.clone(),
                    },
                )?;
                let mut artifacts = files;
                artifacts.push(self.rel(&marker_path));
                self.manifest.record(StageRecord {
                    stage: name.to_string(),
                    leg,
                    gamma,
                    key,
                    status: StageStatus::Completed,
                    artifacts,
                    error: None,
                });
                self.save_manifest()
            }
            Err(e) => {
                self.manifest.record(StageRecord {
                    stage: name.to_string(),
                    leg,
                    gamma,
                    key,
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    error: Some(e.to_string()),
                });
                self.save_manifest()?;
                Err(e)
            }
        }
    }

    /// Generates (or registers) the dataset.
    pub fn data(&mut self) -> Result<()> {
        let key = self.data_key();
        if self.config.dataset.manifest.is_some() {
            read_manifest(&self.data_dir())?;
            self.manifest.record(StageRecord {
                stage: "data".into(),
                leg: None,
                gamma: None,
                key,
                status: StageStatus::External,
                artifacts: Vec::new(),
                error: None,
            });
            return self.save_manifest();
        }
        let dir = self.data_dir();
        self.stage("data", None, None, &dir.clone(), key, |r| {
            let ds = synth_generate(&r.config.dataset.synthetic)?;
            write_dataset(&dir, &ds, &r.config.dataset.extraction, r.config.dataset.write_rois)
        })
    }

    fn cores(&self) -> Result<Vec<CoreMeta>> {
        Ok(read_manifest(&self.data_dir())?.cores)
    }

    pub fn split(&mut self) -> Result<FoldPlan> {
        let dir = self.out.join("splits");
        let path = dir.join("fold_plan.json");
        let key = self.split_key();
        self.stage("split", None, None, &dir, key, |r| {
            let cores = r.cores()?;
            let mut seen = BTreeSet::new();
            let patients: Vec<(String, u32)> = cores
                .iter()
                .filter(|c| seen.insert(c.patient_id.clone()))
                .map(|c| (c.patient_id.clone(), c.center_id))
                .collect();
            let plan = nested_kfold(&patients, r.config.k, r.config.seed)?;
            let audit = audit_leakage(&plan, &cores.iter().map(|c| &c.patient_id).collect::<Vec<_>>());
            if !audit.is_clean() {
                return Err(Error::invalid(format!("patient leakage: {:?}", audit.patients())));
            }
            write_json(&path, &plan)?;
            Ok(vec![path.clone()])
        })?;
        self.manifest.fold_plan = Some(self.rel(&path));
        self.save_manifest()?;
        self.fold_plan()
    }

    pub fn fold_plan(&self) -> Result<FoldPlan> {
        read_json(&self.out.join("splits").join("fold_plan.json"))
    }

    /// Cores of `leg` holding `role`, in dataset order.
    fn cores_in(&self, plan: &FoldPlan, leg: usize, role: Role) -> Result<Vec<CoreMeta>> {
        let patients = plan.patients_in(leg, role);
        Ok(self
            .cores()?
            .into_iter()
            .filter(|c| patients.contains(&c.patient_id))
            .collect())
    }

    fn backbone_seed(&self, leg: usize) -> u64 {
        seed::derive(self.config.seed, &[seed::label("backbone"), leg as u64])
    }

    fn encoder_checkpoint(&self, leg: usize) -> PathBuf {
        self.leg_dir(leg).join("pretrain").join("encoder.safetensors")
    }

    pub fn pretrain(&mut self, leg: usize) -> Result<()> {
        if !self.config.stages.pretrain {
            return Ok(());
        }
        let plan = self.fold_plan()?;
        check_leg(&plan, leg)?;
        let dir = self.leg_dir(leg).join("pretrain");
        let key = self.pretrain_key(leg);
        self.stage("pretrain", Some(leg), None, &dir.clone(), key, |r| {
            let cfg = &r.config.pretrain;
            let train = r.cores_in(&plan, leg, Role::Train)?;
            let n_patches = r.config.dataset.extraction.n_patches;
            let total = train.len() * n_patches;
            let want = cfg.images_per_leg.min(total);
            let mut rng = seed::rng(r.config.seed, &[seed::label("pretrain-images"), leg as u64]);
            let mut picks: Vec<usize> = sample(&mut rng, total, want).into_vec();
            picks.sort_unstable();
            let mut by_core: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
            for p in picks {
                by_core.entry(p / n_patches).or_default().push(p % n_patches);
            }
            let mut images = Vec::with_capacity(want);
            for (ci, idx) in by_core {
                let core = load_core(&r.data_dir(), &train[ci].core_id)?;
                let patches = extract_patches(&core, &r.config.dataset.extraction)?;
                images.extend(idx.into_iter().map(|i| patches[i].pixels.clone()));
            }
            let encoder = build_backbone(&r.config.backbone, r.backbone_seed(leg))?;
            let outcome = pretrain(
                &encoder,
                &cfg.projector,
                &images,
                &cfg.augmentation,
                &cfg.weights,
                &cfg.schedule,
                seed::derive(r.config.seed, &[seed::label("pretrain"), leg as u64]),
            )?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut files = save_checkpoint(
                encoder.params(),
                &r.encoder_checkpoint(leg),
                "encoder",
                serde_json::to_value(&r.config.backbone)?,
            )?;
            let hist = dir.join("history.json");
            write_json(&hist, &outcome.history)?;
            files.push(hist);
            Ok(files)
        })
    }

    /// Encoder for `leg`: pre-trained weights if that stage ran, otherwise
    /// the seeded initialization.
    fn encoder(&self, leg: usize) -> Result<Backbone> {
        let encoder = build_backbone(&self.config.backbone, self.backbone_seed(leg))?;
        if self.config.stages.pretrain {
            load_checkpoint(encoder.params(), &self.encoder_checkpoint(leg))?;
        }
        Ok(encoder)
    }

    fn features_dir(&self, leg: usize) -> PathBuf {
        self.leg_dir(leg).join("features")
    }

    fn write_features(&self, leg: usize, encoder: &Backbone, cores: &[CoreMeta]) -> Result<Vec<PathBuf>> {
        let dir = self.features_dir(leg);
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let mut files = Vec::new();
        for meta in cores {
            let core = load_core(&self.data_dir(), &meta.core_id)?;
            let patches = extract_patches(&core, &self.config.dataset.extraction)?;
            let refs: Vec<&Matrix> = patches.iter().map(|p| &p.pixels).collect();
            let values = encoder.encode_patches(&refs, 16)?;
            let bin = dir.join(format!("{}.bin", meta.core_id));
            TensorFile::new(vec![patches.len(), encoder.feature_dim()], values)?.write(&bin)?;
            let json = dir.join(format!("{}.json", meta.core_id));
            write_json(
                &json,
                &FeatureMeta {
                    core_id: meta.core_id.clone(),
                    patient_id: meta.patient_id.clone(),
                    label: meta.label,
                    feature_dim: encoder.feature_dim(),
                    validity: vec![true; patches.len()],
                },
            )?;
            files.push(bin);
            files.push(json);
        }
        Ok(files)
    }

    fn read_sequence(&self, leg: usize, core_id: &str) -> Result<CoreSequence> {
        let dir = self.features_dir(leg);
        let meta: FeatureMeta = read_json(&dir.join(format!("{core_id}.json")))?;
        let t = TensorFile::read(&dir.join(format!("{core_id}.bin")))?;
        CoreSequence::new(core_id, meta.feature_dim, t.data, meta.validity, meta.label)
    }

    /// Balanced training cores of a leg, as chosen by the fine-tuning stage.
    fn balanced_train(&self, plan: &FoldPlan, leg: usize) -> Result<Vec<CoreMeta>> {
        let train = self.cores_in(plan, leg, Role::Train)?;
        if self.config.finetune.balance {
            undersample_benign(&train, seed::derive(self.config.seed, &[seed::label("balance"), leg as u64]))
        } else {
            Ok(train)
        }
    }

    fn eval_cores(&self, plan: &FoldPlan, leg: usize) -> Result<Vec<(CoreMeta, Role)>> {
        let mut out = Vec::new();
        for role in [Role::Validation, Role::Test] {
            out.extend(self.cores_in(plan, leg, role)?.into_iter().map(|c| (c, role)));
        }
        Ok(out)
    }

    pub fn finetune(&mut self, leg: usize) -> Result<()> {
        let plan = self.fold_plan()?;
        check_leg(&plan, leg)?;
        let dir = self.leg_dir(leg).join("finetune");
        let key = self.finetune_key(leg);
        self.stage("finetune", Some(leg), None, &dir.clone(), key, |r| {
            let cfg = &r.config.finetune;
            let encoder = r.encoder(leg)?;
            let train = r.balanced_train(&plan, leg)?;
            let head_seed = seed::derive(r.config.seed, &[seed::label("head"), leg as u64]);
            let model = HeadModel::new(encoder.feature_dim(), &cfg.head, head_seed, DType::F32)?;
            let train_seed = seed::derive(r.config.seed, &[seed::label("finetune"), leg as u64]);
            let all = r.cores()?;
            let mut files = Vec::new();
            let history = match cfg.mode {
                FinetuneMode::Linear => {
                    files.extend(r.write_features(leg, &encoder, &all)?);
                    let set = r.feature_set(leg, &train)?;
                    train_head(&model, &set, &cfg.schedule, train_seed)?
                }
                FinetuneMode::Full => {
                    let mut patches = Vec::new();
                    let mut labels = Vec::new();
                    for meta in &train {
                        let core = load_core(&r.data_dir(), &meta.core_id)?;
                        for p in extract_patches(&core, &r.config.dataset.extraction)? {
                            labels.push(p.weak_label);
                            patches.push(p.pixels);
                        }
                    }
                    let h = finetune_full(&encoder, &model, &patches, &labels, &cfg.schedule, train_seed)?;
                    drop(patches);
                    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
                    files.extend(save_checkpoint(
                        encoder.params(),
                        &dir.join("encoder.safetensors"),
                        "encoder",
                        serde_json::to_value(&r.config.backbone)?,
                    )?);
                    files.extend(r.write_features(leg, &encoder, &all)?);
                    h
                }
            };
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            files.extend(save_checkpoint(
                &model.store,
                &dir.join("head.safetensors"),
                "roi_head",
                serde_json::json!({ "feature_dim": encoder.feature_dim(), "head": cfg.head }),
            )?);
            let hist = dir.join("history.json");
            write_json(&hist, &history)?;
            files.push(hist);
            let train_list = dir.join("train_cores.json");
            write_json(&train_list, &train.iter().map(|c| &c.core_id).collect::<Vec<_>>())?;
            files.push(train_list);

            let mut preds = Vec::new();
            let mut roi_csv = String::from("core_id");
            for i in 0..r.config.dataset.extraction.n_patches {
                roi_csv += &format!(",p{i:02}");
            }
            roi_csv.push('\n');
            for (meta, role) in r.eval_cores(&plan, leg)? {
                let seq = r.read_sequence(leg, &meta.core_id)?;
                let x = candle_core::Tensor::from_vec(
                    seq.features.clone(),
                    (seq.len(), seq.feature_dim),
                    model.store.device(),
                )?;
                let probs = crate::finetune::predict_features(&model.head, &x)?;
                roi_csv += &meta.core_id;
                for p in &probs {
                    roi_csv += &format!(",{p}");
                }
                roi_csv.push('\n');
                preds.push(PredictionRow {
                    core_id: meta.core_id.clone(),
                    probability: aggregate_core(&probs)?,
                    label: meta.label,
                    fold: plan.assignments()[&meta.patient_id],
                    role,
                });
            }
            let pred_path = dir.join("predictions.csv");
            write_text(&pred_path, &report::predictions_csv(&preds))?;
            let roi_path = dir.join("roi_probabilities.csv");
            write_text(&roi_path, &roi_csv)?;
            files.push(pred_path);
            files.push(roi_path);
            Ok(files)
        })
    }

    fn feature_set(&self, leg: usize, cores: &[CoreMeta]) -> Result<FeatureSet> {
        let mut values = Vec::new();
        let mut labels = Vec::new();
        let mut dim = 0;
        for meta in cores {
            let seq = self.read_sequence(leg, &meta.core_id)?;
            dim = seq.feature_dim;
            labels.extend(std::iter::repeat_n(meta.label, seq.len()));
            values.extend(seq.features);
        }
        FeatureSet::new(dim, values, labels)
    }

    pub fn multiscale(&mut self, leg: usize, gamma: f64) -> Result<()> {
        let plan = self.fold_plan()?;
        check_leg(&plan, leg)?;
        let dir = self.leg_dir(leg).join("multiscale").join(gamma_dir(gamma));
        let key = self.multiscale_key(leg, gamma);
        self.stage("multiscale", Some(leg), Some(gamma), &dir.clone(), key, |r| {
            let ft_dir = r.leg_dir(leg).join("finetune");
            let train_ids: Vec<String> = read_json(&ft_dir.join("train_cores.json"))?;
            let train = train_ids
                .iter()
                .map(|id| r.read_sequence(leg, id))
                .collect::<Result<Vec<_>>>()?;
            let feature_dim = train.first().map(|s| s.feature_dim).ok_or_else(|| Error::invalid("no training cores"))?;
            let mut cfg = r.config.multiscale.model.clone();
            cfg.gamma = gamma;
            let head = HeadModel::new(feature_dim, &r.config.finetune.head, 0, DType::F32)?;
            load_checkpoint(&head.store, &ft_dir.join("head.safetensors"))?;
            let ms_seed = seed::derive(r.config.seed, &[seed::label("multiscale"), leg as u64]);
            let (model, history) =
                multiscale_train(&train, &cfg, &r.config.multiscale.schedule, Some(&head), ms_seed)?;
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            let mut files = save_checkpoint(
                &model.store,
                &dir.join("model.safetensors"),
                "multiscale",
                serde_json::json!({ "feature_dim": feature_dim, "model": cfg }),
            )?;
            let hist = dir.join("history.json");
            write_json(&hist, &history)?;
            files.push(hist);
            files.push(r.predict_multiscale(&plan, leg, &model, &dir)?);
            Ok(files)
        })
    }

    fn predict_multiscale(&self, plan: &FoldPlan, leg: usize, model: &MultiScaleModel, dir: &Path) -> Result<PathBuf> {
        let eval = self.eval_cores(plan, leg)?;
        let seqs = eval
            .iter()
            .map(|(m, _)| self.read_sequence(leg, &m.core_id))
            .collect::<Result<Vec<_>>>()?;
        let probs = model.predict(&seqs.iter().collect::<Vec<_>>())?;
        let assignments = plan.assignments();
        let rows: Vec<PredictionRow> = eval
            .iter()
            .zip(probs)
            .map(|((meta, role), p)| PredictionRow {
                core_id: meta.core_id.clone(),
                probability: p,
                label: meta.label,
                fold: assignments[&meta.patient_id],
                role: *role,
            })
            .collect();
        let path = dir.join("predictions.csv");
        write_text(&path, &report::predictions_csv(&rows))?;
        Ok(path)
    }

    /// Rows this configuration produces, with the prediction file of each
    /// leg relative to the leg directory.
    fn rows(&self) -> Vec<(RowInfo, PathBuf)> {
        let backbone = self.config.backbone.variant.display_name().to_string();
        let mut rows = Vec::new();
        if self.config.stages.roi_finetune {
            rows.push((
                RowInfo {
                    slug: format!("roi_{}", self.config.finetune.mode.label().to_lowercase()),
                    backbone: backbone.clone(),
                    finetuning: self.config.finetune.mode.label().to_string(),
                    scale: 0,
                    gamma: None,
                },
                PathBuf::from("finetune/predictions.csv"),
            ));
        }
        if self.config.stages.multiscale {
            for g in self.config.multiscale.gamma_values() {
                let finetuning = if g == 1.0 {
                    "BERT".to_string()
                } else {
                    format!("BERT + MO (γ={g:.2})")
                };
                rows.push((
                    RowInfo {
                        slug: format!("multiscale_{}", gamma_dir(g)),
                        backbone: backbone.clone(),
                        finetuning,
                        scale: 1,
                        gamma: Some(g),
                    },
                    Path::new("multiscale").join(gamma_dir(g)).join("predictions.csv"),
                ));
            }
        }
        rows
    }

    /// Per-fold metrics for every configured row from the legs whose
    /// predictions exist. Legs without predictions are skipped and show up
    /// as missing folds in the report.
    pub fn evaluate(&mut self) -> Result<()> {
        let plan = self.fold_plan()?;
        let mut written = Vec::new();
        for (info, rel) in self.rows() {
            let dir = self.out.join(METRICS_DIR).join(&info.slug);
            let info_path = dir.join("row.json");
            write_json(&info_path, &info)?;
            written.push(info_path);
            for leg in 0..plan.k {
                let path = self.leg_dir(leg).join(&rel);
                if !path.is_file() {
                    continue;
                }
                let rows = report::read_predictions(&path)?;
                let pick = |role: Role| -> (Vec<f64>, Vec<u8>) {
                    rows.iter()
                        .filter(|r| r.role == role)
                        .map(|r| (r.probability, r.label))
                        .unzip()
                };
                let (scores, labels) = pick(Role::Test);
                let threshold = match self.config.evaluation.threshold {
                    ThresholdMode::Fixed => 0.5,
                    ThresholdMode::Validation => {
                        let (vs, vl) = pick(Role::Validation);
                        tune_threshold(&vs, &vl)?
                    }
                };
                let metrics = FoldMetrics::compute(&scores, &labels, threshold)?;
                let fold_path = dir.join(format!("fold_{leg}.json"));
                write_json(&fold_path, &report::FoldRecord { fold: leg, threshold, metrics })?;
                written.push(fold_path);
            }
        }
        let name = "evaluate";
        let rels: Vec<String> = written.iter().map(|p| self.rel(p)).collect();
        self.manifest.record(StageRecord {
            stage: name.into(),
            leg: None,
            gamma: None,
            key: self.key(serde_json::json!({ "evaluation": self.config.evaluation })),
            status: StageStatus::Completed,
            artifacts: rels,
            error: None,
        });
        self.save_manifest()
    }

    /// Writes `report.md`, `report.csv` and one per-fold CSV per row.
    pub fn report(&mut self) -> Result<Vec<MetricsReport>> {
        let result = report::emit_report(&self.out);
        let (reports, files) = match result {
            Ok(v) => v,
            Err(e) => {
                self.manifest.record(StageRecord {
                    stage: "report".into(),
                    leg: None,
                    gamma: None,
                    key: String::new(),
                    status: StageStatus::Failed,
                    artifacts: Vec::new(),
                    error: Some(e.to_string()),
                });
                self.save_manifest()?;
                return Err(e);
            }
        };
        let rels: Vec<String> = files.iter().map(|p| self.rel(p)).collect();
        self.manifest.record(StageRecord {
            stage: "report".into(),
            leg: None,
            gamma: None,
            key: String::new(),
            status: StageStatus::Completed,
            artifacts: rels,
            error: None,
        });
        self.save_manifest()?;
        Ok(reports)
    }

    /// Every enabled stage for every leg, then evaluation and report.
    pub fn run_all(&mut self) -> Result<Vec<MetricsReport>> {
        self.data()?;
        let plan = self.split()?;
        for leg in 0..plan.k {
            self.pretrain(leg)?;
            if self.config.stages.roi_finetune {
                self.finetune(leg)?;
            }
            if self.config.stages.multiscale {
                for g in self.config.multiscale.gamma_values() {
                    self.multiscale(leg, g)?;
                }
            }
        }
        self.evaluate()?;
        self.report()
    }
}

fn check_leg(plan: &FoldPlan, leg: usize) -> Result<()> {
    if leg >= plan.k {
        return Err(Error::invalid(format!("leg {leg} out of range for k = {}", plan.k)));
    }
    Ok(())
}

/// Runs every enabled stage of `config` and returns the metrics reports.
pub fn run_experiment(config: ExperimentConfig) -> Result<Vec<MetricsReport>> {
    Runner::new(config)?.run_all()
}

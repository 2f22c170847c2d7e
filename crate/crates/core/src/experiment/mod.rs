//! Configuration-driven orchestration of the whole workflow and the run
//! directory it produces.
//!
//! ```text
//! <out>/config.toml                     effective configuration
//! <out>/manifest.json                   stage records and written files
//! <out>/data/                           synthetic dataset (if generated)
//! <out>/splits/fold_plan.json
//! <out>/leg_<i>/pretrain/               encoder checkpoint, loss history
//! <out>/leg_<i>/features/<core>.bin     [positions, feature_dim] + .json
//! <out>/leg_<i>/finetune/               head checkpoint, predictions
//! <out>/leg_<i>/multiscale/gamma_<g>/   core model checkpoint, predictions
//! <out>/metrics/<row>/                  per-fold metrics
//! <out>/report.md, <out>/report.csv
//! ```

mod config;
mod manifest;
mod report;
mod run;

pub use config::{
    DatasetConfig, EvaluationConfig, ExperimentConfig, FinetuneConfig, MultiscaleConfig,
    PretrainConfig, Stages, ThresholdMode,
};
pub use manifest::{RunManifest, StageRecord, StageStatus, MANIFEST_FILE};
pub use report::{emit_report, load_reports, read_predictions, PredictionRow, RowInfo};
pub use run::{run_experiment, Runner};

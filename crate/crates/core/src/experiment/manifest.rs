use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Completed,
    /// Outputs of an earlier run with the same stage key were reused.
    Resumed,
    Failed,
    /// Inputs live outside the run directory.
    External,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leg: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
    pub key: String,
    pub status: StageStatus,
    pub artifacts: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl StageRecord {
    fn same_slot(&self, other: &StageRecord) -> bool {
        self.stage == other.stage && self.leg == other.leg && self.gamma == other.gamma
    }
}

/// Run-level record: config hash, seeds, split file, every stage outcome and
/// every file written under the run directory (paths relative to it).
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub data_seed: u64,
    pub k: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fold_plan: Option<String>,
    pub stages: Vec<StageRecord>,
    pub files: BTreeSet<String>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl RunManifest {
    pub fn read(run_dir: &Path) -> Result<Self> {
        let path = run_dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn write(&self, run_dir: &Path) -> Result<PathBuf> {
        let path = run_dir.join(MANIFEST_FILE);
        fs::write(&path, serde_json::to_string_pretty(self)? + "\n").map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }

    /// Replaces any earlier record for the same stage slot.
    pub fn record(&mut self, record: StageRecord) {
        self.files.extend(record.artifacts.iter().cloned());
        self.stages.retain(|r| !r.same_slot(&record));
        self.stages.push(record);
    }

    pub fn failures(&self) -> Vec<&StageRecord> {
        self.stages.iter().filter(|r| r.status == StageStatus::Failed).collect()
    }
}

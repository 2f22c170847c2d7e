use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::{csv_table, markdown_table, FoldMetrics, MetricsReport};
use crate::splits::{FoldPlan, Role};

pub(crate) const METRICS_DIR: &str = "metrics";

/// One core-level prediction as stored in `predictions.csv`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub core_id: String,
    pub probability: f64,
    pub label: u8,
    pub fold: usize,
    pub role: Role,
}

pub(crate) fn predictions_csv(rows: &[PredictionRow]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r).expect("in-memory csv write");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv flush")).expect("csv is utf-8")
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let bad = |reason: String| Error::MissingArtifact {
        path: path.to_path_buf(),
        reason,
    };
    let mut r = csv::Reader::from_path(path).map_err(|e| bad(e.to_string()))?;
    r.deserialize().map(|row| row.map_err(|e| bad(e.to_string()))).collect()
}

/// Identity and sort position of one report row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RowInfo {
    pub slug: String,
    pub backbone: String,
    pub finetuning: String,
    /// 0 for ROI-scale rows, 1 for core-scale rows.
    pub scale: u8,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub(crate) struct FoldRecord {
    pub fold: usize,
    pub threshold: f64,
    pub metrics: FoldMetrics,
}

/// Assembles one [`MetricsReport`] per row from the per-fold files of a run
/// directory. Fails when the run has no metrics or a row lacks any fold.
pub fn load_reports(run_dir: &Path) -> Result<Vec<MetricsReport>> {
    let plan_path = run_dir.join("splits").join("fold_plan.json");
    let plan: FoldPlan = fs::read_to_string(&plan_path)
        .map_err(|e| Error::MissingArtifact {
            path: plan_path.clone(),
            reason: e.to_string(),
        })
        .and_then(|t| Ok(serde_json::from_str(&t)?))?;
    let metrics_dir = run_dir.join(METRICS_DIR);
    let mut rows: Vec<RowInfo> = Vec::new();
    if let Ok(entries) = fs::read_dir(&metrics_dir) {
        for e in entries {
            let info = e.map_err(|e| Error::io(&metrics_dir, e))?.path().join("row.json");
            if info.is_file() {
                let text = fs::read_to_string(&info).map_err(|e| Error::io(&info, e))?;
                rows.push(serde_json::from_str(&text)?);
            }
        }
    }
    if rows.is_empty() {
        return Err(Error::MissingArtifact {
            path: metrics_dir,
            reason: "no metrics in run directory".into(),
        });
    }
    rows.sort_by(|a, b| {
        a.scale
            .cmp(&b.scale)
            .then(b.gamma.unwrap_or(1.0).total_cmp(&a.gamma.unwrap_or(1.0)))
            .then(a.slug.cmp(&b.slug))
    });
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for info in &rows {
        let dir = metrics_dir.join(&info.slug);
        let mut thresholds = Vec::new();
        let mut folds = Vec::new();
        let mut absent = Vec::new();
        for f in 0..plan.k {
            let path = dir.join(format!("fold_{f}.json"));
            match fs::read_to_string(&path) {
                Ok(text) => {
                    let rec: FoldRecord = serde_json::from_str(&text)?;
                    thresholds.push(rec.threshold);
                    folds.push(rec.metrics);
                }
                Err(_) => absent.push(f),
            }
        }
        if absent.is_empty() {
            reports.push(MetricsReport::new(&info.backbone, &info.finetuning, thresholds, folds)?);
        } else {
            missing.push(format!("{}: folds {absent:?}", info.slug));
        }
    }
    if !missing.is_empty() {
        return Err(Error::MissingArtifact {
            path: metrics_dir,
            reason: format!("missing metrics ({})", missing.join("; ")),
        });
    }
    Ok(reports)
}

/// Writes `report.md`, `report.csv` and `metrics/<row>/per_fold.csv`;
/// returns the reports and the files written.
pub fn emit_report(run_dir: &Path) -> Result<(Vec<MetricsReport>, Vec<PathBuf>)> {
    let reports = load_reports(run_dir)?;
    let mut written = Vec::new();
    let mut entries: Vec<_> = fs::read_dir(run_dir.join(METRICS_DIR))
        .map_err(|e| Error::io(run_dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join("row.json").is_file())
        .collect();
    entries.sort();
    for dir in entries {
        let text = fs::read_to_string(dir.join("row.json")).map_err(|e| Error::io(&dir, e))?;
        let info: RowInfo = serde_json::from_str(&text)?;
        if let Some(r) = reports
            .iter()
            .find(|r| r.backbone == info.backbone && r.finetuning == info.finetuning)
        {
            let path = dir.join("per_fold.csv");
            fs::write(&path, r.per_fold_csv()).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    let md = run_dir.join("report.md");
    fs::write(&md, markdown_table(&reports)).map_err(|e| Error::io(&md, e))?;
    let csv = run_dir.join("report.csv");
    fs::write(&csv, csv_table(&reports)).map_err(|e| Error::io(&csv, e))?;
    written.push(md);
    written.push(csv);
    Ok((reports, written))
}

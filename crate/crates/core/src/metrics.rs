//! AUROC, threshold metrics and cross-fold aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Shape {
            expected: format!("{} labels", scores.len()),
            got: labels.len().to_string(),
        });
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::invalid("NaN score"));
    }
    let pos = labels.iter().filter(|&&l| l == 1).count();
    if labels.iter().any(|&l| l > 1) {
        return Err(Error::invalid("labels must be 0 or 1"));
    }
    Ok((pos, labels.len() - pos))
}

/// Mann–Whitney AUROC with ties counted as one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::AurocUndefined);
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // average ranks (1-based) over tie groups, summed for positives
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * order[i..=j].iter().filter(|&&k| labels[k] == 1).count() as f64;
        i = j + 1;
    }
    let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
    Ok(u / (pos * neg) as f64)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Confusion {
    pub sensitivity: f64,
    pub specificity: f64,
    pub balanced_accuracy: f64,
}

/// Positive iff `score >= threshold`.
pub fn confusion_metrics(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Confusion> {
    let (pos, neg) = check_inputs(scores, labels)?;
    if pos == 0 || neg == 0 {
        return Err(Error::SingleClass);
    }
    let mut tp = 0usize;
    let mut tn = 0usize;
    for (&s, &l) in scores.iter().zip(labels) {
        let predicted = s >= threshold;
        match (l, predicted) {
            (1, true) => tp += 1,
            (0, false) => tn += 1,
            _ => {}
        }
    }
    let sensitivity = tp as f64 / pos as f64;
    let specificity = tn as f64 / neg as f64;
    Ok(Confusion {
        sensitivity,
        specificity,
        balanced_accuracy: (sensitivity + specificity) / 2.0,
    })
}

/// Threshold among the observed scores (and 0.5) that maximizes balanced
/// accuracy; ties go to the value closest to 0.5.
pub fn tune_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let mut candidates: Vec<f64> = scores.to_vec();
    candidates.push(0.5);
    candidates.sort_by(f64::total_cmp);
    candidates.dedup();
    let mut best: (f64, f64) = (f64::NEG_INFINITY, 0.5);
    for t in candidates {
        let ba = confusion_metrics(scores, labels, t)?.balanced_accuracy;
        let better = ba > best.0 + 1e-12
            || ((ba - best.0).abs() <= 1e-12 && (t - 0.5).abs() < (best.1 - 0.5).abs());
        if better {
            best = (ba, t);
        }
    }
    Ok(best.1)
}

/// Metrics of one test fold, in percent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub auroc: f64,
    pub balanced_accuracy: f64,
    pub sensitivity: f64,
    pub specificity: f64,
}

impl FoldMetrics {
    pub fn compute(scores: &[f64], labels: &[u8], threshold: f64) -> Result<Self> {
        let c = confusion_metrics(scores, labels, threshold)?;
        Ok(Self {
            auroc: 100.0 * auroc(scores, labels)?,
            balanced_accuracy: 100.0 * c.balanced_accuracy,
            sensitivity: 100.0 * c.sensitivity,
            specificity: 100.0 * c.specificity,
        })
    }

    fn values(&self) -> [f64; 4] {
        [self.auroc, self.balanced_accuracy, self.sensitivity, self.specificity]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Sample (N−1) standard deviation; a single value has std 0.
    pub fn of(values: &[f64]) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("no values to summarize"));
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() == 1 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Ok(Self { mean, std })
    }

    /// `"78.0 ± 1.58"`: mean to one decimal, std to three significant
    /// figures.
    pub fn cell(&self) -> String {
        format!("{:.1} ± {}", self.mean, three_significant(self.std))
    }
}

fn three_significant(x: f64) -> String {
    if x == 0.0 || !x.is_finite() {
        return format!("{x:.2}");
    }
    let magnitude = x.abs().log10().floor() as i32;
    let decimals = (2 - magnitude).max(0) as usize;
    format!("{x:.decimals$}")
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub auroc: MeanStd,
    pub balanced_accuracy: MeanStd,
    pub sensitivity: MeanStd,
    pub specificity: MeanStd,
}

pub fn cross_fold_summary(per_fold: &[FoldMetrics]) -> Result<Summary> {
    if per_fold.is_empty() {
        return Err(Error::invalid("cross-fold summary needs at least one fold"));
    }
    let col = |i: usize| MeanStd::of(&per_fold.iter().map(|f| f.values()[i]).collect::<Vec<_>>());
    Ok(Summary {
        auroc: col(0)?,
        balanced_accuracy: col(1)?,
        sensitivity: col(2)?,
        specificity: col(3)?,
    })
}

/// Per-fold metrics of one (backbone, fine-tuning) configuration.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub backbone: String,
    pub finetuning: String,
    /// Threshold per fold (0.5 unless tuned on validation).
    pub thresholds: Vec<f64>,
    pub per_fold: Vec<FoldMetrics>,
    pub aggregate: Summary,
}

impl MetricsReport {
    pub fn new(backbone: &str, finetuning: &str, thresholds: Vec<f64>, per_fold: Vec<FoldMetrics>) -> Result<Self> {
        if thresholds.len() != per_fold.len() {
            return Err(Error::invalid("one threshold per fold required"));
        }
        Ok(Self {
            backbone: backbone.to_string(),
            finetuning: finetuning.to_string(),
            aggregate: cross_fold_summary(&per_fold)?,
            thresholds,
            per_fold,
        })
    }

    /// `fold,threshold,auroc,balanced_accuracy,sensitivity,specificity`.
    pub fn per_fold_csv(&self) -> String {
        let mut s = String::from("fold,threshold,auroc,balanced_accuracy,sensitivity,specificity\n");
        for (i, (f, t)) in self.per_fold.iter().zip(&self.thresholds).enumerate() {
            s += &format!(
                "{i},{t:.6},{:.6},{:.6},{:.6},{:.6}\n",
                f.auroc, f.balanced_accuracy, f.sensitivity, f.specificity
            );
        }
        s
    }
}

const HEADER: [&str; 6] = ["Backbone", "Finetuning", "AUROC", "Bal. Accuracy", "Sensitivity", "Specificity"];

fn cells(r: &MetricsReport) -> [String; 6] {
    let a = &r.aggregate;
    [
        r.backbone.clone(),
        r.finetuning.clone(),
        a.auroc.cell(),
        a.balanced_accuracy.cell(),
        a.sensitivity.cell(),
        a.specificity.cell(),
    ]
}

pub fn markdown_table(reports: &[MetricsReport]) -> String {
    let mut s = format!("| {} |\n", HEADER.join(" | "));
    s += &format!("|{}\n", "---|".repeat(HEADER.len()));
    for r in reports {
        s += &format!("| {} |\n", cells(r).join(" | "));
    }
    s
}

pub fn csv_table(reports: &[MetricsReport]) -> String {
    let mut s = HEADER.join(",") + "\n";
    for r in reports {
        let row: Vec<String> = cells(r)
            .into_iter()
            .map(|c| if c.contains(',') { format!("\"{c}\"") } else { c })
            .collect();
        s += &(row.join(",") + "\n");
    }
    s
}

//! MPJPE, PCK, AUC and per-action aggregation. All distances in millimetres.
//!
//! PCK counts a joint as correct when its error is `<=` the threshold, so a
//! perfect prediction scores 100 at every threshold including 0. AUC is the
//! mean PCK over the 31 thresholds `0, 5, …, 150` mm.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::Serialize;

use crate::data::Pose3;
use crate::error::{Error, Result};

pub const PCK_THRESHOLD_MM: f64 = 150.0;
pub const AUC_STEP_MM: f64 = 5.0;
pub const AUC_POINTS: usize = 31;

/// Euclidean error of every (sample, joint) pair, sample-major.
pub fn joint_errors(pred: &[Pose3], gt: &[Pose3]) -> Result<Vec<f64>> {
    if pred.len() != gt.len() {
        return Err(Error::Validation(format!("{} predictions for {} targets", pred.len(), gt.len())));
    }
    let mut out = Vec::with_capacity(pred.len() * gt.first().map_or(0, Vec::len));
    for (i, (p, g)) in pred.iter().zip(gt).enumerate() {
        if p.len() != g.len() {
            return Err(Error::Validation(format!("sample {i}: {} predicted joints, {} targets", p.len(), g.len())));
        }
        out.extend(p.iter().zip(g).map(|(a, b)| {
            let d = [a[0] - b[0], a[1] - b[1], a[2] - b[2]];
            (d[0] * d[0] + d[1] * d[1] + d[2] * d[2]).sqrt()
        }));
    }
    Ok(out)
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub fn mpjpe(pred: &[Pose3], gt: &[Pose3]) -> Result<f64> {
    Ok(mean(&joint_errors(pred, gt)?))
}

/// MPJPE of each sample.
pub fn per_sample_mpjpe(pred: &[Pose3], gt: &[Pose3]) -> Result<Vec<f64>> {
    let errors = joint_errors(pred, gt)?;
    let j = gt.first().map_or(1, |p| p.len().max(1));
    Ok(errors.chunks(j).map(mean).collect())
}

fn pck_of(errors: &[f64], threshold: f64) -> f64 {
    if errors.is_empty() {
        return 0.0;
    }
    100.0 * errors.iter().filter(|&&e| e <= threshold).count() as f64 / errors.len() as f64
}

fn auc_of(errors: &[f64]) -> f64 {
    (0..AUC_POINTS).map(|i| pck_of(errors, i as f64 * AUC_STEP_MM)).sum::<f64>() / AUC_POINTS as f64
}

/// Percentage of joints within `threshold_mm`.
pub fn pck(pred: &[Pose3], gt: &[Pose3], threshold_mm: f64) -> Result<f64> {
    if threshold_mm.is_nan() || threshold_mm < 0.0 {
        return Err(Error::Validation(format!("PCK threshold {threshold_mm} must be non-negative")));
    }
    Ok(pck_of(&joint_errors(pred, gt)?, threshold_mm))
}

pub fn auc(pred: &[Pose3], gt: &[Pose3]) -> Result<f64> {
    Ok(auc_of(&joint_errors(pred, gt)?))
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub mpjpe_mm: f64,
    pub pck_pct: f64,
    pub auc_pct: f64,
    pub per_sample: Vec<f64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub per_action: Option<BTreeMap<String, f64>>,
}

impl EvalReport {
    /// All three metrics in one pass. `actions`, when given, must hold one
    /// label per sample.
    pub fn compute(pred: &[Pose3], gt: &[Pose3], actions: Option<&[String]>) -> Result<Self> {
        let errors = joint_errors(pred, gt)?;
        let j = gt.first().map_or(1, |p| p.len().max(1));
        let per_sample: Vec<f64> = errors.chunks(j).map(mean).collect();
        let per_action = match actions {
            Some(labels) => {
                let table = ActionTable::build(&per_sample, labels, None)?;
                Some(table.rows.into_iter().map(|r| (r.action, r.mpjpe_mm)).collect())
            }
            None => None,
        };
        Ok(Self {
            mpjpe_mm: mean(&errors),
            pck_pct: pck_of(&errors, PCK_THRESHOLD_MM),
            auc_pct: auc_of(&errors),
            per_sample,
            per_action,
        })
    }
}

/// How the bottom "Avg" row is formed.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum AverageMode {
    /// Pooled mean over all samples.
    #[default]
    SampleWeighted,
    /// Unweighted mean of the per-action rows.
    RowMean,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActionRow {
    pub action: String,
    pub mpjpe_mm: f64,
    pub count: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct ActionTable {
    pub rows: Vec<ActionRow>,
    pub avg_sample_weighted: f64,
    pub avg_row_mean: f64,
    /// Requested actions that had no samples.
    pub omitted: Vec<String>,
}

impl ActionTable {
    /// Groups per-sample MPJPE by action label.
    ///
    /// Rows follow `order` when given (unknown labels are appended in sorted
    /// order); otherwise labels are sorted. Actions in `order` with no samples
    /// are left out of the table and logged.
    pub fn build(per_sample: &[f64], labels: &[String], order: Option<&[String]>) -> Result<Self> {
        if per_sample.len() != labels.len() {
            return Err(Error::Validation(format!(
                "{} per-sample errors for {} labels",
                per_sample.len(),
                labels.len()
            )));
        }
        let mut groups: BTreeMap<&str, (f64, usize)> = BTreeMap::new();
        for (e, l) in per_sample.iter().zip(labels) {
            let g = groups.entry(l.as_str()).or_default();
            g.0 += e;
            g.1 += 1;
        }
        let mut names: Vec<String> = Vec::new();
        let mut omitted = Vec::new();
        for a in order.unwrap_or(&[]) {
            if groups.contains_key(a.as_str()) {
                if !names.contains(a) {
                    names.push(a.clone());
                }
            } else {
                log::warn!("action `{a}` has no samples; omitted from the table");
                omitted.push(a.clone());
            }
        }
        for k in groups.keys() {
            if !names.iter().any(|n| n == k) {
                names.push(k.to_string());
            }
        }
        let rows: Vec<ActionRow> = names
            .into_iter()
            .map(|a| {
                let (sum, count) = groups[a.as_str()];
                ActionRow { mpjpe_mm: sum / count as f64, count, action: a }
            })
            .collect();
        let avg_row_mean = mean(&rows.iter().map(|r| r.mpjpe_mm).collect::<Vec<_>>());
        Ok(Self { rows, avg_sample_weighted: mean(per_sample), avg_row_mean, omitted })
    }

    pub fn average(&self, mode: AverageMode) -> f64 {
        match mode {
            AverageMode::SampleWeighted => self.avg_sample_weighted,
            AverageMode::RowMean => self.avg_row_mean,
        }
    }

    /// Aligned two-column text table ending in an `Avg` row.
    pub fn to_text(&self, mode: AverageMode) -> String {
        let width = self.rows.iter().map(|r| r.action.len()).max().unwrap_or(0).max(6);
        let mut s = String::new();
        let _ = writeln!(s, "{:<width$}  {:>9}  {:>6}", "Action", "MPJPE", "N");
        for r in &self.rows {
            let _ = writeln!(s, "{:<width$}  {:>9.2}  {:>6}", r.action, r.mpjpe_mm, r.count);
        }
        let n: usize = self.rows.iter().map(|r| r.count).sum();
        let _ = writeln!(s, "{:<width$}  {:>9.2}  {:>6}", "Avg", self.average(mode), n);
        s
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn to_csv(&self, mode: AverageMode) -> String {
        let mut s = String::from("action,mpjpe_mm,count\n");
        for r in &self.rows {
            let _ = writeln!(s, "{},{},{}", csv_field(&r.action), r.mpjpe_mm, r.count);
        }
        let n: usize = self.rows.iter().map(|r| r.count).sum();
        let _ = writeln!(s, "Avg,{},{n}", self.average(mode));
        s
    }
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

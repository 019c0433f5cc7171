//! AUC, accuracy and RMSE over predicted probabilities.

use serde::{Deserialize, Serialize};

use crate::error::{AcktError, Result};

fn check_lengths(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(AcktError::Invalid(format!(
            "{} scores but {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if scores.is_empty() {
        return Err(AcktError::Invalid("no predictions to score".into()));
    }
    Ok(())
}

/// Area under the ROC curve via the Mann-Whitney rank statistic; tied
/// scores share their average rank, so a tied positive/negative pair counts
/// one half.
pub fn auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(AcktError::Invalid("AUC undefined: labels contain a single class".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // 1-based ranks i+1 ..= j+1 share their mean.
        let mean_rank = (i + j) as f64 / 2.0 + 1.0;
        let positives = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += mean_rank * positives as f64;
        i = j + 1;
    }
    let (p, n) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Fraction of predictions on the right side of `threshold`; a score equal
/// to the threshold counts as a positive prediction.
pub fn acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<f64> {
    check_lengths(scores, labels)?;
    let hits = scores
        .iter()
        .zip(labels)
        .filter(|(&s, &l)| (s >= threshold) == (l == 1))
        .count();
    Ok(hits as f64 / scores.len() as f64)
}

pub fn rmse(scores: &[f64], labels: &[u8]) -> Result<f64> {
    check_lengths(scores, labels)?;
    let mse = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| (s - l as f64).powi(2))
        .sum::<f64>()
        / scores.len() as f64;
    Ok(mse.sqrt())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub auc: f64,
    pub acc: f64,
    pub rmse: f64,
    #[serde(rename = "n")]
    pub n_predictions: usize,
    #[serde(rename = "seconds")]
    pub wall_clock_seconds: f64,
}

impl EvalReport {
    pub fn from_predictions(scores: &[f64], labels: &[u8], seconds: f64) -> Result<Self> {
        Ok(EvalReport {
            auc: auc(scores, labels)?,
            acc: acc(scores, labels, 0.5)?,
            rmse: rmse(scores, labels)?,
            n_predictions: scores.len(),
            wall_clock_seconds: seconds,
        })
    }

    pub const TSV_HEADER: &'static str = "auc\tacc\trmse\tn\tseconds";

    pub fn tsv_row(&self) -> String {
        format!(
            "{:.6}\t{:.6}\t{:.6}\t{}\t{:.3}",
            self.auc, self.acc, self.rmse, self.n_predictions, self.wall_clock_seconds
        )
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("report serializes")
    }

    /// True when every metric agrees with `other` within `tol`; timing is
    /// ignored.
    pub fn metrics_match(&self, other: &EvalReport, tol: f64) -> bool {
        (self.auc - other.auc).abs() <= tol
            && (self.acc - other.acc).abs() <= tol
            && (self.rmse - other.rmse).abs() <= tol
            && self.n_predictions == other.n_predictions
    }
}

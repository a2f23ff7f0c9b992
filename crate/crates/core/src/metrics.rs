//! Classification scores: accuracy, macro and weighted F1, one-vs-rest AUC.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum MetricsError {
    #[error("{labels} labels but {preds} predictions")]
    LengthMismatch { labels: usize, preds: usize },
    #[error("class {value} outside [0, {k})")]
    OutOfRange { value: usize, k: usize },
    #[error("no samples")]
    EmptyInput,
    #[error("no class has both positive and negative samples")]
    Degenerate,
}

/// `K × K` counts; cell `(i, j)` counts samples of true class `i` predicted as `j`.
pub type Confusion = Vec<Vec<u64>>;

pub fn confusion(labels: &[usize], preds: &[usize], k: usize) -> Result<Confusion, MetricsError> {
    if labels.len() != preds.len() {
        return Err(MetricsError::LengthMismatch { labels: labels.len(), preds: preds.len() });
    }
    let mut m = vec![vec![0u64; k]; k];
    for (&y, &p) in labels.iter().zip(preds) {
        for value in [y, p] {
            if value >= k {
                return Err(MetricsError::OutOfRange { value, k });
            }
        }
        m[y][p] += 1;
    }
    Ok(m)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassScores {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct F1Summary {
    pub per_class: Vec<ClassScores>,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class and averaged F1. Classes with neither support nor predictions
/// are left out of the macro average.
pub fn f1_scores(conf: &Confusion) -> Result<F1Summary, MetricsError> {
    let k = conf.len();
    let total: u64 = conf.iter().flatten().sum();
    if total == 0 {
        return Err(MetricsError::EmptyInput);
    }
    let mut per_class = Vec::with_capacity(k);
    let (mut macro_sum, mut macro_n, mut weighted) = (0.0, 0usize, 0.0);
    for c in 0..k {
        let tp = conf[c][c];
        let support: u64 = conf[c].iter().sum();
        let predicted: u64 = conf.iter().map(|row| row[c]).sum();
        let precision = ratio(tp, predicted);
        let recall = ratio(tp, support);
        let f1 = if precision + recall > 0.0 { 2.0 * precision * recall / (precision + recall) } else { 0.0 };
        if support > 0 || predicted > 0 {
            macro_sum += f1;
            macro_n += 1;
        }
        weighted += f1 * support as f64;
        per_class.push(ClassScores { precision, recall, f1, support });
    }
    let trace: u64 = (0..k).map(|c| conf[c][c]).sum();
    Ok(F1Summary {
        per_class,
        macro_f1: macro_sum / macro_n as f64,
        weighted_f1: weighted / total as f64,
        accuracy: ratio(trace, total),
    })
}

/// Mid-ranks (1-based) with ties sharing the average of their positions.
fn mid_ranks(scores: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut ranks = vec![0.0; scores.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &o in &order[i..=j] {
            ranks[o] = r;
        }
        i = j + 1;
    }
    ranks
}

/// One-vs-rest AUC of each class from rank statistics; `None` when a class
/// lacks positives or negatives. `scores` is `n × k`, row-major.
pub fn auc_per_class(labels: &[usize], scores: &[f64], k: usize) -> Result<Vec<Option<f64>>, MetricsError> {
    if scores.len() != labels.len() * k {
        return Err(MetricsError::LengthMismatch { labels: labels.len(), preds: scores.len() / k.max(1) });
    }
    if let Some(&value) = labels.iter().find(|&&y| y >= k) {
        return Err(MetricsError::OutOfRange { value, k });
    }
    let n = labels.len();
    let mut out = Vec::with_capacity(k);
    let mut column = vec![0.0; n];
    for c in 0..k {
        let pos = labels.iter().filter(|&&y| y == c).count();
        let neg = n - pos;
        if pos == 0 || neg == 0 {
            out.push(None);
            continue;
        }
        for (i, v) in column.iter_mut().enumerate() {
            *v = scores[i * k + c];
        }
        let ranks = mid_ranks(&column);
        let rank_sum: f64 = labels.iter().zip(&ranks).filter(|(&y, _)| y == c).map(|(_, &r)| r).sum();
        let u = rank_sum - (pos * (pos + 1)) as f64 / 2.0;
        out.push(Some(u / (pos as f64 * neg as f64)));
    }
    Ok(out)
}

/// Macro one-vs-rest AUC over classes that have both positives and negatives.
pub fn auc_ovr(labels: &[usize], scores: &[f64], k: usize) -> Result<f64, MetricsError> {
    let per = auc_per_class(labels, scores, k)?;
    let defined: Vec<f64> = per.into_iter().flatten().collect();
    if defined.is_empty() {
        return Err(MetricsError::Degenerate);
    }
    Ok(defined.iter().sum::<f64>() / defined.len() as f64)
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Column names of a report row, in table order.
pub const TABLE_COLUMNS: [&str; 4] = ["Acc", "Macro F1", "Weighted F1", "AUC"];

/// Metric keys matching [`TABLE_COLUMNS`].
pub const METRIC_KEYS: [&str; 4] = ["accuracy", "macro_f1", "weighted_f1", "auc"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub macro_f1: f64,
    pub weighted_f1: f64,
    /// `None` when no class has both positives and negatives.
    pub auc: Option<f64>,
    pub per_class: Vec<ClassScores>,
    pub confusion: Confusion,
}

impl MetricsReport {
    /// Scores a probability matrix (`n × k`, row-major) against labels.
    pub fn from_scores(labels: &[usize], scores: &[f64], k: usize) -> Result<Self, MetricsError> {
        if labels.is_empty() {
            return Err(MetricsError::EmptyInput);
        }
        if scores.len() != labels.len() * k {
            return Err(MetricsError::LengthMismatch { labels: labels.len(), preds: scores.len() / k.max(1) });
        }
        let preds: Vec<usize> = scores.chunks_exact(k).map(argmax).collect();
        let conf = confusion(labels, &preds, k)?;
        let f1 = f1_scores(&conf)?;
        let auc = match auc_ovr(labels, scores, k) {
            Ok(a) => Some(a),
            Err(MetricsError::Degenerate) => None,
            Err(e) => return Err(e),
        };
        Ok(Self {
            accuracy: f1.accuracy,
            macro_f1: f1.macro_f1,
            weighted_f1: f1.weighted_f1,
            auc,
            per_class: f1.per_class,
            confusion: conf,
        })
    }

    /// Value of a metric by key; AUC is NaN when undefined.
    pub fn metric(&self, key: &str) -> Option<f64> {
        match key {
            "accuracy" => Some(self.accuracy),
            "macro_f1" => Some(self.macro_f1),
            "weighted_f1" => Some(self.weighted_f1),
            "auc" => Some(self.auc.unwrap_or(f64::NAN)),
            _ => None,
        }
    }

    /// `[Acc, Macro F1, Weighted F1, AUC]`.
    pub fn row(&self) -> [f64; 4] {
        METRIC_KEYS.map(|k| self.metric(k).expect("known key"))
    }
}

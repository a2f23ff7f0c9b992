use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{EpochLog, ExperimentConfig, ExperimentError, Split};
use crate::metrics::{MetricsReport, METRIC_KEYS, TABLE_COLUMNS};
use crate::models::HeadKind;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSizes {
    pub train_chips: usize,
    pub test_chips: usize,
    pub hold_chips: usize,
    pub leaked_chips: usize,
    pub train_nodes: usize,
    pub test_nodes: usize,
    pub hold_nodes: usize,
}

/// Train score minus hold score for each metric; `None` where the metric is
/// undefined on either split.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Gaps {
    pub accuracy: Option<f64>,
    pub macro_f1: Option<f64>,
    pub weighted_f1: Option<f64>,
    pub auc: Option<f64>,
}

impl Gaps {
    pub fn between(train: &MetricsReport, hold: &MetricsReport) -> Self {
        let d = |k: &str| {
            let v = train.metric(k).expect("metric key") - hold.metric(k).expect("metric key");
            v.is_finite().then_some(v)
        };
        Self { accuracy: d("accuracy"), macro_f1: d("macro_f1"), weighted_f1: d("weighted_f1"), auc: d("auc") }
    }

    pub fn get(&self, key: &str) -> Option<f64> {
        match key {
            "accuracy" => self.accuracy,
            "macro_f1" => self.macro_f1,
            "weighted_f1" => self.weighted_f1,
            "auc" => self.auc,
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelResult {
    pub head: HeadKind,
    pub best_epoch: usize,
    pub train: MetricsReport,
    pub test: MetricsReport,
    pub hold: MetricsReport,
    pub gaps: Gaps,
    pub log: Vec<EpochLog>,
}

impl ModelResult {
    pub fn split(&self, name: &str) -> Option<&MetricsReport> {
        match name {
            "train" => Some(&self.train),
            "test" => Some(&self.test),
            "hold" => Some(&self.hold),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentReport {
    pub index: usize,
    pub name: String,
    pub config: ExperimentConfig,
    pub split: Split,
    pub sizes: SplitSizes,
    pub class_weights: Vec<f64>,
    pub models: Vec<ModelResult>,
    pub runtime_secs: f64,
}

impl ExperimentReport {
    pub fn model(&self, head: HeadKind) -> Option<&ModelResult> {
        self.models.iter().find(|m| m.head == head)
    }
}

impl ExperimentReport {
    /// Checks internal consistency: split sizes, metric ranges, confusion
    /// totals against node counts, and gaps against their recomputation.
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(format!("report {}: {m}", self.index)));
        let s = &self.sizes;
        let counts = [
            (self.split.train.len(), s.train_chips),
            (self.split.test.len(), s.test_chips),
            (self.split.hold.len(), s.hold_chips),
            (self.split.leaked.len(), s.leaked_chips),
        ];
        if counts.iter().any(|(a, b)| a != b) {
            return bad(format!("chip counts {counts:?} disagree"));
        }
        if self.class_weights.len() != self.config.model.head.classes || self.class_weights.iter().any(|&w| !(w > 0.0)) {
            return bad(format!("class weights {:?}", self.class_weights));
        }
        if self.models.is_empty() {
            return bad("no models".into());
        }
        let k = self.config.model.head.classes;
        for m in &self.models {
            for (name, nodes) in [("train", s.train_nodes), ("test", s.test_nodes), ("hold", s.hold_nodes)] {
                let r = m.split(name).expect("split name");
                let total: u64 = r.confusion.iter().flatten().sum();
                if r.confusion.len() != k || r.confusion.iter().any(|row| row.len() != k) || r.per_class.len() != k {
                    return bad(format!("{} {name}: expected {k} classes", m.head.name()));
                }
                if total != nodes as u64 {
                    return bad(format!("{} {name}: confusion total {total} but {nodes} nodes", m.head.name()));
                }
                let diag: u64 = (0..k).map(|c| r.confusion[c][c]).sum();
                if (r.accuracy - diag as f64 / total as f64).abs() > 1e-12 {
                    return bad(format!("{} {name}: accuracy disagrees with confusion", m.head.name()));
                }
                for key in METRIC_KEYS {
                    let v = r.metric(key).expect("metric key");
                    if !(v.is_nan() && key == "auc") && !(0.0..=1.0).contains(&v) {
                        return bad(format!("{} {name} {key} = {v}", m.head.name()));
                    }
                }
            }
            let expect = Gaps::between(&m.train, &m.hold);
            for key in METRIC_KEYS {
                match (m.gaps.get(key), expect.get(key)) {
                    (None, None) => {}
                    (Some(a), Some(b)) if (a - b).abs() <= 1e-12 => {}
                    (a, b) => return bad(format!("{} gap {key}: stored {a:?}, recomputed {b:?}", m.head.name())),
                }
            }
        }
        Ok(())
    }
}

/// Parses a report written as JSON, rejecting unknown fields and
/// inconsistent contents.
pub fn parse_report(bytes: &[u8]) -> Result<ExperimentReport, ExperimentError> {
    let r: ExperimentReport = serde_json::from_slice(bytes)?;
    r.validate()?;
    Ok(r)
}

/// Column label used for a head in tables.
pub fn model_display_name(head: HeadKind) -> &'static str {
    match head {
        HeadKind::Mlp => "Siamese CNN",
        HeadKind::Sage => "Graph SAGE",
    }
}

fn fmt(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.4}")
    } else {
        "NaN".into()
    }
}

/// Table with one row per experiment and split and one four-column metric
/// block per head, baseline first.
pub fn results_table_csv(reports: &[ExperimentReport]) -> Result<String, ExperimentError> {
    let mut heads: Vec<HeadKind> = Vec::new();
    for h in [HeadKind::Mlp, HeadKind::Sage] {
        if reports.iter().any(|r| r.model(h).is_some()) {
            heads.push(h);
        }
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["experiment_index".to_string(), "train".into(), "test_hold".into(), "split".into()];
    for &h in &heads {
        header.extend(TABLE_COLUMNS.iter().map(|c| format!("{} {c}", model_display_name(h))));
    }
    w.write_record(&header).map_err(csv_err)?;
    for r in reports {
        for split in ["train", "test", "hold"] {
            let mut row = vec![
                r.index.to_string(),
                r.config.train_disasters.join("+")
                    + &if r.split.leaked.is_empty() { String::new() } else { format!("+{}%", r.config.leak_fraction * 100.0) },
                r.config.target_disaster.clone(),
                split.to_string(),
            ];
            for &h in &heads {
                match r.model(h).and_then(|m| m.split(split)) {
                    Some(m) => row.extend(m.row().iter().map(|&v| fmt(v))),
                    None => row.extend(std::iter::repeat_n(String::new(), 4)),
                }
            }
            w.write_record(&row).map_err(csv_err)?;
        }
    }
    finish(w)
}

/// Long-form gap table: `experiment_index, model, metric, train_minus_hold`.
pub fn gap_csv(reports: &[ExperimentReport]) -> Result<String, ExperimentError> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["experiment_index", "model", "metric", "train_minus_hold"]).map_err(csv_err)?;
    for r in reports {
        for m in &r.models {
            for key in METRIC_KEYS {
                let v = m.gaps.get(key).map_or_else(|| "NaN".into(), |v| format!("{v}"));
                w.write_record([r.index.to_string(), m.head.name().to_string(), key.to_string(), v]).map_err(csv_err)?;
            }
        }
    }
    finish(w)
}

fn csv_err(e: csv::Error) -> ExperimentError {
    ExperimentError::Config(format!("csv: {e}"))
}

fn finish(w: csv::Writer<Vec<u8>>) -> Result<String, ExperimentError> {
    let bytes = w.into_inner().map_err(|e| ExperimentError::Config(format!("csv: {e}")))?;
    Ok(String::from_utf8(bytes).expect("csv output is UTF-8"))
}

/// Writes to a temporary sibling and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), ExperimentError> {
    let io = |source| ExperimentError::Io { path: path.to_path_buf(), source };
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    fs::write(&tmp, bytes).map_err(io)?;
    fs::rename(&tmp, path).map_err(io)
}

//! Cross-disaster experiments: chip splits, training, reports and the
//! synthetic corpus generator.

mod corpus;
mod report;
mod synth;
mod train;

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use corpus::{build_row, embed_graph, load_cache_dir, load_manifest_corpus, CorpusLog, FilterLogEntry};
pub use report::{
    gap_csv, model_display_name, parse_report, results_table_csv, write_atomic, ExperimentReport, Gaps, ModelResult, SplitSizes,
};
pub use synth::{
    join_count, synth_chip, synth_generate, synth_generate_layout, synth_plan, SynthChip, SynthConfig, SynthDisaster, SynthLayout,
};
pub use train::{balanced_class_weights, evaluate, predict, train_model, EpochLog, Predictions, TrainOutcome, TrainSettings};

use crate::graph::{ChipGraph, Fanout, GraphError};
use crate::ingest::IngestError;
use crate::metrics::MetricsError;
use crate::models::{DamageModel, HeadKind, ModelConfig, ModelError};
use crate::nn::{param_seed, NnError};

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid config: {0}")]
    Config(String),
    #[error("unknown disaster {0:?}")]
    UnknownDisaster(String),
    #[error("target disaster {0:?} has too few chips for a test and a hold split")]
    EmptyTarget(String),
    #[error("non-finite loss in epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Ingest(#[from] IngestError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// Seed for one named random stream of a run.
pub fn derive_seed(seed: u64, stream: &str) -> u64 {
    param_seed(seed, stream)
}

/// How the leak fraction is counted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum LeakUnit {
    #[default]
    Chips,
    Buildings,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum EncoderMode {
    /// Encoder and head are trained jointly on crops.
    #[default]
    Trainable,
    /// The seeded encoder embeds every node once; only the head is trained.
    Frozen,
}

/// Target-disaster proportions. The train share is the pool that joins
/// training when the target is a training disaster, and the pool leaks are
/// drawn from otherwise.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitRatios {
    pub train: f64,
    pub test: f64,
    pub hold: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.5, test: 0.25, hold: 0.25 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub name: String,
    pub train_disasters: Vec<String>,
    pub target_disaster: String,
    pub leak_fraction: f64,
    pub leak_unit: LeakUnit,
    pub split: SplitRatios,
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub batch_nodes: usize,
    pub fanout: Fanout,
    pub heads: Vec<HeadKind>,
    pub encoder_mode: EncoderMode,
    /// Inverse-frequency class weights when true, unit weights otherwise.
    pub class_weights: bool,
    /// Architecture; the head kind and seed are set per run.
    pub model: ModelConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            name: String::new(),
            train_disasters: Vec::new(),
            target_disaster: String::new(),
            leak_fraction: 0.0,
            leak_unit: LeakUnit::Chips,
            split: SplitRatios::default(),
            seed: 0,
            epochs: 50,
            lr: 3e-4,
            batch_nodes: 256,
            fanout: Fanout::All,
            heads: vec![HeadKind::Mlp, HeadKind::Sage],
            encoder_mode: EncoderMode::Trainable,
            class_weights: true,
            model: ModelConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: String| Err(ExperimentError::Config(m));
        if self.train_disasters.is_empty() || self.target_disaster.is_empty() {
            return bad("train_disasters and target_disaster are required".into());
        }
        if !(0.0..1.0).contains(&self.leak_fraction) {
            return bad(format!("leak_fraction {} outside [0, 1)", self.leak_fraction));
        }
        let r = self.split;
        if [r.train, r.test, r.hold].iter().any(|&v| !(0.0..=1.0).contains(&v)) || (r.train + r.test + r.hold - 1.0).abs() > 1e-9 {
            return bad(format!("split ratios {r:?} must be in [0, 1] and sum to 1"));
        }
        if self.epochs == 0 || self.batch_nodes == 0 || !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad("epochs, batch_nodes and lr must be positive".into());
        }
        let unique: BTreeSet<_> = self.heads.iter().map(|h| h.name()).collect();
        if self.heads.is_empty() || unique.len() != self.heads.len() {
            return bad("heads must be a non-empty list without repeats".into());
        }
        self.model.validate()?;
        Ok(())
    }

    /// Model configuration for one head.
    pub fn model_config(&self, head: HeadKind) -> ModelConfig {
        let mut m = self.model.clone();
        m.head.kind = head;
        m.seed = self.seed;
        m
    }
}

/// Several experiments sharing one corpus.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct SuiteConfig {
    pub experiments: Vec<ExperimentConfig>,
}

/// Reads a TOML or JSON config file; `.json` selects JSON, anything else TOML.
pub fn read_config_file<T: serde::de::DeserializeOwned>(path: &std::path::Path) -> Result<T, ExperimentError> {
    let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io { path: path.to_path_buf(), source })?;
    let parsed = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json")) {
        serde_json::from_str(&text).map_err(|e| e.to_string())
    } else {
        toml::from_str(&text).map_err(|e| e.to_string())
    };
    parsed.map_err(|e| ExperimentError::Config(format!("{}: {e}", path.display())))
}

/// Minimal per-chip facts needed to split a corpus.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChipInfo {
    pub chip_id: String,
    pub disaster_id: String,
    pub buildings: usize,
}

impl From<&ChipGraph> for ChipInfo {
    fn from(g: &ChipGraph) -> Self {
        Self { chip_id: g.meta.chip_id.clone(), disaster_id: g.meta.disaster_id.clone(), buildings: g.num_nodes() }
    }
}

/// Chip-level partition; every list is sorted.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct Split {
    pub train: Vec<String>,
    pub test: Vec<String>,
    pub hold: Vec<String>,
    /// Target chips added to `train` by leaking.
    pub leaked: Vec<String>,
}

/// Partitions chips into train, test and hold sets.
///
/// Target chips are shuffled with a seeded RNG and cut by the split ratios.
/// The training set holds every chip of the other training disasters, plus
/// the target's train share when the target is itself a training disaster,
/// or otherwise a `leak_fraction` portion of that share.
pub fn split(chips: &[ChipInfo], cfg: &ExperimentConfig) -> Result<Split, ExperimentError> {
    let mut by_disaster: BTreeMap<&str, Vec<&ChipInfo>> = BTreeMap::new();
    for c in chips {
        by_disaster.entry(c.disaster_id.as_str()).or_default().push(c);
    }
    for d in cfg.train_disasters.iter().chain(std::iter::once(&cfg.target_disaster)) {
        if !by_disaster.contains_key(d.as_str()) {
            return Err(ExperimentError::UnknownDisaster(d.clone()));
        }
    }
    let mut target: Vec<&ChipInfo> = by_disaster[cfg.target_disaster.as_str()].clone();
    target.sort_by(|a, b| a.chip_id.cmp(&b.chip_id));
    target.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "split")));
    let n = target.len();
    let n_reserve = ((n as f64 * cfg.split.train).round() as usize).min(n);
    let n_test = ((n as f64 * cfg.split.test).round() as usize).min(n - n_reserve);
    let n_hold = n - n_reserve - n_test;
    if n_test == 0 || n_hold == 0 {
        return Err(ExperimentError::EmptyTarget(cfg.target_disaster.clone()));
    }
    let reserve = &target[..n_reserve];
    let ids = |cs: &[&ChipInfo]| cs.iter().map(|c| c.chip_id.clone()).collect::<Vec<_>>();
    let mut out = Split {
        test: ids(&target[n_reserve..n_reserve + n_test]),
        hold: ids(&target[n_reserve + n_test..]),
        ..Default::default()
    };
    let mut seen = BTreeSet::new();
    for d in &cfg.train_disasters {
        if d == &cfg.target_disaster || !seen.insert(d.as_str()) {
            continue;
        }
        out.train.extend(by_disaster[d.as_str()].iter().map(|c| c.chip_id.clone()));
    }
    if cfg.train_disasters.contains(&cfg.target_disaster) {
        out.train.extend(ids(reserve));
    } else {
        let take = match cfg.leak_unit {
            LeakUnit::Chips => (cfg.leak_fraction * n_reserve as f64).round() as usize,
            LeakUnit::Buildings => {
                let goal = cfg.leak_fraction * reserve.iter().map(|c| c.buildings).sum::<usize>() as f64;
                let mut acc = 0usize;
                reserve
                    .iter()
                    .take_while(|c| {
                        let keep = (acc as f64) < goal;
                        acc += c.buildings;
                        keep
                    })
                    .count()
            }
        };
        out.leaked = ids(&reserve[..take]);
        out.train.extend(out.leaked.iter().cloned());
    }
    for list in [&mut out.train, &mut out.test, &mut out.hold, &mut out.leaked] {
        list.sort();
    }
    Ok(out)
}

/// Runs every configured head on a prepared corpus.
///
/// In frozen mode the corpus may hold crops or embeddings; crops are
/// embedded with the seeded encoder first.
pub fn run_experiment(index: usize, cfg: &ExperimentConfig, corpus: &[ChipGraph]) -> Result<ExperimentReport, ExperimentError> {
    Ok(run_experiment_with_models(index, cfg, corpus)?.0)
}

/// Like [`run_experiment`], also returning the selected model of each head
/// in `cfg.heads` order.
pub fn run_experiment_with_models(
    index: usize,
    cfg: &ExperimentConfig,
    corpus: &[ChipGraph],
) -> Result<(ExperimentReport, Vec<DamageModel<f32>>), ExperimentError> {
    cfg.validate()?;
    let start = Instant::now();
    let infos: Vec<ChipInfo> = corpus.iter().map(ChipInfo::from).collect();
    let parts = split(&infos, cfg)?;

    let embedded: Vec<ChipGraph>;
    let graphs: &[ChipGraph] = if cfg.encoder_mode == EncoderMode::Frozen && corpus.iter().any(|g| g.features.is_crops()) {
        let encoder = DamageModel::<f32>::new(cfg.model_config(HeadKind::Mlp))?;
        embedded = corpus.iter().map(|g| embed_graph(&encoder, g.clone())).collect::<Result<_, _>>()?;
        &embedded
    } else {
        corpus
    };

    let by_id: BTreeMap<&str, &ChipGraph> = graphs.iter().map(|g| (g.meta.chip_id.as_str(), g)).collect();
    let pick = |ids: &[String]| ids.iter().map(|id| by_id[id.as_str()]).collect::<Vec<&ChipGraph>>();
    let (train, test, hold) = (pick(&parts.train), pick(&parts.test), pick(&parts.hold));
    let count = |gs: &[&ChipGraph]| gs.iter().map(|g| g.num_nodes()).sum::<usize>();
    let sizes = SplitSizes {
        train_chips: train.len(),
        test_chips: test.len(),
        hold_chips: hold.len(),
        leaked_chips: parts.leaked.len(),
        train_nodes: count(&train),
        test_nodes: count(&test),
        hold_nodes: count(&hold),
    };
    let class_weights =
        if cfg.class_weights { balanced_class_weights(&train) } else { vec![1.0; cfg.model.head.classes] };
    let settings = TrainSettings {
        epochs: cfg.epochs,
        lr: cfg.lr,
        batch_nodes: cfg.batch_nodes,
        fanout: cfg.fanout,
        seed: cfg.seed,
        class_weights: class_weights.clone(),
    };

    let mut models = Vec::new();
    let mut trained = Vec::new();
    for &head in &cfg.heads {
        let model = DamageModel::<f32>::new(cfg.model_config(head))?;
        let out = train_model(model, &train, &test, &settings)?;
        let eval = |gs: &[&ChipGraph]| evaluate(&out.model, gs, cfg.batch_nodes);
        let (tr, te, ho) = (eval(&train)?, eval(&test)?, eval(&hold)?);
        models.push(ModelResult {
            head,
            best_epoch: out.best_epoch,
            gaps: Gaps::between(&tr, &ho),
            train: tr,
            test: te,
            hold: ho,
            log: out.log,
        });
        trained.push(out.model);
    }
    let report = ExperimentReport {
        index,
        name: cfg.name.clone(),
        config: cfg.clone(),
        split: parts,
        sizes,
        class_weights,
        models,
        runtime_secs: start.elapsed().as_secs_f64(),
    };
    Ok((report, trained))
}

pub const SOCAL_FIRE: &str = "socal-fire";
pub const PORTUGAL_FIRE: &str = "portugal-fire";
pub const NEPAL_FLOODING: &str = "nepal-flooding";
pub const JOPLIN_TORNADO: &str = "joplin-tornado";
pub const PUNA_VOLCANO: &str = "puna-volcano";

/// The four train/target configurations of the cross-disaster study:
/// fire to fire, flooding to fire, three disasters to fire, and the same
/// three plus a 10% leak of the target.
pub fn cross_disaster_preset(base: &ExperimentConfig) -> Vec<ExperimentConfig> {
    let s = |v: &[&str]| v.iter().map(|d| d.to_string()).collect::<Vec<_>>();
    let three = s(&[NEPAL_FLOODING, JOPLIN_TORNADO, PUNA_VOLCANO]);
    let rows = [
        ("fire-fire", s(&[SOCAL_FIRE, PORTUGAL_FIRE]), 0.0),
        ("flooding-fire", s(&[NEPAL_FLOODING]), 0.0),
        ("multi-fire", three.clone(), 0.0),
        ("multi-leak-fire", three, 0.1),
    ];
    rows.into_iter()
        .map(|(name, train, leak)| ExperimentConfig {
            name: name.into(),
            train_disasters: train,
            target_disaster: SOCAL_FIRE.into(),
            leak_fraction: leak,
            ..base.clone()
        })
        .collect()
}

#[cfg(test)]
mod tests;

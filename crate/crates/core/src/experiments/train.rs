use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{derive_seed, ExperimentError};
use crate::graph::{neighbor_sample, plan_batches, ChipGraph, Fanout, GraphBatch};
use crate::ingest::NUM_CLASSES;
use crate::metrics::MetricsReport;
use crate::models::DamageModel;
use crate::nn::{AdamConfig, AdamState, Graph, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSettings {
    pub epochs: usize,
    pub lr: f64,
    pub batch_nodes: usize,
    pub fanout: Fanout,
    pub seed: u64,
    pub class_weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EpochLog {
    pub epoch: usize,
    /// Mean batch loss.
    pub loss: f64,
    /// Accuracy of the training-mode forward passes during the epoch.
    pub train_accuracy: f64,
    pub test_macro_f1: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters from the epoch with the best test macro F1, or from the
    /// last epoch when there is no test set.
    pub model: DamageModel<f32>,
    pub best_epoch: usize,
    pub log: Vec<EpochLog>,
}

/// Inverse-frequency weights `N / (K · n_c)` over labeled training nodes.
/// Classes absent from training get weight 1.
pub fn balanced_class_weights(graphs: &[&ChipGraph]) -> Vec<f64> {
    let mut counts = [0usize; NUM_CLASSES];
    for g in graphs {
        for l in &g.labels {
            if let Some(i) = l.index() {
                counts[i] += 1;
            }
        }
    }
    let total: usize = counts.iter().sum();
    counts
        .iter()
        .map(|&c| if c == 0 { 1.0 } else { total as f64 / (NUM_CLASSES as f64 * c as f64) })
        .collect()
}

fn batches<'a>(graphs: &[&'a ChipGraph], target: usize, seed: u64) -> Vec<Vec<&'a ChipGraph>> {
    let sizes: Vec<usize> = graphs.iter().map(|g| g.num_nodes()).collect();
    plan_batches(&sizes, target, seed).into_iter().map(|m| m.into_iter().map(|i| graphs[i]).collect()).collect()
}

/// Labels and class probabilities of every labeled node.
#[derive(Debug, Clone, PartialEq)]
pub struct Predictions {
    pub labels: Vec<usize>,
    /// `labels.len() × K`, row-major.
    pub scores: Vec<f64>,
}

pub fn predict(model: &DamageModel<f32>, graphs: &[&ChipGraph], batch_nodes: usize) -> Result<Predictions, ExperimentError> {
    let mut out = Predictions { labels: Vec::new(), scores: Vec::new() };
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    // Evaluation batches keep input order.
    let mut start = 0;
    while start < graphs.len() {
        let mut end = start + 1;
        let mut count = graphs[start].num_nodes();
        while end < graphs.len() && count + graphs[end].num_nodes() <= batch_nodes {
            count += graphs[end].num_nodes();
            end += 1;
        }
        let batch = GraphBatch::from_graphs(&graphs[start..end])?;
        let probs = model.forward(&batch, false, &mut rng)?;
        let k = probs.shape()[1];
        for (v, label) in batch.labels.iter().enumerate() {
            if let Some(y) = label.index() {
                out.labels.push(y);
                out.scores.extend(probs.row(v).iter().map(|&p| p as f64));
            }
        }
        debug_assert_eq!(out.scores.len(), out.labels.len() * k);
        start = end;
    }
    Ok(out)
}

pub fn evaluate(model: &DamageModel<f32>, graphs: &[&ChipGraph], batch_nodes: usize) -> Result<MetricsReport, ExperimentError> {
    let p = predict(model, graphs, batch_nodes)?;
    Ok(MetricsReport::from_scores(&p.labels, &p.scores, model.config.head.classes)?)
}

/// Trains with Adam on class-weighted cross-entropy for a fixed number of
/// epochs, keeping the parameters with the best test macro F1.
pub fn train_model(
    mut model: DamageModel<f32>,
    train: &[&ChipGraph],
    test: &[&ChipGraph],
    s: &TrainSettings,
) -> Result<TrainOutcome, ExperimentError> {
    if train.is_empty() {
        return Err(ExperimentError::Config("empty training set".into()));
    }
    let adam_cfg = AdamConfig { lr: s.lr, ..AdamConfig::default() };
    let mut adam = AdamState::new(adam_cfg, &model.params)?;
    let class_weights: Vec<f32> = s.class_weights.iter().map(|&w| w as f32).collect();
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(derive_seed(s.seed, "dropout"));
    let mut log = Vec::with_capacity(s.epochs);
    let mut best: Option<(f64, usize, DamageModel<f32>)> = None;

    for epoch in 1..=s.epochs {
        let epoch_seed = derive_seed(s.seed, &format!("epoch{epoch}"));
        let (mut loss_sum, mut n_batches, mut correct, mut seen) = (0.0, 0usize, 0usize, 0usize);
        for (b, members) in batches(train, s.batch_nodes, epoch_seed).into_iter().enumerate() {
            let full = GraphBatch::from_graphs(&members)?;
            let batch = neighbor_sample(&full, s.fanout, epoch_seed ^ b as u64);
            let (labels, mask) = batch.targets();
            if !mask.iter().any(|&m| m) {
                continue;
            }
            let mut g = Graph::new();
            let f = model.forward_tape(&mut g, &batch, true, &mut dropout_rng)?;
            let loss = g.weighted_cross_entropy(f.logits, &labels, &class_weights, &mask)?;
            let value = g.value(loss).data()[0] as f64;
            if !value.is_finite() {
                return Err(ExperimentError::NonFiniteLoss { epoch });
            }
            let logits = g.value(f.logits);
            for (v, (&y, &m)) in labels.iter().zip(&mask).enumerate() {
                if m {
                    let row: Vec<f64> = logits.row(v).iter().map(|&z| z as f64).collect();
                    correct += usize::from(crate::metrics::argmax(&row) == y);
                    seen += 1;
                }
            }
            let grads = g.backward(loss)?;
            let grads: Vec<Tensor<f32>> = f.params.iter().map(|&p| grads.tensor(p)).collect();
            adam.step(&mut model.params, &grads)?;
            loss_sum += value;
            n_batches += 1;
        }
        let test_macro_f1 = if test.is_empty() { None } else { Some(evaluate(&model, test, s.batch_nodes)?.macro_f1) };
        if let Some(f1) = test_macro_f1 {
            if best.as_ref().is_none_or(|(b, _, _)| f1 > *b) {
                best = Some((f1, epoch, model.clone()));
            }
        }
        log.push(EpochLog {
            epoch,
            loss: loss_sum / n_batches.max(1) as f64,
            train_accuracy: correct as f64 / seen.max(1) as f64,
            test_macro_f1,
        });
    }
    Ok(match best {
        Some((_, best_epoch, m)) => TrainOutcome { model: m, best_epoch, log },
        None => TrainOutcome { model, best_epoch: s.epochs, log },
    })
}

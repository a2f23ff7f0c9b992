//! Per-chip building graphs and mini-batch assembly.
//!
//! Each kept chip becomes one [`ChipGraph`]: nodes are buildings, edges come
//! from the Delaunay triangulation of envelope centroids, and edge weights
//! are a Gaussian similarity of the nodes' crop vectors. Batches pack whole
//! chip graphs into a block-diagonal [`GraphBatch`].

mod batch;
mod cache;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{make_batches, neighbor_sample, plan_batches, Fanout, GraphBatch};
pub use cache::{read_graph, read_graph_file, write_graph, write_graph_file, GRAPH_MAGIC, GRAPH_VERSION};

use crate::geo::{self, GeoError, Point2};
use crate::ingest::{BuildingNode, DamageClass, CROP_SIZE};

/// Values per node in crop form: pre RGB then post RGB, each `128 × 128`.
pub const CROP_FEATURE_LEN: usize = 6 * CROP_SIZE * CROP_SIZE;

/// Bandwidth floor used when every edge joins identical feature vectors.
pub const SIGMA2_FLOOR: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum GraphError {
    #[error(transparent)]
    Geo(#[from] GeoError),
    #[error("invalid graph: {0}")]
    Invalid(String),
    #[error("graph cache format: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Node inputs, stored row-major with one row per node.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeFeatures {
    /// `n × 6 × 128 × 128`; channels 0–2 pre-event, 3–5 post-event.
    Crops(Vec<f32>),
    /// `n × dim` precomputed change embeddings.
    Embeddings { dim: usize, data: Vec<f32> },
}

impl NodeFeatures {
    pub fn row_len(&self) -> usize {
        match self {
            NodeFeatures::Crops(_) => CROP_FEATURE_LEN,
            NodeFeatures::Embeddings { dim, .. } => *dim,
        }
    }

    pub fn data(&self) -> &[f32] {
        match self {
            NodeFeatures::Crops(d) => d,
            NodeFeatures::Embeddings { data, .. } => data,
        }
    }

    pub fn row(&self, i: usize) -> &[f32] {
        let w = self.row_len();
        &self.data()[i * w..(i + 1) * w]
    }

    pub fn num_rows(&self) -> usize {
        let w = self.row_len();
        if w == 0 {
            0
        } else {
            self.data().len() / w
        }
    }

    pub fn is_crops(&self) -> bool {
        matches!(self, NodeFeatures::Crops(_))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ChipMeta {
    pub chip_id: String,
    pub disaster_id: String,
    pub disaster_type: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Edge {
    pub i: usize,
    pub j: usize,
    pub weight: f64,
}

/// Subgraph for one chip.
#[derive(Debug, Clone, PartialEq)]
pub struct ChipGraph {
    pub meta: ChipMeta,
    pub node_ids: Vec<String>,
    pub labels: Vec<DamageClass>,
    pub centroids: Vec<Point2>,
    pub features: NodeFeatures,
    /// Undirected edges with `i < j`, sorted, weights in `(0, 1]`.
    pub edges: Vec<Edge>,
    /// Sorted neighbor indices per node.
    pub adjacency: Vec<Vec<usize>>,
}

impl ChipGraph {
    pub fn num_nodes(&self) -> usize {
        self.node_ids.len()
    }

    /// Weight of the undirected edge `{i, j}`, in either argument order.
    pub fn weight(&self, i: usize, j: usize) -> Option<f64> {
        let key = (i.min(j), i.max(j));
        self.edges
            .binary_search_by(|e| (e.i, e.j).cmp(&key))
            .ok()
            .map(|k| self.edges[k].weight)
    }

    /// Replaces node inputs with precomputed embeddings, keeping edges and weights.
    pub fn with_embeddings(mut self, dim: usize, data: Vec<f32>) -> Result<Self, GraphError> {
        if data.len() != dim * self.num_nodes() {
            return Err(GraphError::Invalid(format!(
                "{} embedding values for {} nodes of dim {dim}",
                data.len(),
                self.num_nodes()
            )));
        }
        self.features = NodeFeatures::Embeddings { dim, data };
        Ok(self)
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<(), GraphError> {
        let n = self.num_nodes();
        let bad = |m: String| Err(GraphError::Invalid(format!("{}: {m}", self.meta.chip_id)));
        if self.labels.len() != n || self.centroids.len() != n || self.adjacency.len() != n {
            return bad("per-node field lengths differ".into());
        }
        if self.features.num_rows() != n || self.features.data().len() != n * self.features.row_len() {
            return bad("feature rows do not match node count".into());
        }
        for w in self.edges.windows(2) {
            if (w[0].i, w[0].j) >= (w[1].i, w[1].j) {
                return bad("edges not sorted and unique".into());
            }
        }
        for e in &self.edges {
            if e.i >= e.j || e.j >= n {
                return bad(format!("bad edge ({}, {})", e.i, e.j));
            }
            if !(e.weight > 0.0 && e.weight <= 1.0) {
                return bad(format!("edge weight {} outside (0, 1]", e.weight));
            }
        }
        if n >= 2 && !is_connected(&self.adjacency) {
            return bad("graph is disconnected".into());
        }
        Ok(())
    }
}

fn is_connected(adj: &[Vec<usize>]) -> bool {
    let mut seen = vec![false; adj.len()];
    let mut stack = vec![0];
    seen[0] = true;
    while let Some(v) = stack.pop() {
        for &u in &adj[v] {
            if !seen[u] {
                seen[u] = true;
                stack.push(u);
            }
        }
    }
    seen.into_iter().all(|s| s)
}

pub(crate) fn adjacency_from_edges(n: usize, edges: &[Edge]) -> Vec<Vec<usize>> {
    let mut adj = vec![Vec::new(); n];
    for e in edges {
        adj[e.i].push(e.j);
        adj[e.j].push(e.i);
    }
    for list in &mut adj {
        list.sort_unstable();
    }
    adj
}

/// Squared Euclidean distance, accumulated in `f64`.
fn squared_distance(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| (x as f64 - y as f64).powi(2)).sum()
}

/// Gaussian edge weights `exp(-d² / 2σ²)` with σ² the mean squared
/// feature distance over the given edges.
pub fn similarity_weights(features: &NodeFeatures, pairs: &[(usize, usize)]) -> Vec<f64> {
    let d2: Vec<f64> = pairs.iter().map(|&(i, j)| squared_distance(features.row(i), features.row(j))).collect();
    if d2.is_empty() {
        return Vec::new();
    }
    let sigma2 = (d2.iter().sum::<f64>() / d2.len() as f64).max(SIGMA2_FLOOR);
    d2.into_iter().map(|d| (-d / (2.0 * sigma2)).exp().max(f64::MIN_POSITIVE)).collect()
}

/// Assembles the chip subgraph from its building nodes.
pub fn build_chip_graph(meta: ChipMeta, nodes: Vec<BuildingNode>) -> Result<ChipGraph, GraphError> {
    let n = nodes.len();
    let centroids: Vec<Point2> = nodes.iter().map(|b| b.centroid).collect();
    let tri = geo::delaunay(&centroids)?;

    let mut crops = Vec::with_capacity(n * CROP_FEATURE_LEN);
    let mut node_ids = Vec::with_capacity(n);
    let mut labels = Vec::with_capacity(n);
    for b in nodes {
        crops.extend_from_slice(b.pre_crop.data());
        crops.extend_from_slice(b.post_crop.data());
        node_ids.push(b.id);
        labels.push(b.label);
    }
    if crops.len() != n * CROP_FEATURE_LEN {
        return Err(GraphError::Invalid("crops must be 3 x 128 x 128".into()));
    }
    let features = NodeFeatures::Crops(crops);
    let weights = similarity_weights(&features, &tri.edges);
    let edges: Vec<Edge> =
        tri.edges.iter().zip(weights).map(|(&(i, j), weight)| Edge { i, j, weight }).collect();
    let adjacency = adjacency_from_edges(n, &edges);
    Ok(ChipGraph { meta, node_ids, labels, centroids, features, edges, adjacency })
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::geo::Envelope;
    use crate::nn::Tensor;

    pub(crate) fn node(id: &str, x: f64, y: f64, value: f32, label: DamageClass) -> BuildingNode {
        let crop = Tensor::full(&[3, CROP_SIZE, CROP_SIZE], value);
        BuildingNode {
            id: id.into(),
            envelope: Envelope::new(x - 1.0, y - 1.0, x + 1.0, y + 1.0).unwrap(),
            centroid: Point2::new(x, y),
            pre_crop: crop.clone(),
            post_crop: crop,
            label,
        }
    }

    pub(crate) fn meta(id: &str) -> ChipMeta {
        ChipMeta { chip_id: id.into(), disaster_id: "d".into(), disaster_type: "fire".into() }
    }

    #[test]
    fn identical_crops_give_unit_weight() {
        let g = build_chip_graph(
            meta("c"),
            vec![node("a", 0.0, 0.0, 0.5, DamageClass::NoDamage), node("b", 5.0, 1.0, 0.5, DamageClass::NoDamage)],
        )
        .unwrap();
        assert_eq!(g.edges, vec![Edge { i: 0, j: 1, weight: 1.0 }]);
        g.validate().unwrap();
    }

    #[test]
    fn equal_distances_give_exp_minus_half() {
        // Each node differs from the others in exactly one pixel by the same
        // amount, so all pairwise squared distances coincide.
        let mut nodes = vec![
            node("a", 0.0, 0.0, 0.0, DamageClass::NoDamage),
            node("b", 4.0, 0.0, 0.0, DamageClass::NoDamage),
            node("c", 2.0, 3.0, 0.0, DamageClass::NoDamage),
        ];
        for (k, n) in nodes.iter_mut().enumerate() {
            n.post_crop.data_mut()[k] = 1.0;
        }
        let g = build_chip_graph(meta("c"), nodes).unwrap();
        assert_eq!(g.edges.len(), 3);
        for e in &g.edges {
            assert!((e.weight - (-0.5f64).exp()).abs() < 1e-15);
        }
        assert_eq!(g.weight(2, 0), g.weight(0, 2));
    }

    #[test]
    fn cocircular_centroids_match_triangulation() {
        let nodes = vec![
            node("a", 0.0, 0.0, 0.1, DamageClass::NoDamage),
            node("b", 10.0, 0.0, 0.2, DamageClass::NoDamage),
            node("c", 0.0, 10.0, 0.3, DamageClass::NoDamage),
            node("d", 10.0, 10.0, 0.4, DamageClass::MinorDamage),
        ];
        let pts: Vec<Point2> = nodes.iter().map(|n| n.centroid).collect();
        let tri = geo::delaunay(&pts).unwrap();
        let g = build_chip_graph(meta("c"), nodes).unwrap();
        let pairs: Vec<(usize, usize)> = g.edges.iter().map(|e| (e.i, e.j)).collect();
        assert_eq!(pairs, tri.edges);
        assert_eq!(pairs.len(), 5);
        assert!(g.edges.iter().all(|e| e.weight > 0.0 && e.weight < 1.0));
        g.validate().unwrap();
    }

    #[test]
    fn too_few_nodes_propagates_geo_error() {
        let r = build_chip_graph(meta("c"), vec![node("a", 0.0, 0.0, 0.1, DamageClass::NoDamage)]);
        assert!(matches!(r, Err(GraphError::Geo(GeoError::TooFewPoints(1)))));
    }
}

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{ChipGraph, Edge, GraphError, NodeFeatures};
use crate::ingest::DamageClass;

/// Block-diagonal union of whole chip graphs.
#[derive(Debug, Clone, PartialEq)]
pub struct GraphBatch {
    pub features: NodeFeatures,
    /// Undirected edges in batch-global indices.
    pub edges: Vec<Edge>,
    /// Aggregation lists: `(neighbor, weight)` per node, ascending by neighbor.
    pub neighbors: Vec<Vec<(usize, f64)>>,
    /// Member graph index (into `graph_ids`) of every node.
    pub node_graph: Vec<usize>,
    pub graph_ids: Vec<String>,
    pub node_ids: Vec<String>,
    pub labels: Vec<DamageClass>,
}

impl GraphBatch {
    pub fn num_nodes(&self) -> usize {
        self.labels.len()
    }

    /// Label indices and loss mask; unclassified nodes are masked out and
    /// carry index 0.
    pub fn targets(&self) -> (Vec<usize>, Vec<bool>) {
        self.labels.iter().map(|c| c.index().map_or((0, false), |i| (i, true))).unzip()
    }

    /// Assembles a batch from whole graphs, offsetting edge indices by the
    /// cumulative node count.
    pub fn from_graphs(graphs: &[&ChipGraph]) -> Result<Self, GraphError> {
        let Some(first) = graphs.first() else {
            return Err(GraphError::Invalid("empty batch".into()));
        };
        let row_len = first.features.row_len();
        let crops = first.features.is_crops();
        let total: usize = graphs.iter().map(|g| g.num_nodes()).sum();
        let mut data = Vec::with_capacity(total * row_len);
        let mut edges = Vec::new();
        let mut neighbors = Vec::with_capacity(total);
        let mut node_graph = Vec::with_capacity(total);
        let mut graph_ids = Vec::with_capacity(graphs.len());
        let mut node_ids = Vec::with_capacity(total);
        let mut labels = Vec::with_capacity(total);
        let mut offset = 0;
        for (gi, g) in graphs.iter().enumerate() {
            if g.features.is_crops() != crops || g.features.row_len() != row_len {
                return Err(GraphError::Invalid(format!("{}: feature layout differs within batch", g.meta.chip_id)));
            }
            data.extend_from_slice(g.features.data());
            edges.extend(g.edges.iter().map(|e| Edge { i: e.i + offset, j: e.j + offset, weight: e.weight }));
            for (v, adj) in g.adjacency.iter().enumerate() {
                let list = adj
                    .iter()
                    .map(|&u| (u + offset, g.weight(v, u).expect("adjacency matches edges")))
                    .collect();
                neighbors.push(list);
            }
            node_graph.extend(std::iter::repeat_n(gi, g.num_nodes()));
            graph_ids.push(g.meta.chip_id.clone());
            node_ids.extend(g.node_ids.iter().cloned());
            labels.extend_from_slice(&g.labels);
            offset += g.num_nodes();
        }
        let features = if crops { NodeFeatures::Crops(data) } else { NodeFeatures::Embeddings { dim: row_len, data } };
        Ok(Self { features, edges, neighbors, node_graph, graph_ids, node_ids, labels })
    }

    /// Drops every edge; nodes keep their features.
    pub fn without_edges(&self) -> Self {
        let mut b = self.clone();
        b.edges.clear();
        b.neighbors.iter_mut().for_each(Vec::clear);
        b
    }

    /// Relabels nodes so that old node `v` becomes `perm[v]`.
    pub fn permuted(&self, perm: &[usize]) -> Self {
        let n = self.num_nodes();
        assert_eq!(perm.len(), n, "permutation length");
        let w = self.features.row_len();
        let mut data = vec![0.0f32; n * w];
        let mut neighbors = vec![Vec::new(); n];
        let mut node_graph = vec![0; n];
        let mut node_ids = vec![String::new(); n];
        let mut labels = vec![DamageClass::Unclassified; n];
        for v in 0..n {
            let p = perm[v];
            data[p * w..(p + 1) * w].copy_from_slice(self.features.row(v));
            let mut list: Vec<(usize, f64)> = self.neighbors[v].iter().map(|&(u, wt)| (perm[u], wt)).collect();
            list.sort_by_key(|&(u, _)| u);
            neighbors[p] = list;
            node_graph[p] = self.node_graph[v];
            node_ids[p] = self.node_ids[v].clone();
            labels[p] = self.labels[v];
        }
        let mut edges: Vec<Edge> = self
            .edges
            .iter()
            .map(|e| {
                let (a, b) = (perm[e.i], perm[e.j]);
                Edge { i: a.min(b), j: a.max(b), weight: e.weight }
            })
            .collect();
        edges.sort_by_key(|e| (e.i, e.j));
        let features = match &self.features {
            NodeFeatures::Crops(_) => NodeFeatures::Crops(data),
            NodeFeatures::Embeddings { dim, .. } => NodeFeatures::Embeddings { dim: *dim, data },
        };
        Self { features, edges, neighbors, node_graph, graph_ids: self.graph_ids.clone(), node_ids, labels }
    }
}

/// Shuffles graphs with a seeded RNG and packs them greedily, whole, into
/// batches of at most `target_nodes` nodes. A graph larger than the target
/// forms a batch of its own.
pub fn plan_batches(sizes: &[usize], target_nodes: usize, seed: u64) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..sizes.len()).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::new();
    let mut count = 0;
    for g in order {
        if !current.is_empty() && count + sizes[g] > target_nodes {
            batches.push(std::mem::take(&mut current));
            count = 0;
        }
        current.push(g);
        count += sizes[g];
    }
    if !current.is_empty() {
        batches.push(current);
    }
    batches
}

pub fn make_batches(graphs: &[ChipGraph], target_nodes: usize, seed: u64) -> Result<Vec<GraphBatch>, GraphError> {
    let sizes: Vec<usize> = graphs.iter().map(ChipGraph::num_nodes).collect();
    plan_batches(&sizes, target_nodes, seed)
        .into_iter()
        .map(|members| {
            let refs: Vec<&ChipGraph> = members.iter().map(|&g| &graphs[g]).collect();
            GraphBatch::from_graphs(&refs)
        })
        .collect()
}

/// Neighborhood fanout for sampled aggregation. Serialized as `"all"` or a
/// positive count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(try_from = "String", into = "String")]
pub enum Fanout {
    #[default]
    All,
    Limit(usize),
}

impl std::str::FromStr for Fanout {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s.eq_ignore_ascii_case("all") {
            return Ok(Fanout::All);
        }
        match s.parse::<usize>() {
            Ok(0) => Err("fanout must be at least 1".into()),
            Ok(k) => Ok(Fanout::Limit(k)),
            Err(_) => Err(format!("fanout must be a positive integer or 'all', got {s:?}")),
        }
    }
}

impl std::fmt::Display for Fanout {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Fanout::All => f.write_str("all"),
            Fanout::Limit(k) => write!(f, "{k}"),
        }
    }
}

impl TryFrom<String> for Fanout {
    type Error = String;

    fn try_from(s: String) -> Result<Self, Self::Error> {
        s.parse()
    }
}

impl From<Fanout> for String {
    fn from(f: Fanout) -> Self {
        f.to_string()
    }
}

/// Keeps at most `fanout` neighbors per node, chosen uniformly without
/// replacement. Weights of kept neighbors are unchanged.
pub fn neighbor_sample(batch: &GraphBatch, fanout: Fanout, seed: u64) -> GraphBatch {
    let Fanout::Limit(k) = fanout else {
        return batch.clone();
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = batch.clone();
    for list in &mut out.neighbors {
        if list.len() > k {
            let mut keep = index::sample(&mut rng, list.len(), k).into_vec();
            keep.sort_unstable();
            *list = keep.into_iter().map(|i| list[i]).collect();
        }
    }
    out
}

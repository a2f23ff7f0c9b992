#![allow(dead_code)]

use proptest::test_runner::{Config, RngSeed};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use ruinscope::geo::{delaunay, Point2};
use ruinscope::graph::{ChipGraph, ChipMeta, Edge, NodeFeatures};
use ruinscope::ingest::DamageClass;

/// Deterministic proptest settings without a regression file.
pub fn config(cases: u32) -> Config {
    Config { cases, rng_seed: RngSeed::Fixed(0x5eed), failure_persistence: None, ..Config::default() }
}

/// Chip graph over random centroids with embedding features and random edge weights.
pub fn random_graph(seed: u64, n: usize, dim: usize, id: &str) -> ChipGraph {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centroids: Vec<Point2> =
        (0..n).map(|_| Point2::new(rng.random_range(0.0..100.0), rng.random_range(0.0..100.0))).collect();
    let tri = delaunay(&centroids).unwrap();
    let edges: Vec<Edge> = tri.edges.iter().map(|&(i, j)| Edge { i, j, weight: rng.random_range(0.05..=1.0) }).collect();
    let classes = [DamageClass::NoDamage, DamageClass::MinorDamage, DamageClass::MajorOrDestroyed, DamageClass::Unclassified];
    let g = ChipGraph {
        meta: ChipMeta { chip_id: id.into(), disaster_id: "d".into(), disaster_type: "t".into() },
        node_ids: (0..n).map(|i| format!("{id}-{i}")).collect(),
        labels: (0..n).map(|_| classes[rng.random_range(0..4)]).collect(),
        centroids,
        features: NodeFeatures::Embeddings { dim, data: (0..n * dim).map(|_| rng.random_range(-1.0..1.0)).collect() },
        adjacency: tri.neighbors(),
        edges,
    };
    g.validate().unwrap();
    g
}

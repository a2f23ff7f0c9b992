mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use ruinscope::graph::{
    neighbor_sample, plan_batches, read_graph, similarity_weights, write_graph, Fanout, GraphBatch, NodeFeatures,
};

proptest! {
    #![proptest_config(common::config(64))]

    #[test]
    fn batches_keep_chips_apart(sizes in prop::collection::vec(2usize..25, 1..6), seed in any::<u64>()) {
        let graphs: Vec<_> = sizes.iter().enumerate().map(|(k, &n)| common::random_graph(seed ^ k as u64, n, 4, &format!("c{k}"))).collect();
        let refs: Vec<_> = graphs.iter().collect();
        let b = GraphBatch::from_graphs(&refs).unwrap();
        prop_assert_eq!(b.num_nodes(), sizes.iter().sum::<usize>());
        prop_assert_eq!(b.edges.len(), graphs.iter().map(|g| g.edges.len()).sum::<usize>());
        for e in &b.edges {
            prop_assert_eq!(b.node_graph[e.i], b.node_graph[e.j]);
        }
        for (v, list) in b.neighbors.iter().enumerate() {
            for &(u, w) in list {
                prop_assert!(b.neighbors[u].iter().any(|&(x, wx)| x == v && wx == w));
            }
        }
    }

    #[test]
    fn permutation_round_trips(n in 2usize..30, seed in any::<u64>()) {
        let g = common::random_graph(seed, n, 3, "p");
        let b = GraphBatch::from_graphs(&[&g]).unwrap();
        let mut perm: Vec<usize> = (0..n).collect();
        perm.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let mut inverse = vec![0; n];
        for (v, &p) in perm.iter().enumerate() {
            inverse[p] = v;
        }
        prop_assert_eq!(b.permuted(&perm).permuted(&inverse), b);
    }

    #[test]
    fn sampling_keeps_a_subset_of_the_right_size(n in 3usize..40, k in 1usize..6, seed in any::<u64>()) {
        let g = common::random_graph(seed, n, 2, "s");
        let b = GraphBatch::from_graphs(&[&g]).unwrap();
        let s = neighbor_sample(&b, Fanout::Limit(k), seed);
        for (full, kept) in b.neighbors.iter().zip(&s.neighbors) {
            prop_assert_eq!(kept.len(), full.len().min(k));
            prop_assert!(kept.iter().all(|e| full.contains(e)));
            prop_assert!(kept.windows(2).all(|w| w[0].0 < w[1].0));
        }
        prop_assert_eq!(neighbor_sample(&b, Fanout::All, seed), b);
    }

    #[test]
    fn packing_partitions_graphs(sizes in prop::collection::vec(1usize..300, 0..40), target in 1usize..512, seed in any::<u64>()) {
        let plan = plan_batches(&sizes, target, seed);
        let mut seen: Vec<usize> = plan.iter().flatten().copied().collect();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..sizes.len()).collect::<Vec<_>>());
        for batch in &plan {
            let total: usize = batch.iter().map(|&i| sizes[i]).sum();
            prop_assert!(total <= target || batch.len() == 1);
        }
    }

    #[test]
    fn similarity_weights_are_in_unit_interval(rows in prop::collection::vec(prop::collection::vec(-2.0f32..2.0, 5), 2..12)) {
        let n = rows.len();
        let features = NodeFeatures::Embeddings { dim: 5, data: rows.concat() };
        let pairs: Vec<(usize, usize)> = (0..n).flat_map(|i| (i + 1..n).map(move |j| (i, j))).collect();
        let w = similarity_weights(&features, &pairs);
        let swapped: Vec<(usize, usize)> = pairs.iter().map(|&(i, j)| (j, i)).collect();
        prop_assert_eq!(&w, &similarity_weights(&features, &swapped));
        for (&(i, j), &wij) in pairs.iter().zip(&w) {
            prop_assert!(wij > 0.0 && wij <= 1.0);
            if rows[i] == rows[j] {
                prop_assert_eq!(wij, 1.0);
            }
        }
    }

    #[test]
    fn cache_round_trips(n in 2usize..20, seed in any::<u64>()) {
        let g = common::random_graph(seed, n, 6, "cache");
        let mut bytes = Vec::new();
        write_graph(&g, &mut bytes).unwrap();
        let back = read_graph(bytes.as_slice()).unwrap();
        prop_assert_eq!(&back, &g);
        let ids: BTreeSet<_> = back.node_ids.iter().collect();
        prop_assert_eq!(ids.len(), n);
    }
}

#[test]
fn fanout_text_round_trips() {
    for f in [Fanout::All, Fanout::Limit(1), Fanout::Limit(25)] {
        assert_eq!(f.to_string().parse::<Fanout>().unwrap(), f);
    }
    assert!("0".parse::<Fanout>().is_err());
    assert!("many".parse::<Fanout>().is_err());
}

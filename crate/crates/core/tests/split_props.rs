mod common;

use std::collections::BTreeSet;

use proptest::prelude::*;
use ruinscope::experiments::{split, ChipInfo, ExperimentConfig, LeakUnit};

fn corpus(target: usize, other: usize) -> Vec<ChipInfo> {
    let mk = |d: &str, k: usize| ChipInfo { chip_id: format!("{d}-{k:03}"), disaster_id: d.into(), buildings: 1 + k % 9 };
    (0..target).map(|k| mk("target", k)).chain((0..other).map(|k| mk("other", k))).collect()
}

proptest! {
    #![proptest_config(common::config(128))]

    #[test]
    fn split_is_a_disjoint_partition(
        target in 4usize..80,
        other in 1usize..40,
        leak in 0.0f64..0.9,
        by_buildings in any::<bool>(),
        target_in_train in any::<bool>(),
        seed in any::<u64>(),
    ) {
        let chips = corpus(target, other);
        let mut train = vec!["other".to_string()];
        if target_in_train {
            train.push("target".into());
        }
        let cfg = ExperimentConfig {
            train_disasters: train,
            target_disaster: "target".into(),
            leak_fraction: if target_in_train { 0.0 } else { leak },
            leak_unit: if by_buildings { LeakUnit::Buildings } else { LeakUnit::Chips },
            seed,
            ..Default::default()
        };
        let s = split(&chips, &cfg).unwrap();
        let (tr, te, ho): (BTreeSet<_>, BTreeSet<_>, BTreeSet<_>) =
            (s.train.iter().collect(), s.test.iter().collect(), s.hold.iter().collect());
        prop_assert!(tr.is_disjoint(&te) && tr.is_disjoint(&ho) && te.is_disjoint(&ho));
        prop_assert!(s.test.iter().chain(&s.hold).all(|c| c.starts_with("target-")));
        prop_assert!(s.leaked.iter().all(|c| tr.contains(c) && c.starts_with("target-")));
        prop_assert!(s.train.iter().filter(|c| c.starts_with("other-")).count() == other);
        prop_assert!(!s.test.is_empty() && !s.hold.is_empty());
        let reserve = target - s.test.len() - s.hold.len();
        let target_train = s.train.iter().filter(|c| c.starts_with("target-")).count();
        if target_in_train {
            prop_assert_eq!(target_train, reserve);
        } else {
            prop_assert_eq!(target_train, s.leaked.len());
            prop_assert!(s.leaked.len() <= reserve);
            if !by_buildings {
                prop_assert_eq!(s.leaked.len(), (leak * reserve as f64).round() as usize);
            }
        }
        for list in [&s.train, &s.test, &s.hold, &s.leaked] {
            prop_assert!(list.windows(2).all(|w| w[0] < w[1]));
        }
    }
}

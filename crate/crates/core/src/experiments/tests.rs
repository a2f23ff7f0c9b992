use super::*;

fn chips(disaster: &str, n: usize) -> Vec<ChipInfo> {
    (0..n).map(|k| ChipInfo { chip_id: format!("{disaster}-{k:04}"), disaster_id: disaster.into(), buildings: 2 + k % 7 }).collect()
}

fn corpus() -> Vec<ChipInfo> {
    let mut c = chips("flood", 30);
    c.extend(chips("fire", 200));
    c.extend(chips("fire2", 20));
    c
}

fn cfg(train: &[&str], leak: f64) -> ExperimentConfig {
    ExperimentConfig {
        train_disasters: train.iter().map(|s| s.to_string()).collect(),
        target_disaster: "fire".into(),
        leak_fraction: leak,
        seed: 3,
        ..Default::default()
    }
}

fn disjoint(s: &Split) {
    for a in &s.train {
        assert!(!s.test.contains(a) && !s.hold.contains(a));
    }
    for a in &s.test {
        assert!(!s.hold.contains(a));
    }
}

#[test]
fn no_leak_keeps_target_out_of_train() {
    let s = split(&corpus(), &cfg(&["flood"], 0.0)).unwrap();
    assert!(s.train.iter().all(|c| c.starts_with("flood-")));
    assert_eq!(s.train.len(), 30);
    assert_eq!((s.test.len(), s.hold.len()), (50, 50));
    assert!(s.leaked.is_empty());
    disjoint(&s);
}

#[test]
fn ten_percent_of_reserve_leaks() {
    // 200 target chips with a 0.5 train share reserve 100 chips for leaking.
    let s = split(&corpus(), &cfg(&["flood"], 0.1)).unwrap();
    assert_eq!(s.leaked.len(), 10);
    assert_eq!(s.train.len(), 40);
    assert!(s.leaked.iter().all(|c| s.train.contains(c) && !s.test.contains(c) && !s.hold.contains(c)));
    disjoint(&s);
}

#[test]
fn leak_by_buildings_reaches_the_share() {
    let mut c = cfg(&["flood"], 0.1);
    c.leak_unit = LeakUnit::Buildings;
    let info = corpus();
    let s = split(&info, &c).unwrap();
    let b = |ids: &[String]| ids.iter().map(|id| info.iter().find(|c| &c.chip_id == id).unwrap().buildings).sum::<usize>();
    assert!(!s.leaked.is_empty());
    disjoint(&s);
    // Leaked buildings reach 10% of the reserve and stop at the first chip that does.
    let leaked = b(&s.leaked);
    assert!(leaked as f64 >= 0.1 * 100.0 * 2.0);
}

#[test]
fn target_in_train_uses_whole_reserve() {
    let s = split(&corpus(), &cfg(&["fire", "fire2"], 0.0)).unwrap();
    assert_eq!(s.train.len(), 100 + 20);
    disjoint(&s);
}

#[test]
fn same_seed_same_split() {
    let a = split(&corpus(), &cfg(&["flood"], 0.1)).unwrap();
    assert_eq!(a, split(&corpus(), &cfg(&["flood"], 0.1)).unwrap());
    let mut other = cfg(&["flood"], 0.1);
    other.seed = 4;
    assert_ne!(a, split(&corpus(), &other).unwrap());
}

#[test]
fn split_errors() {
    assert!(matches!(split(&corpus(), &cfg(&["quake"], 0.0)), Err(ExperimentError::UnknownDisaster(d)) if d == "quake"));
    let tiny = chips("fire", 1);
    let mut c = cfg(&["fire"], 0.0);
    c.train_disasters = vec!["fire".into()];
    assert!(matches!(split(&tiny, &c), Err(ExperimentError::EmptyTarget(_))));
}

#[test]
fn config_validation() {
    assert!(cfg(&["flood"], 0.0).validate().is_ok());
    assert!(cfg(&["flood"], 1.0).validate().is_err());
    let mut c = cfg(&["flood"], 0.0);
    c.split.hold = 0.5;
    assert!(c.validate().is_err());
    let mut c = cfg(&["flood"], 0.0);
    c.heads = vec![HeadKind::Sage, HeadKind::Sage];
    assert!(c.validate().is_err());
    let toml_cfg: ExperimentConfig = toml::from_str(
        "train_disasters = [\"flood\"]\ntarget_disaster = \"fire\"\nfanout = \"4\"\nheads = [\"sage\"]\n[model.head]\naggregation = \"weighted\"\n",
    )
    .unwrap();
    assert_eq!(toml_cfg.fanout, Fanout::Limit(4));
    assert_eq!(toml_cfg.model.head.aggregation, crate::models::Aggregation::Weighted);
}

#[test]
fn preset_has_four_configurations() {
    let p = cross_disaster_preset(&ExperimentConfig::default());
    assert_eq!(p.len(), 4);
    assert!(p.iter().all(|c| c.target_disaster == SOCAL_FIRE));
    assert_eq!(p[3].leak_fraction, 0.1);
    assert_eq!(p[2].train_disasters, p[3].train_disasters);
}

#[test]
fn infinite_correlation_gives_one_class_per_chip() {
    let cfg = SynthConfig { correlation_length: 1e12, chips: 1, ..Default::default() };
    for index in 0..5 {
        let chip = synth_chip(&cfg, 11, index).unwrap();
        assert!(chip.classes.iter().all(|&c| c == chip.classes[0]));
    }
}

#[test]
fn synth_chip_is_deterministic_and_consistent() {
    let cfg = SynthConfig { coupling: 0.5, ..Default::default() };
    let a = synth_chip(&cfg, 5, 2).unwrap();
    assert_eq!(a, synth_chip(&cfg, 5, 2).unwrap());
    assert!((cfg.min_buildings..=cfg.max_buildings).contains(&a.classes.len()));
    let rec = crate::ingest::chip_from_parts(a.label.clone(), a.pre.clone(), a.post.clone()).unwrap();
    let labels = crate::ingest::merged_labels(&rec).unwrap();
    assert_eq!(labels, a.classes);
    assert!(SynthConfig { correlation_length: 0.0, ..Default::default() }.validate().is_err());
}

#[test]
fn xbd_layout_scans_back_to_the_same_chips() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig { chips: 3, ..Default::default() };
    let rows = synth_generate_layout(&cfg, 1, dir.path(), SynthLayout::Xbd).unwrap();
    let scanned = crate::ingest::scan_xbd_dir(dir.path()).unwrap();
    assert_eq!(rows, scanned);
    let native = synth_chip(&cfg, 1, 0).unwrap();
    let rec = crate::ingest::load_chip(&scanned[0], dir.path()).unwrap();
    assert_eq!(rec.chip_id, native.label.chip_id);
    assert_eq!(crate::ingest::merged_labels(&rec).unwrap(), native.classes);
}

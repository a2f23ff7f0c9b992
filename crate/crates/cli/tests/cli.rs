use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::TempDir;

fn ruinscope(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ruinscope"))
        .current_dir(dir)
        .env_remove("RUINSCOPE_CACHE_DIR")
        .args(args)
        .output()
        .expect("spawn ruinscope")
}

fn ok(dir: &Path, args: &[&str]) -> Output {
    let out = ruinscope(dir, args);
    assert!(out.status.success(), "{args:?} failed:\n{}", String::from_utf8_lossy(&out.stderr));
    out
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

/// Relative path to contents of every file under `root`, run manifests excluded.
fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else if p.file_name().unwrap() != "run_manifest.json" {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn rscg_files(dir: &Path) -> Vec<PathBuf> {
    let Ok(rd) = fs::read_dir(dir) else { return Vec::new() };
    let mut v: Vec<_> = rd.map(|e| e.unwrap().path()).filter(|p| p.extension().is_some_and(|e| e == "rscg")).collect();
    v.sort();
    v
}

/// Small synthetic corpus in `corpus/` and its graph cache in `graphs/cache/`.
fn corpus_with_cache(chips: &str) -> TempDir {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth", "--chips", chips, "--min-buildings", "4", "--max-buildings", "8", "--seed", "3", "--out", "corpus"]);
    ok(t.path(), &["build-graph", "--manifest", "corpus/manifest.csv", "--out", "graphs"]);
    t
}

#[test]
fn synth_is_reproducible_from_the_seed() {
    let t = TempDir::new().unwrap();
    for out in ["a", "b"] {
        ok(t.path(), &["synth", "--chips", "50", "--seed", "7", "--out", out]);
    }
    let (a, b) = (tree(&t.path().join("a")), tree(&t.path().join("b")));
    assert_eq!(a.len(), 50 * 3 + 1);
    assert_eq!(a, b);
    assert!(t.path().join("a/run_manifest.json").exists());

    ok(t.path(), &["synth", "--chips", "50", "--seed", "8", "--out", "c"]);
    assert_ne!(a, tree(&t.path().join("c")));
}

#[test]
fn build_graph_is_bitwise_reproducible_across_job_counts() {
    let t = corpus_with_cache("12");
    ok(t.path(), &["build-graph", "--manifest", "corpus/manifest.csv", "--out", "again", "--jobs", "3"]);
    let first = tree(&t.path().join("graphs"));
    assert_eq!(first.keys().filter(|p| p.extension().is_some_and(|e| e == "rscg")).count(), 12);
    assert_eq!(first, tree(&t.path().join("again")));

    let manifest: serde_json::Value =
        serde_json::from_slice(&fs::read(t.path().join("graphs/run_manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "build-graph");
    assert_eq!(manifest["inputs"].as_array().unwrap().len(), 1 + 12 * 3);
    assert_eq!(manifest["outputs"].as_array().unwrap().len(), 12 + 1);
}

#[test]
fn xbd_tree_builds_the_same_graphs_as_its_manifest() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth", "--chips", "5", "--layout", "xbd", "--out", "xbd"]);
    ok(t.path(), &["build-graph", "--manifest", "xbd/manifest.csv", "--out", "m"]);
    ok(t.path(), &["build-graph", "--xbd-dir", "xbd", "--out", "s"]);
    assert_eq!(tree(&t.path().join("m/cache")), tree(&t.path().join("s/cache")));
}

#[test]
fn single_building_chips_leave_an_empty_cache_and_a_full_log() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth", "--chips", "4", "--out", "corpus"]);
    for e in fs::read_dir(t.path().join("corpus/labels")).unwrap() {
        let p = e.unwrap().path();
        let mut label: serde_json::Value = serde_json::from_slice(&fs::read(&p).unwrap()).unwrap();
        label["buildings"].as_array_mut().unwrap().truncate(1);
        fs::write(&p, serde_json::to_vec(&label).unwrap()).unwrap();
    }
    ok(t.path(), &["build-graph", "--manifest", "corpus/manifest.csv", "--out", "g"]);
    assert!(rscg_files(&t.path().join("g/cache")).is_empty());
    let log: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("g/filter_log.json")).unwrap()).unwrap();
    assert_eq!(log["kept"], 0);
    let discarded = log["discarded"].as_array().unwrap();
    assert_eq!(discarded.len(), 4);
    assert!(discarded.iter().all(|d| d["reason"] == "only_one_building"));
}

#[test]
fn a_corrupted_png_fails_the_build_and_names_the_file() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth", "--chips", "10", "--min-buildings", "3", "--max-buildings", "5", "--out", "corpus"]);
    fs::write(t.path().join("corpus/images/synthetic-00006_post.png"), b"\x89PNG not really").unwrap();
    let out = ruinscope(t.path(), &["build-graph", "--manifest", "corpus/manifest.csv", "--out", "g", "--jobs", "2"]);
    assert!(!out.status.success());
    let err = stderr(&out);
    assert!(err.contains("synthetic-00006_post.png"), "{err}");
    assert!(err.contains("1 of 10 chips failed (9 processed)"), "{err}");
    assert!(rscg_files(&t.path().join("g/cache")).is_empty());
    assert!(!t.path().join("g/filter_log.json").exists());
    assert!(!t.path().join("g/run_manifest.json").exists());
}

#[test]
fn cache_dir_comes_from_the_environment() {
    let t = TempDir::new().unwrap();
    ok(t.path(), &["synth", "--chips", "3", "--out", "corpus"]);
    let out = Command::new(env!("CARGO_BIN_EXE_ruinscope"))
        .current_dir(t.path())
        .env("RUINSCOPE_CACHE_DIR", "shared")
        .args(["build-graph", "--manifest", "corpus/manifest.csv", "--out", "g"])
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", stderr(&out));
    assert_eq!(rscg_files(&t.path().join("shared")).len(), 3);
    assert!(!t.path().join("g/cache").exists());
}

const SELF_TARGET: &[&str] = &["--train-disasters", "synthetic", "--target", "synthetic", "--encoder", "frozen"];

#[test]
fn train_then_evaluate_is_deterministic() {
    let t = corpus_with_cache("12");
    let cache = ["--cache-dir", "graphs/cache"];
    let mut train = vec!["train", "--out", "run", "--epochs", "2", "--seed", "5"];
    train.extend(SELF_TARGET);
    train.extend(cache);
    ok(t.path(), &train);
    for f in ["sage.ckpt", "sage.ckpt.json", "mlp.ckpt", "mlp.ckpt.json", "split.json", "report.json", "run_manifest.json"] {
        assert!(t.path().join("run").join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 5);
    assert_eq!(report["config"]["epochs"], 2);

    let evaluate = |out: &str| {
        let mut args = vec!["evaluate", "--checkpoint", "run/sage.ckpt", "--split-file", "run/split.json"];
        args.extend(["--split", "hold", "--out", out]);
        args.extend(cache);
        ok(t.path(), &args);
        fs::read(t.path().join(out).join("evaluation.json")).unwrap()
    };
    let (a, b) = (evaluate("e1"), evaluate("e2"));
    assert_eq!(a, b);
    let doc: serde_json::Value = serde_json::from_slice(&a).unwrap();
    assert_eq!(doc["head"], "sage");
    assert_eq!(doc["chips"], report["split"]["hold"]);
}

#[test]
fn flags_override_the_config_file() {
    let t = corpus_with_cache("8");
    fs::write(
        t.path().join("exp.json"),
        r#"{"name": "self", "train_disasters": ["synthetic"], "target_disaster": "synthetic",
            "epochs": 1, "seed": 11, "lr": 0.001, "encoder_mode": "frozen", "heads": ["sage"]}"#,
    )
    .unwrap();
    ok(t.path(), &["train", "--config", "exp.json", "--epochs", "2", "--out", "run", "--cache-dir", "graphs/cache"]);
    let report: serde_json::Value = serde_json::from_slice(&fs::read(t.path().join("run/report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["epochs"], 2);
    assert_eq!(report["config"]["seed"], 11);
    assert_eq!(report["config"]["lr"], 0.001);
    assert!(!t.path().join("run/mlp.ckpt").exists());
}

#[test]
fn experiment_with_both_heads_writes_one_table_with_two_blocks() {
    let t = corpus_with_cache("10");
    fs::write(
        t.path().join("suite.toml"),
        r#"
[[experiments]]
name = "self"
train_disasters = ["synthetic"]
target_disaster = "synthetic"
encoder_mode = "frozen"

[[experiments]]
name = "self again"
train_disasters = ["synthetic"]
target_disaster = "synthetic"
encoder_mode = "frozen"
seed = 4
"#,
    )
    .unwrap();
    let args = ["experiment", "--config", "suite.toml", "--head", "both", "--epochs", "2", "--cache-dir", "graphs/cache", "--out", "x"];
    ok(t.path(), &args);
    let csv = fs::read_to_string(t.path().join("x/results_table.csv")).unwrap();
    let header: Vec<&str> = csv.lines().next().unwrap().split(',').collect();
    let siamese = header.iter().position(|h| *h == "Siamese CNN Acc").unwrap();
    let sage = header.iter().position(|h| *h == "Graph SAGE Acc").unwrap();
    assert_eq!((siamese, sage), (4, 8));
    assert_eq!(header.len(), 12);
    assert_eq!(csv.lines().count(), 1 + 2 * 3);
    let gaps = fs::read_to_string(t.path().join("x/gaps.csv")).unwrap();
    assert_eq!(gaps.lines().next().unwrap(), "experiment_index,model,metric,train_minus_hold");
    assert_eq!(gaps.lines().count(), 1 + 2 * 2 * 4);
    assert!(t.path().join("x/reports/01-self.json").exists());
    assert!(t.path().join("x/reports/02-self_again.json").exists());
}

#[test]
fn invalid_combinations_fail_before_any_work() {
    let t = TempDir::new().unwrap();
    let cases: &[(&[&str], &str)] = &[
        (&["train", "--head", "mlp", "--aggregation", "weighted", "--train-disasters", "a", "--target", "a"], "--aggregation"),
        (&["train", "--lr=-1", "--train-disasters", "a", "--target", "a"], "lr"),
        (&["train", "--leak-fraction", "1.5", "--train-disasters", "a", "--target", "b"], "leak_fraction"),
        (&["train", "--epochs", "3"], "train_disasters"),
        (&["experiment", "--preset", "cross-disaster", "--target", "a"], "--preset"),
        (&["evaluate", "--checkpoint", "x.ckpt", "--split", "hold"], "--split-file"),
        (&["build-graph", "--jobs", "0", "--manifest", "m.csv"], "--jobs"),
        (&["synth", "--min-buildings", "1"], "building range"),
    ];
    for (args, needle) in cases {
        let out = ruinscope(t.path(), &[&args[..], &["--out", "o"]].concat());
        assert!(!out.status.success(), "{args:?} succeeded");
        assert!(stderr(&out).contains(needle), "{args:?}: {}", stderr(&out));
    }
    // Nothing was loaded or written: there is no cache anywhere.
    assert!(!t.path().join("o/cache").exists());
    assert!(!t.path().join("o/run_manifest.json").exists());
}

#[test]
fn help_documents_precedence() {
    let out = ok(Path::new("."), &["--help"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert!(text.contains("command-line flags override values read from --config"), "{text}");
}

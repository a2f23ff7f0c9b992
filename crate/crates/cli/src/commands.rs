//! Subcommand implementations.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, ensure, Context, Result};
use ruinscope::experiments::{
    build_row, cross_disaster_preset, embed_graph, evaluate, gap_csv, parse_report, read_config_file, results_table_csv,
    run_experiment, run_experiment_with_models, synth_generate_layout, synth_plan, CorpusLog, EncoderMode,
    ExperimentConfig, ExperimentReport, Split, SuiteConfig, SynthConfig, SynthLayout,
};
use ruinscope::graph::{read_graph_file, write_graph, ChipGraph};
use ruinscope::ingest::{read_manifest, scan_xbd_dir, ManifestRow};
use ruinscope::metrics::MetricsReport;
use ruinscope::models::{sidecar_path, Aggregation, DamageModel, HeadKind};
use serde::Serialize;
use serde_json::json;

use crate::run::Run;
use crate::{
    AggregationChoice, BuildGraphArgs, CacheArgs, Cli, Command, EncoderChoice, EvaluateArgs, ExperimentArgs,
    HeadChoice, LayoutChoice, Preset, SplitChoice, SynthArgs, TrainArgs, TrainFlags,
};

pub const FILTER_LOG: &str = "filter_log.json";
pub const EVALUATION: &str = "evaluation.json";

pub fn dispatch(cli: &Cli) -> Result<()> {
    ensure!(cli.jobs > 0, "--jobs must be at least 1");
    match &cli.command {
        Command::BuildGraph(a) => build_graph(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Evaluate(a) => evaluate_checkpoint(cli, a),
        Command::Experiment(a) => experiment(cli, a),
        Command::Synth(a) => synth(cli, a),
    }
}

fn cache_dir(cli: &Cli, cache: &CacheArgs) -> PathBuf {
    cache.cache_dir.clone().unwrap_or_else(|| cli.out.join("cache"))
}

/// Applies `f` to every item on up to `jobs` threads; results keep input order.
fn par_map<T: Sync, R: Send>(items: &[T], jobs: usize, f: impl Fn(&T) -> R + Sync) -> Vec<R> {
    if jobs <= 1 || items.len() <= 1 {
        return items.iter().map(f).collect();
    }
    let chunk = items.len().div_ceil(jobs);
    let f = &f;
    std::thread::scope(|s| {
        let handles: Vec<_> =
            items.chunks(chunk).map(|c| s.spawn(move || c.iter().map(f).collect::<Vec<R>>())).collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker thread panicked")).collect()
    })
}

fn check_chip_id(id: &str) -> Result<()> {
    ensure!(
        !id.is_empty() && id != "." && id != ".." && !id.contains(['/', '\\']),
        "chip id {id:?} cannot be used as a file name"
    );
    Ok(())
}

fn build_graph(cli: &Cli, a: &BuildGraphArgs) -> Result<()> {
    let (rows, base, source) = match (&a.manifest, &a.xbd_dir) {
        (Some(m), _) => {
            let rows = read_manifest(m).with_context(|| format!("reading {}", m.display()))?;
            (rows, m.parent().unwrap_or(Path::new(".")).to_path_buf(), m.clone())
        }
        (None, Some(d)) => (scan_xbd_dir(d)?, d.clone(), d.clone()),
        (None, None) => bail!("one of --manifest or --xbd-dir is required"),
    };
    let mut seen = BTreeSet::new();
    for r in &rows {
        check_chip_id(&r.chip_id)?;
        ensure!(seen.insert(r.chip_id.as_str()), "chip id {:?} appears twice", r.chip_id);
    }
    let cache = cache_dir(cli, &a.cache);
    let mut run = Run::new("build-graph", &cli.out)?;
    if let Some(m) = &a.manifest {
        run.input(m);
    }
    for r in &rows {
        let (l, p, q) = r.resolve(&base);
        run.inputs([l, p, q]);
    }
    fs::create_dir_all(&cache).with_context(|| format!("creating {}", cache.display()))?;

    let built = par_map(&rows, cli.jobs, |row: &ManifestRow| {
        let outcome = build_row(row, &base)?;
        let encoded = match outcome {
            Ok(g) => {
                let mut bytes = Vec::new();
                write_graph(&g, &mut bytes)?;
                Ok((g, bytes))
            }
            Err(entry) => Err(entry),
        };
        Ok::<_, ruinscope::experiments::ExperimentError>(encoded)
    });

    let errors: Vec<String> = rows
        .iter()
        .zip(&built)
        .filter_map(|(row, r)| r.as_ref().err().map(|e| format!("{}: {e}", row.chip_id)))
        .collect();
    if !errors.is_empty() {
        bail!(
            "{} of {} chips failed ({} processed); no outputs kept:\n  {}",
            errors.len(),
            rows.len(),
            rows.len() - errors.len(),
            errors.join("\n  ")
        );
    }
    let mut log = CorpusLog::default();
    for (row, result) in rows.iter().zip(built) {
        match result {
            Ok(Ok((graph, bytes))) => {
                let path = cache.join(format!("{}.rscg", row.chip_id));
                run.write(&path, &bytes)?;
                let back = read_graph_file(&path).with_context(|| format!("re-reading {}", path.display()))?;
                ensure!(back == graph, "{} does not read back to the graph written", path.display());
                log.kept += 1;
            }
            Ok(Err(entry)) => log.discarded.push(entry),
            Err(_) => unreachable!("errors handled above"),
        }
    }
    eprintln!("kept {} chips, discarded {}", log.kept, log.discarded.len());
    run.write(&cli.out.join(FILTER_LOG), &serde_json::to_vec_pretty(&log)?)?;
    run.finish(json!({ "source": source, "cache_dir": cache, "jobs": cli.jobs }), cli.seed.unwrap_or(0))
}

fn base_config(flags: &TrainFlags) -> Result<ExperimentConfig> {
    Ok(match &flags.config {
        Some(p) => read_config_file(p)?,
        None => ExperimentConfig::default(),
    })
}

/// Layers command-line flags over a config and validates the result.
fn apply_flags(cfg: &mut ExperimentConfig, flags: &TrainFlags, seed: Option<u64>) -> Result<()> {
    if let Some(h) = flags.head {
        cfg.heads = match h {
            HeadChoice::Sage => vec![HeadKind::Sage],
            HeadChoice::Mlp => vec![HeadKind::Mlp],
            HeadChoice::Both => vec![HeadKind::Mlp, HeadKind::Sage],
        };
    }
    if let Some(v) = flags.epochs {
        cfg.epochs = v;
    }
    if let Some(v) = flags.lr {
        cfg.lr = v;
    }
    if let Some(v) = flags.batch_nodes {
        cfg.batch_nodes = v;
    }
    if let Some(v) = flags.fanout {
        cfg.fanout = v;
    }
    if let Some(a) = flags.aggregation {
        ensure!(cfg.heads.contains(&HeadKind::Sage), "--aggregation needs the sage head, but only mlp is selected");
        cfg.model.head.aggregation = match a {
            AggregationChoice::Unweighted => Aggregation::Unweighted,
            AggregationChoice::Weighted => Aggregation::Weighted,
        };
    }
    if let Some(e) = flags.encoder {
        cfg.encoder_mode = match e {
            EncoderChoice::Trainable => EncoderMode::Trainable,
            EncoderChoice::Frozen => EncoderMode::Frozen,
        };
    }
    if let Some(v) = &flags.train_disasters {
        cfg.train_disasters = v.clone();
    }
    if let Some(v) = &flags.target {
        cfg.target_disaster = v.clone();
    }
    if let Some(v) = flags.leak_fraction {
        cfg.leak_fraction = v;
    }
    if let Some(s) = seed {
        cfg.seed = s;
    }
    cfg.validate().with_context(|| format!("experiment {:?}", cfg.name))?;
    Ok(())
}

/// Seeded encoder that embeds crops once when the encoder is frozen.
fn frozen_embedder(cfg: &ExperimentConfig) -> Result<Option<DamageModel<f32>>> {
    Ok(match cfg.encoder_mode {
        EncoderMode::Frozen => Some(DamageModel::new(cfg.model_config(HeadKind::Mlp))?),
        EncoderMode::Trainable => None,
    })
}

fn cache_files(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut paths = Vec::new();
    for entry in fs::read_dir(dir).with_context(|| format!("reading cache directory {}", dir.display()))? {
        let p = entry?.path();
        if p.extension().is_some_and(|e| e == "rscg") {
            paths.push(p);
        }
    }
    paths.sort();
    ensure!(!paths.is_empty(), "no graph cache files in {}", dir.display());
    Ok(paths)
}

/// Reads every cached graph, embedding crops with `embedder` when given.
fn load_corpus(run: &mut Run, dir: &Path, jobs: usize, embedder: Option<&DamageModel<f32>>) -> Result<Vec<ChipGraph>> {
    let paths = cache_files(dir)?;
    run.inputs(paths.iter().cloned());
    par_map(&paths, jobs, |p| {
        let g = read_graph_file(p).with_context(|| format!("reading {}", p.display()))?;
        Ok(match embedder {
            Some(m) => embed_graph(m, g).with_context(|| format!("embedding {}", p.display()))?,
            None => g,
        })
    })
    .into_iter()
    .collect()
}

/// Serializes a report and checks that it parses back to itself.
fn report_bytes(report: &ExperimentReport) -> Result<Vec<u8>> {
    let bytes = serde_json::to_vec_pretty(report)?;
    let back = parse_report(&bytes)?;
    ensure!(&back == report, "report for experiment {} does not round-trip", report.index);
    Ok(bytes)
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let mut cfg = base_config(&a.flags)?;
    apply_flags(&mut cfg, &a.flags, cli.seed)?;
    let embedder = frozen_embedder(&cfg)?;
    let mut run = Run::new("train", &cli.out)?;
    if let Some(c) = &a.flags.config {
        run.input(c);
    }
    let corpus = load_corpus(&mut run, &cache_dir(cli, &a.cache), cli.jobs, embedder.as_ref())?;
    let (report, models) = run_experiment_with_models(1, &cfg, &corpus)?;
    for (head, model) in cfg.heads.iter().zip(&models) {
        let path = cli.out.join(format!("{}.ckpt", head.name()));
        run.created(&path);
        run.created(&sidecar_path(&path));
        model.save(&path)?;
        let back = DamageModel::<f32>::load(&path)?;
        ensure!(&back == model, "{} does not load back to the trained model", path.display());
    }
    run.write(&cli.out.join("split.json"), &serde_json::to_vec_pretty(&report.split)?)?;
    run.write(&cli.out.join("report.json"), &report_bytes(&report)?)?;
    run.finish(serde_json::to_value(&cfg)?, cfg.seed)
}

#[derive(Debug, Serialize)]
struct Evaluation {
    checkpoint: String,
    head: HeadKind,
    split: Option<&'static str>,
    chips: Vec<String>,
    nodes: usize,
    metrics: MetricsReport,
}

fn evaluate_checkpoint(cli: &Cli, a: &EvaluateArgs) -> Result<()> {
    ensure!(a.batch_nodes > 0, "--batch-nodes must be positive");
    let model = DamageModel::<f32>::load(&a.checkpoint).with_context(|| format!("loading {}", a.checkpoint.display()))?;
    let wanted = match (&a.split_file, a.split) {
        (Some(path), Some(which)) => {
            let bytes = fs::read(path).with_context(|| format!("reading {}", path.display()))?;
            let split: Split = serde_json::from_slice(&bytes).with_context(|| format!("parsing {}", path.display()))?;
            let (name, ids) = match which {
                SplitChoice::Train => ("train", split.train),
                SplitChoice::Test => ("test", split.test),
                SplitChoice::Hold => ("hold", split.hold),
            };
            Some((name, ids.into_iter().collect::<BTreeSet<_>>()))
        }
        _ => None,
    };
    let mut run = Run::new("evaluate", &cli.out)?;
    run.input(&a.checkpoint);
    run.input(&sidecar_path(&a.checkpoint));
    if let Some(p) = &a.split_file {
        run.input(p);
    }
    let mut corpus = load_corpus(&mut run, &cache_dir(cli, &a.cache), cli.jobs, Some(&model))?;
    if let Some((name, ids)) = &wanted {
        corpus.retain(|g| ids.contains(&g.meta.chip_id));
        let found: BTreeSet<&String> = corpus.iter().map(|g| &g.meta.chip_id).collect();
        if let Some(missing) = ids.iter().find(|id| !found.contains(id)) {
            bail!("chip {missing:?} of the {name} split is not in the cache");
        }
    }
    ensure!(!corpus.is_empty(), "nothing to evaluate");
    let refs: Vec<&ChipGraph> = corpus.iter().collect();
    let metrics = evaluate(&model, &refs, a.batch_nodes)?;
    let doc = Evaluation {
        checkpoint: a.checkpoint.display().to_string(),
        head: model.head_kind(),
        split: wanted.as_ref().map(|(n, _)| *n),
        chips: corpus.iter().map(|g| g.meta.chip_id.clone()).collect(),
        nodes: metrics.confusion.iter().flatten().sum::<u64>() as usize,
        metrics,
    };
    run.write(&cli.out.join(EVALUATION), &serde_json::to_vec_pretty(&doc)?)?;
    let config = json!({ "checkpoint": doc.checkpoint, "split": doc.split, "batch_nodes": a.batch_nodes });
    run.finish(config, model.config.seed)
}

/// Experiment list from a preset, a suite or single config file, or flags alone.
fn experiment_configs(cli: &Cli, a: &ExperimentArgs) -> Result<Vec<ExperimentConfig>> {
    let mut configs = match (a.preset, &a.flags.config) {
        (Some(Preset::CrossDisaster), _) => cross_disaster_preset(&base_config(&a.flags)?),
        (None, Some(path)) => match read_config_file::<SuiteConfig>(path) {
            Ok(suite) => suite.experiments,
            Err(suite_err) => match read_config_file::<ExperimentConfig>(path) {
                Ok(single) => vec![single],
                Err(single_err) => {
                    bail!("{} is neither a suite ({suite_err}) nor a single experiment ({single_err})", path.display())
                }
            },
        },
        (None, None) => vec![ExperimentConfig::default()],
    };
    ensure!(!configs.is_empty(), "no experiments configured");
    for cfg in &mut configs {
        apply_flags(cfg, &a.flags, cli.seed)?;
    }
    Ok(configs)
}

fn file_stem_for(name: &str) -> String {
    name.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' }).collect()
}

fn experiment(cli: &Cli, a: &ExperimentArgs) -> Result<()> {
    let configs = experiment_configs(cli, a)?;
    let dir = cache_dir(cli, &a.cache);
    let mut run = Run::new("experiment", &cli.out)?;
    if let Some(c) = &a.flags.config {
        run.input(c);
    }
    // Corpora keyed by the encoder that embedded them; "crops" holds raw features.
    let mut corpora: BTreeMap<String, Vec<ChipGraph>> = BTreeMap::new();
    let mut reports = Vec::with_capacity(configs.len());
    for (i, cfg) in configs.iter().enumerate() {
        let index = i + 1;
        let embedder = frozen_embedder(cfg)?;
        let key = match &embedder {
            Some(m) => serde_json::to_string(&(&m.config.encoder, m.config.seed))?,
            None => "crops".to_string(),
        };
        if !corpora.contains_key(&key) {
            let corpus = load_corpus(&mut run, &dir, cli.jobs, embedder.as_ref())?;
            corpora.insert(key.clone(), corpus);
        }
        eprintln!("experiment {index}/{}: {}", configs.len(), cfg.name);
        let report = run_experiment(index, cfg, &corpora[&key]).with_context(|| format!("experiment {index}"))?;
        let name = if cfg.name.is_empty() { "experiment".to_string() } else { file_stem_for(&cfg.name) };
        run.write(&cli.out.join("reports").join(format!("{index:02}-{name}.json")), &report_bytes(&report)?)?;
        reports.push(report);
    }
    run.write(&cli.out.join("results_table.csv"), results_table_csv(&reports)?.as_bytes())?;
    run.write(&cli.out.join("gaps.csv"), gap_csv(&reports)?.as_bytes())?;
    let seed = configs[0].seed;
    run.finish(json!({ "experiments": configs }), seed)
}

fn synth(cli: &Cli, a: &SynthArgs) -> Result<()> {
    let mut cfg: SynthConfig = match &a.config {
        Some(p) => read_config_file(p)?,
        None => SynthConfig::default(),
    };
    if let Some(v) = a.chips {
        cfg.chips = v;
    }
    if let Some(v) = a.min_buildings {
        cfg.min_buildings = v;
    }
    if let Some(v) = a.max_buildings {
        cfg.max_buildings = v;
    }
    if let Some(v) = a.coupling {
        cfg.coupling = v;
    }
    if let Some(v) = a.correlation_length {
        cfg.correlation_length = v;
    }
    cfg.validate()?;
    let layout = match a.layout {
        LayoutChoice::Native => SynthLayout::Native,
        LayoutChoice::Xbd => SynthLayout::Xbd,
    };
    let seed = cli.seed.unwrap_or(0);
    let mut run = Run::new("synth", &cli.out)?;
    if let Some(c) = &a.config {
        run.input(c);
    }
    for row in synth_plan(&cfg, layout)? {
        let (l, p, q) = row.resolve(&cli.out);
        for path in [l, p, q] {
            run.created(&path);
        }
    }
    run.created(&cli.out.join("manifest.csv"));
    let rows = synth_generate_layout(&cfg, seed, &cli.out, layout)?;
    eprintln!("wrote {} chips to {}", rows.len(), cli.out.display());
    run.finish(json!({ "synth": cfg, "layout": layout }), seed)
}

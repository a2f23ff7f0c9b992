//! `ruinscope` command-line driver.

mod commands;
mod run;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use ruinscope::graph::Fanout;

const PRECEDENCE: &str = "\
Settings resolve in layers: command-line flags override values read from \
--config, which override built-in defaults. Every random choice derives \
from --seed (default: the config's seed, else 0).";

#[derive(Parser, Debug)]
#[command(name = "ruinscope", version, about = "Building damage classification on Delaunay building graphs")]
#[command(after_help = PRECEDENCE)]
pub struct Cli {
    /// Seed for every random choice the command makes.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for per-chip ingestion and cache loading.
    #[arg(long, global = true, default_value_t = 1)]
    pub jobs: usize,
    /// Directory receiving the command's artifacts and run_manifest.json.
    #[arg(long, global = true, default_value = "out")]
    pub out: PathBuf,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Ingest chips and write one graph cache file per kept chip.
    BuildGraph(BuildGraphArgs),
    /// Train the selected heads on a config's train split and save checkpoints.
    Train(TrainArgs),
    /// Score a saved checkpoint on cached chips.
    Evaluate(EvaluateArgs),
    /// Run experiments and write reports, the results table and the gap table.
    Experiment(ExperimentArgs),
    /// Generate a synthetic chip corpus.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
#[command(group(ArgGroup::new("source").required(true).args(["manifest", "xbd_dir"])))]
pub struct BuildGraphArgs {
    /// Manifest CSV with chip_id, disaster_id, disaster_type, label_path, pre_path, post_path.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// xBD-style tree with labels/*_post_disaster.json and images/.
    #[arg(long)]
    pub xbd_dir: Option<PathBuf>,
    #[command(flatten)]
    pub cache: CacheArgs,
}

#[derive(Args, Debug)]
pub struct CacheArgs {
    /// Graph cache directory [default: <out>/cache]
    #[arg(long, env = "RUINSCOPE_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum HeadChoice {
    Sage,
    Mlp,
    Both,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum AggregationChoice {
    Unweighted,
    Weighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum EncoderChoice {
    /// Train the encoder jointly with the head.
    Trainable,
    /// Keep the seeded encoder fixed and train the head on its embeddings.
    Frozen,
}

#[derive(Args, Debug, Default)]
pub struct TrainFlags {
    /// Experiment config, TOML or JSON (by `.json` extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Heads to train.
    #[arg(long, value_enum)]
    pub head: Option<HeadChoice>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Target nodes per mini-batch.
    #[arg(long)]
    pub batch_nodes: Option<usize>,
    /// Neighbors kept per node when sampling: `all` or a count.
    #[arg(long)]
    pub fanout: Option<Fanout>,
    /// Neighbor aggregation of the SAGE head.
    #[arg(long, value_enum)]
    pub aggregation: Option<AggregationChoice>,
    #[arg(long, value_enum)]
    pub encoder: Option<EncoderChoice>,
    /// Comma-separated disaster ids used for training.
    #[arg(long, value_delimiter = ',')]
    pub train_disasters: Option<Vec<String>>,
    /// Disaster id split into test and hold.
    #[arg(long)]
    pub target: Option<String>,
    /// Share of the target's training-side chips leaked into training.
    #[arg(long)]
    pub leak_fraction: Option<f64>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    #[command(flatten)]
    pub cache: CacheArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Preset {
    /// Fire to fire, flooding to fire, three disasters to fire, and the same with a 10% target leak.
    CrossDisaster,
}

#[derive(Args, Debug)]
pub struct ExperimentArgs {
    #[command(flatten)]
    pub flags: TrainFlags,
    /// Built-in experiment list; --config then supplies shared settings.
    #[arg(long, value_enum, conflicts_with_all = ["train_disasters", "target", "leak_fraction"])]
    pub preset: Option<Preset>,
    #[command(flatten)]
    pub cache: CacheArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SplitChoice {
    Train,
    Test,
    Hold,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    /// Checkpoint written by `train`; its JSON sidecar must sit next to it.
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Split file written by `train`; without it every cached chip is scored.
    #[arg(long, requires = "split")]
    pub split_file: Option<PathBuf>,
    /// Which part of --split-file to score.
    #[arg(long, value_enum, requires = "split_file")]
    pub split: Option<SplitChoice>,
    /// Nodes per evaluation batch.
    #[arg(long, default_value_t = 256)]
    pub batch_nodes: usize,
    #[command(flatten)]
    pub cache: CacheArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LayoutChoice {
    Native,
    Xbd,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    /// Generator config, TOML or JSON (by `.json` extension).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub chips: Option<usize>,
    #[arg(long)]
    pub min_buildings: Option<usize>,
    #[arg(long)]
    pub max_buildings: Option<usize>,
    /// Weight of the neighbors' mean darkening in each building's darkening.
    #[arg(long)]
    pub coupling: Option<f64>,
    /// Length scale of the damage field, in pixels.
    #[arg(long)]
    pub correlation_length: Option<f64>,
    #[arg(long, value_enum, default_value = "native")]
    pub layout: LayoutChoice,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

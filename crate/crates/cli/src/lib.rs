//! The `cyborg` command line: subcommand definitions and their drivers.

use std::fmt;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use cyborg_core::model::CamClass;
use cyborg_core::preprocess::{Label, Split};
use cyborg_core::train::Scenario;
use serde::{Deserialize, Serialize};

pub mod commands;
pub mod config;
pub mod server;

use config::parse_enum;

/// Bad flags or config contents. Exit code 2.
#[derive(Debug)]
pub struct UsageError(pub String);

impl fmt::Display for UsageError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

pub const EXIT_VALIDATION: u8 = 2;
pub const EXIT_RUNTIME: u8 = 3;

/// 2 for invalid input, 3 for anything that failed while running.
pub fn exit_code(err: &anyhow::Error) -> u8 {
    for cause in err.chain() {
        if cause.is::<UsageError>() {
            return EXIT_VALIDATION;
        }
        if let Some(e) = cause.downcast_ref::<cyborg_core::Error>() {
            return if e.is_validation() { EXIT_VALIDATION } else { EXIT_RUNTIME };
        }
        if cause.is::<serde_json::Error>() {
            return EXIT_VALIDATION;
        }
    }
    EXIT_RUNTIME
}

#[derive(Debug, Parser)]
#[command(name = "cyborg", version, about = "Human-saliency guided training toolkit for synthetic face detection")]
pub struct Cli {
    /// Worker threads for per-sample work. `1` gives the strictly
    /// sequential path.
    #[arg(long, global = true)]
    pub threads: Option<usize>,

    /// Log more (repeat for debug output).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Run the two-alternative forced choice annotation server.
    AnnotateServe(AnnotateServeArgs),
    /// Write the masks stored by the annotation server as JSON lines.
    AnnotateExport(AnnotateExportArgs),
    /// Human saliency maps.
    #[command(subcommand)]
    Saliency(SaliencyCommand),
    /// Build a dataset manifest from labeled image directories.
    Preprocess(PreprocessArgs),
    /// Train one or more seeded runs.
    Train(TrainArgs),
    /// Score test sets with trained checkpoints.
    Eval(EvalArgs),
    /// Combine evaluation run sets into tables and plots.
    Report(ReportArgs),
    /// Synthetic shift benchmark: cross-entropy vs saliency-guided training.
    Toybench(ToyBenchArgs),
}

#[derive(Debug, Subcommand)]
pub enum SaliencyCommand {
    /// Aggregate annotator masks into per-image saliency maps.
    Build(SaliencyBuildArgs),
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnnotateServeArgs {
    /// JSON file whose keys supply defaults for these flags.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Pairs manifest (JSON lines of pair specs).
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    /// Directory holding the append-only record log.
    #[arg(long)]
    pub store: Option<PathBuf>,
    #[arg(long)]
    pub port: Option<u16>,
    #[arg(long)]
    pub host: Option<String>,
    /// Seed for left/right placement.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Built UI bundle to serve at `/`.
    #[arg(long)]
    pub static_dir: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct AnnotateExportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub store: Option<PathBuf>,
    /// Output JSON-lines file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep only annotations whose 2AFC answer was right.
    #[arg(long)]
    #[serde(default)]
    pub correct_only: bool,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct SaliencyBuildArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Exported masks (JSON lines with run-length encoded masks).
    #[arg(long)]
    pub masks: Option<PathBuf>,
    /// Directory of PNG masks laid out as `<image_id>/<annotator_id>.png`
    /// (nonzero pixels are painted; all are treated as correct).
    #[arg(long)]
    pub mask_dir: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Gaussian blur sigma in pixels (0 disables blurring).
    #[arg(long)]
    pub sigma: Option<f64>,
    /// Blur kernel radius in pixels (default ceil(3 sigma)).
    #[arg(long)]
    pub radius: Option<usize>,
    /// Also use annotations whose 2AFC answer was wrong.
    #[arg(long)]
    #[serde(default)]
    pub include_incorrect: bool,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct PreprocessArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Image directory; repeat together with `--label`.
    #[arg(long)]
    #[serde(default)]
    pub images: Vec<PathBuf>,
    /// Label of the matching `--images` directory.
    #[arg(long)]
    #[serde(default)]
    pub label: Vec<Label>,
    /// Directory of `<image_id>.json` face box sidecars.
    #[arg(long)]
    pub boxes: Option<PathBuf>,
    /// Directory of `<image_id>.sal` or `.png` saliency maps.
    #[arg(long)]
    pub saliency: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub split: Option<Split>,
    /// Source (generator) tag recorded on every entry.
    #[arg(long)]
    pub source_tag: Option<String>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct TrainArgs {
    /// Training config (JSON mirroring the train config); flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub train_manifest: Option<PathBuf>,
    #[arg(long)]
    pub val_manifest: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Number of replicate runs (seeds `seed .. seed + N`).
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_parser = parse_enum::<Scenario>)]
    pub scenario: Option<Scenario>,
    #[arg(long, value_parser = parse_enum::<CamClass>)]
    pub cam_class: Option<CamClass>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct EvalArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory of `*.ckpt` files (as written by `train`).
    #[arg(long)]
    pub checkpoints: Option<PathBuf>,
    /// One manifest per test source.
    #[arg(long, num_args = 1..)]
    #[serde(default)]
    pub test_manifests: Vec<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ReportArgs {
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    /// Directory of `eval` outputs, one subdirectory per run set.
    #[arg(long)]
    pub runsets: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Pair decisions (JSON lines, or the `/api/stats` document) for the
    /// pair-accuracy histogram.
    #[arg(long)]
    pub pair_records: Option<PathBuf>,
    /// Histogram bins.
    #[arg(long)]
    pub bins: Option<usize>,
}

#[derive(Debug, Clone, Args, Serialize, Deserialize)]
pub struct ToyBenchArgs {
    /// Benchmark spec (JSON); flags override it.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Replicates per scenario.
    #[arg(long)]
    pub seeds: Option<usize>,
    #[arg(long)]
    pub first_seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long)]
    pub data_seed: Option<u64>,
    /// Leave out the corner marker.
    #[arg(long)]
    #[serde(skip)]
    pub no_spurious_cue: bool,
    /// Leave out the class texture.
    #[arg(long)]
    #[serde(skip)]
    pub no_salient_patch: bool,
    /// Write the generated splits as image directories instead of training.
    #[arg(long)]
    pub export: Option<PathBuf>,
    /// Image channels (3 for data meant for `preprocess`).
    #[arg(long)]
    pub channels: Option<usize>,
}

/// Configure logging and threads, then run the chosen subcommand.
pub fn run(cli: Cli) -> anyhow::Result<()> {
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).try_init();
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(UsageError("--threads must be >= 1".into()).into());
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    match cli.command {
        Command::AnnotateServe(a) => commands::annotate_serve(&a),
        Command::AnnotateExport(a) => commands::annotate_export(&a),
        Command::Saliency(SaliencyCommand::Build(a)) => commands::saliency_build(&a),
        Command::Preprocess(a) => commands::preprocess(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Report(a) => commands::report(&a),
        Command::Toybench(a) => commands::toybench(&a),
    }
}

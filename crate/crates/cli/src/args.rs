use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};

/// Generative hard-negative mining for image-text pairs.
///
/// Settings come from `--config` (TOML with [generation], [filter], [train]
/// and [backends] sections); command flags override the file, which
/// overrides built-in defaults.
#[derive(Debug, Parser)]
#[command(name = "negmine", version)]
pub struct Cli {
    /// TOML config file.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Worker threads (default: one per logical core).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// More log output; repeat for debug.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Decompose scenes, propose concept variations and inpaint them.
    Generate(GenerateArgs),
    /// Score variation groups and apply the ITM and variance-area gates.
    Filter(FilterArgs),
    /// Finetune a projection head on mixed generated and real batches.
    Train(TrainArgs),
    /// Group or retrieval metrics on a test set or public benchmark.
    Eval(EvalArgs),
    /// Score histograms, uniqueness and mask-size tables for a manifest.
    Stats(StatsArgs),
    /// Run the review service.
    Serve(ServeArgs),
    /// Write the curated test set from a manifest and decision log.
    Export(ExportArgs),
    /// Render the built-in fixture corpus and its pairs manifest.
    Fixtures(FixturesArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum BackendChoice {
    Mock,
    Real,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    /// Source pairs (JSONL); image paths resolve against its directory.
    #[arg(long, alias = "input")]
    pub pairs: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    /// Generation seed; also seeds the mock backends.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Objects sampled per image (M).
    #[arg(long)]
    pub objects: Option<usize>,
    /// Variations requested per object (K).
    #[arg(long)]
    pub variations: Option<usize>,
    /// Prompt template (TOML: instruction, query, [[examples]]).
    #[arg(long)]
    pub template: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FilterArgs {
    #[arg(long, alias = "in")]
    pub manifest: PathBuf,
    /// Output directory, or a `.jsonl` path for the filtered manifest.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    #[arg(long)]
    pub itm_threshold: Option<f64>,
    #[arg(long)]
    pub area_threshold: Option<f64>,
    #[arg(long)]
    pub epsilon: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Generated samples; those that passed filtering or review are used.
    #[arg(long, alias = "generated")]
    pub manifest: PathBuf,
    /// Real pairs (default: pairs.jsonl next to the manifest).
    #[arg(long, alias = "real")]
    pub pairs: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub mix_ratio: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_steps: Option<usize>,
}

#[derive(Debug, Args)]
#[command(group(ArgGroup::new("source").required(true).args(["groups", "manifest", "winoground", "aro", "crepe"])))]
pub struct EvalArgs {
    /// Evaluation groups (JSONL of {id, members: [{id, caption, image}]}).
    #[arg(long)]
    pub groups: Option<PathBuf>,
    /// Generated or curated manifest, grouped per source image; rejected
    /// samples are left out.
    #[arg(long)]
    pub manifest: Option<PathBuf>,
    /// Winoground examples.jsonl.
    #[arg(long)]
    pub winoground: Option<PathBuf>,
    /// ARO relation or attribution annotations (JSON array).
    #[arg(long)]
    pub aro: Option<PathBuf>,
    /// CREPE retrieval CSV.
    #[arg(long)]
    pub crepe: Option<PathBuf>,
    /// Category name for CREPE instances.
    #[arg(long, default_value = "all")]
    pub category: String,
    /// Image directory for benchmark annotations.
    #[arg(long)]
    pub image_dir: Option<PathBuf>,
    /// Precomputed embeddings (JSONL of {id, modality, embedding}).
    #[arg(long, conflicts_with = "encoder")]
    pub embeddings: Option<PathBuf>,
    /// Trained projection head applied on top of backend embeddings.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendChoice>,
    #[arg(long)]
    pub report: PathBuf,
}

#[derive(Debug, Args)]
pub struct StatsArgs {
    #[arg(long, alias = "in")]
    pub manifest: PathBuf,
    #[arg(long, alias = "report")]
    pub out: PathBuf,
    #[arg(long, default_value_t = negmine_core::analysis::DEFAULT_BINS)]
    pub bins: usize,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Filtered manifest.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Decision log (default: decisions.jsonl next to the manifest).
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub bind: SocketAddr,
    /// Built review UI bundle.
    #[arg(long)]
    pub ui: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Decision log (default: decisions.jsonl next to the manifest).
    #[arg(long)]
    pub decisions: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct FixturesArgs {
    #[arg(long)]
    pub out: PathBuf,
}

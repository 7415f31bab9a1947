use std::net::SocketAddr;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(name = "recap", version, about = "Low-hallucination recaptioning pipeline")]
pub struct Cli {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Validate raw image-text records and write an ingested dataset.
    Ingest(IngestArgs),
    /// Generate knowledge-enriched captions for manual review.
    GenSftSeed(GenSftSeedArgs),
    /// Sample and score k candidate captions per record.
    SampleCandidates(SampleArgs),
    /// Sample, select chosen/rejected pairs and length-balance them.
    BuildPairs(BuildPairsArgs),
    /// Length-balance an existing pair file.
    Balance(BalanceArgs),
    /// Train a toy policy with DPO on a pair file.
    TrainDpo(TrainDpoArgs),
    /// DPO until plateau, then continuous-DPO rounds, on the synthetic world.
    RunCdpo(RunCdpoArgs),
    /// Judge captions and report hallucination rates.
    Evaluate(EvaluateArgs),
    /// Export approved and edited review items as an SFT dataset.
    Export(ExportArgs),
    /// Serve the review API over a review queue.
    ServeReview(ServeArgs),
    /// Run the whole pipeline on the synthetic world.
    DemoToy(DemoArgs),
    /// Talk to a running review server.
    Review(ReviewArgs),
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("source").required(true).args(["input", "synthetic"]))]
pub struct IngestArgs {
    /// JSONL of raw records: `image_ref` plus optional `id`, `alt_text`, `caption`.
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Generate this many synthetic-world records instead.
    #[arg(long, value_name = "N")]
    pub synthetic: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct GenSftSeedArgs {
    /// Ingested dataset.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long, default_value = "prompts/sft/v1.txt")]
    pub template: PathBuf,
    /// Review queue to create.
    #[arg(long)]
    pub out: PathBuf,
    /// Toy policy checkpoint, when the generator is a toy policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Pre-annotate each caption's details with the configured judge.
    #[arg(long)]
    pub annotate: bool,
    /// Append every endpoint exchange to this JSONL file.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GeneratorArgs {
    /// Toy policy checkpoint, when the generator is a toy policy.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    /// Caption prompt, when the generator is a chat endpoint.
    #[arg(long, default_value = "prompts/sft/v1.txt")]
    pub template: PathBuf,
    /// Candidates per record; overrides the config.
    #[arg(long)]
    pub k: Option<u32>,
    /// Append every endpoint exchange to this JSONL file.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    /// Ingested dataset.
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub generator: GeneratorArgs,
}

#[derive(Debug, Args)]
pub struct BuildPairsArgs {
    /// Ingested dataset.
    #[arg(long)]
    pub input: PathBuf,
    /// Balanced pair file to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Reuse these candidate sets instead of sampling.
    #[arg(long)]
    pub candidates: Option<PathBuf>,
    /// Also write the pairs before balancing.
    #[arg(long)]
    pub pairs_out: Option<PathBuf>,
    #[command(flatten)]
    pub generator: GeneratorArgs,
}

#[derive(Debug, Args)]
pub struct BalanceArgs {
    /// Pair file (stage `pairs` or `balanced`).
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    /// Tolerance on the mean length gap, in tokens.
    #[arg(long)]
    pub epsilon: Option<f64>,
    /// Smallest fraction of pairs to keep.
    #[arg(long)]
    pub retention_floor: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainDpoArgs {
    /// Pair file in synthetic-world token text.
    #[arg(long)]
    pub pairs: PathBuf,
    /// Starting policy checkpoint.
    #[arg(long)]
    pub policy: PathBuf,
    /// Reference checkpoint; the starting policy when omitted.
    #[arg(long)]
    pub reference: Option<PathBuf>,
    #[arg(long)]
    pub out: PathBuf,
    /// Passes over the pairs; defaults to the dpo preset.
    #[arg(long)]
    pub epochs: Option<u32>,
    /// Report non-hallucination rates before and after.
    #[arg(long)]
    pub evaluate: bool,
}

#[derive(Debug, Args)]
pub struct RunCdpoArgs {
    /// Starting policy; the synthetic world's base policy when omitted.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Directory for round checkpoints, pairs and reports.
    #[arg(long)]
    pub out: PathBuf,
    /// Total rounds including plain DPO; overrides the config.
    #[arg(long)]
    pub max_rounds: Option<u32>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum JudgeChoice {
    Oracle,
    Mock,
    Http,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("target").required(true).args(["input", "policy"]))]
pub struct EvaluateArgs {
    /// Caption dataset (stage `ingested` or `sft_export`).
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Evaluate a toy policy checkpoint on the synthetic world instead.
    #[arg(long)]
    pub policy: Option<PathBuf>,
    /// Judge; overrides the config.
    #[arg(long, value_enum)]
    pub judge: Option<JudgeChoice>,
    /// Canned verdicts for the mock judge.
    #[arg(long)]
    pub mock_file: Option<PathBuf>,
    /// Records to sample.
    #[arg(long, default_value_t = recap_core::eval::DEFAULT_SAMPLE_N)]
    pub n: usize,
    /// Sampling seed; defaults to the config seed.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Per-record judgments (JSONL).
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Append every endpoint exchange to this JSONL file.
    #[arg(long)]
    pub audit: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Review queue.
    #[arg(long)]
    pub queue: PathBuf,
    /// Journal; `<queue>.journal` when omitted.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    /// SFT dataset to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Rejected items with reasons; `<out>.rejected.jsonl` when omitted.
    #[arg(long)]
    pub rejected_out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ServeArgs {
    /// Review queue.
    #[arg(long)]
    pub queue: PathBuf,
    /// Journal; `<queue>.journal` when omitted.
    #[arg(long)]
    pub journal: Option<PathBuf>,
    #[arg(long, default_value = "127.0.0.1:8080")]
    pub addr: SocketAddr,
}

#[derive(Debug, Args)]
pub struct DemoArgs {
    /// Run seed; overrides the config.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Parent directory; the run goes to `<out>/toy-seed<S>/`.
    #[arg(long, default_value = "runs")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ReviewArgs {
    #[arg(long, default_value = "http://127.0.0.1:8080")]
    pub server: String,
    #[command(subcommand)]
    pub action: ReviewAction,
}

#[derive(Debug, Subcommand)]
pub enum ReviewAction {
    /// Next pending items.
    Queue {
        #[arg(long, default_value_t = 10)]
        limit: usize,
    },
    Stats,
    Item { id: String },
    Approve {
        id: String,
        #[command(flatten)]
        common: VerdictArgs,
    },
    Edit {
        id: String,
        /// Corrected caption.
        #[arg(long)]
        caption: String,
        #[command(flatten)]
        common: VerdictArgs,
    },
    Reject {
        id: String,
        #[arg(long)]
        reason: Option<String>,
        #[command(flatten)]
        common: VerdictArgs,
    },
}

#[derive(Debug, Args)]
pub struct VerdictArgs {
    #[arg(long)]
    pub reviewer: Option<String>,
    /// Index of a pre-annotated detail to flag; repeatable.
    #[arg(long = "flag")]
    pub flags: Vec<usize>,
}

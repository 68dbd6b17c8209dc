//! Command-line surface. Optional flags fall back to the `--config` file and
//! then to built-in defaults, so most fields here are `Option`.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Debug, Parser)]
#[command(
    name = "falconer",
    version,
    about = "Instruction-driven knowledge mining over text corpora"
)]
pub struct Cli {
    /// Print a single JSON summary object on stdout.
    #[arg(long, global = true)]
    pub json: bool,

    /// TOML file whose keys mirror the long flags (flags win).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,

    /// Root seed; every random step derives its own sub-seed from it.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// More progress output on stderr (repeatable).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Ask a planner model to turn a task into a validated plan.
    Plan(PlanArgs),
    /// Check a plan file and print its validation report.
    Validate(ValidateArgs),
    /// Execute a plan over a corpus.
    Run(RunArgs),
    /// Build a proxy training set from annotator output.
    Generate(GenerateArgs),
    /// Randomize span starts of an extraction dataset.
    Degrade(DegradeArgs),
    /// Score one run against another, or against an extraction dataset.
    Eval(EvalArgs),
    /// Score candidate plans behaviorally against golden plans.
    ScorePlans(ScorePlansArgs),
}

#[derive(Debug, Args, Default)]
pub struct HttpArgs {
    /// Bearer token for HTTP backends.
    #[arg(long, env = "FALCONER_API_KEY", hide_env_values = true)]
    pub api_key: Option<String>,

    /// Base URL of the OpenAI-compatible endpoint used for planning and annotation.
    #[arg(long, env = "FALCONER_PLANNER_URL")]
    pub planner_url: Option<String>,

    /// Base URL of the proxy inference server.
    #[arg(long, env = "FALCONER_PROXY_URL")]
    pub proxy_url: Option<String>,

    /// Per-request timeout in seconds.
    #[arg(long)]
    pub timeout_secs: Option<u64>,

    /// Attempts per request before a backend counts as unreachable.
    #[arg(long)]
    pub retries: Option<u32>,
}

#[derive(Debug, Args, Default)]
pub struct DispatchArgs {
    /// Items per backend call (capped by the backend's own limit).
    #[arg(long)]
    pub batch: Option<usize>,

    /// Concurrent backend calls.
    #[arg(long)]
    pub parallel: Option<usize>,

    /// Directory for the on-disk response cache.
    #[arg(long, env = "FALCONER_CACHE_DIR")]
    pub cache_dir: Option<PathBuf>,

    /// Disable response caching.
    #[arg(long)]
    pub no_cache: bool,
}

#[derive(Debug, Args)]
pub struct PlanArgs {
    /// Natural-language task.
    #[arg(long)]
    pub task: String,

    /// Where to write the plan JSON.
    #[arg(long)]
    pub out: PathBuf,

    /// Directory of `{task, plan}` JSON files used as in-context examples.
    #[arg(long)]
    pub icl_dir: Option<PathBuf>,

    /// Model name sent to the planner endpoint.
    #[arg(long)]
    pub model: Option<String>,

    /// Repair rounds after an invalid reply.
    #[arg(long)]
    pub repairs: Option<usize>,

    #[command(flatten)]
    pub http: HttpArgs,
}

#[derive(Debug, Args)]
pub struct ValidateArgs {
    /// Plan JSON file.
    pub plan: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[arg(long)]
    pub plan: PathBuf,

    /// Corpus JSONL file.
    #[arg(long)]
    pub corpus: PathBuf,

    /// Backend for every primitive: `mock:RULES.json`, `proxy[:URL]` or `annotator:MODEL`.
    #[arg(long)]
    pub backend: Option<String>,

    /// Backend for Label nodes (overrides --backend).
    #[arg(long)]
    pub label_backend: Option<String>,

    /// Backend for Span nodes (overrides --backend).
    #[arg(long)]
    pub span_backend: Option<String>,

    /// Output directory for results.jsonl and report.json.
    #[arg(long)]
    pub out: Option<PathBuf>,

    /// Abort on the first failed item instead of dropping its record.
    #[arg(long)]
    pub strict: bool,

    #[command(flatten)]
    pub dispatch: DispatchArgs,

    #[command(flatten)]
    pub http: HttpArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Mode {
    Classification,
    Extraction,
}

#[derive(Debug, Args)]
pub struct GenerateArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,

    /// Label to rank records by (classification).
    #[arg(long)]
    pub label: Option<String>,

    /// Extraction instruction (extraction).
    #[arg(long)]
    pub instruction: Option<String>,

    /// Positives and negatives each (classification) or sampled records (extraction).
    #[arg(long)]
    pub n: usize,

    #[arg(long)]
    pub corpus: PathBuf,

    /// Annotator backend spec.
    #[arg(long)]
    pub backend: Option<String>,

    /// Dataset output directory.
    #[arg(long)]
    pub out: PathBuf,

    #[command(flatten)]
    pub dispatch: DispatchArgs,

    #[command(flatten)]
    pub http: HttpArgs,
}

#[derive(Debug, Args)]
pub struct DegradeArgs {
    /// Extraction dataset directory.
    #[arg(long)]
    pub dataset: PathBuf,

    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Format {
    Json,
    Markdown,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Results file of the run being scored.
    #[arg(long)]
    pub pred: PathBuf,

    /// Reference results file, or an extraction dataset directory.
    #[arg(long)]
    pub gold: PathBuf,

    #[arg(long)]
    pub corpus: PathBuf,

    /// Span field of the prediction compared against a dataset (default: the only span field).
    #[arg(long)]
    pub field: Option<String>,

    #[arg(long, value_enum, default_value = "markdown")]
    pub format: Format,

    /// Also write the rendered report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct ScorePlansArgs {
    /// Directory of candidate `{task, plan | error}` files.
    #[arg(long)]
    pub candidates: PathBuf,

    /// Directory of golden `{task, plan}` files.
    #[arg(long)]
    pub golden: PathBuf,

    /// Corpus both plans are executed on.
    #[arg(long)]
    pub probe: PathBuf,

    /// Mock rules spec, `mock:RULES.json`.
    #[arg(long)]
    pub backend: Option<String>,

    /// Write the score JSON here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

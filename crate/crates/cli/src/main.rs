use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

mod commands;
mod config;

#[derive(Parser, Debug)]
#[command(
    name = "isrf",
    version,
    about = "Semantic-reasoning generative recommendation pipeline"
)]
struct Cli {
    /// Pipeline config (JSON, one section per stage).
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load interactions, split leave-one-out and sample DR candidates.
    Prepare(PrepareArgs),
    /// Generate positive/negative/fused descriptions for items or users.
    Reason(ReasonArgs),
    /// Embed stored descriptions, optionally reducing them with PCA.
    Embed(EmbedArgs),
    /// Build the interaction or semantic relation graph.
    Graph(GraphArgs),
    /// Train a model and write checkpoint, history and test metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the test split.
    Eval(EvalArgs),
    /// Recommend items for one user from a checkpoint.
    Infer(InferArgs),
    /// Train and evaluate every ablation of the configured task.
    Ablate(RunArgs),
    /// Train and evaluate every semantic variant.
    Variants(RunArgs),
    /// Sweep one hyperparameter.
    Sweep(SweepArgs),
    /// Neighbour and recommendation report for one user.
    CaseStudy(CaseStudyArgs),
    /// Write a planted-group synthetic dataset and a matching config.
    Synth(SynthArgs),
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub interactions: Option<PathBuf>,
    #[arg(long)]
    pub n_neg: Option<usize>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Entities {
    Items,
    Users,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum ClientKind {
    File,
    Http,
}

#[derive(Args, Debug)]
pub struct ReasonArgs {
    #[arg(long, value_enum)]
    pub entities: Entities,
    #[arg(long, value_enum)]
    pub client: ClientKind,
    /// Output record store (JSON lines); existing complete records are kept.
    #[arg(long)]
    pub store: PathBuf,
    /// Pre-generated responses for the file client (JSON lines {prompt, response}).
    #[arg(long)]
    pub responses: Option<PathBuf>,
    /// Item attributes (JSON lines {index, attributes: {key: value}}).
    #[arg(long)]
    pub attributes: Option<PathBuf>,
    /// Item record store, needed for user prompts.
    #[arg(long)]
    pub item_store: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Field {
    Fused,
    Positive,
    Negative,
}

#[derive(Args, Debug)]
pub struct EmbedArgs {
    #[arg(long)]
    pub store: PathBuf,
    #[arg(long, value_enum)]
    pub entities: Entities,
    #[arg(long, value_enum)]
    pub client: ClientKind,
    /// Embedding matrix served by the file client.
    #[arg(long)]
    pub matrix: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "fused")]
    pub field: Field,
    /// Output dimension of the HTTP encoder.
    #[arg(long)]
    pub dim: Option<usize>,
    /// Also fit PCA with this many components and write `<out>.pca` and `<out>.reduced`.
    #[arg(long)]
    pub pca: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum GraphKind {
    Interaction,
    Relation,
}

#[derive(Args, Debug)]
pub struct GraphArgs {
    #[arg(long, value_enum)]
    pub kind: GraphKind,
    #[arg(long)]
    pub k: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum TaskArg {
    Sr,
    Dr,
}

#[derive(Args, Debug, Clone, Default)]
pub struct TrainOverrides {
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub max_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub beam: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct InferArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum)]
    pub task: Option<TaskArg>,
    #[arg(long)]
    pub beam: Option<usize>,
    /// One user; all users when omitted.
    #[arg(long)]
    pub user: Option<usize>,
    #[arg(long, default_value_t = 10)]
    pub top: usize,
    /// Output file (JSON lines); stdout when omitted.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RunArgs {
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SweepArgs {
    /// `Lprime` or `k`.
    #[arg(long)]
    pub param: String,
    /// Comma-separated values.
    #[arg(long, value_delimiter = ',')]
    pub values: Vec<usize>,
    #[command(flatten)]
    pub overrides: TrainOverrides,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct CaseStudyArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub user: usize,
    #[arg(long, default_value_t = 10)]
    pub top_m: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub noise: Option<f64>,
    #[arg(long)]
    pub n_users: Option<usize>,
    #[arg(long)]
    pub n_items: Option<usize>,
    #[arg(long)]
    pub out: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(n) = cli.threads {
        if let Err(e) = rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global() {
            eprintln!("error: cannot set thread count: {e}");
            return ExitCode::from(2);
        }
    }
    let cfg = match config::PipelineConfig::load(cli.config.as_deref()) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: cannot read config: {e}");
            return ExitCode::from(2);
        }
    };
    let (stage, result) = commands::run(cli.command, cfg);
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: stage `{stage}` failed: {e}");
            ExitCode::from(1)
        }
    }
}

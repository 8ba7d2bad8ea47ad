mod commands;
mod config;
mod manifest;
mod selfcheck;

use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use tamlab::benchgen::{Family, Mode, TaskSet};
use tamlab::meta::AdaptMethod;

#[derive(Parser)]
#[command(name = "tamlab", version, about = "Few-shot task-embedding experiments on synthetic sequence benchmarks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a benchmark split file.
    Gen(GenArgs),
    /// Train a model from an experiment config.
    Train(TrainArgs),
    /// Adapt to held-out tasks and write a metrics table.
    Eval(EvalArgs),
    /// Project per-task embeddings of a path-finding split onto two principal axes.
    VizEmbeddings(VizArgs),
    /// Run gradient checks and the reference example validations.
    Selfcheck,
}

#[derive(Clone, Copy, ValueEnum)]
pub enum FamilyArg {
    #[value(alias = "classification")]
    Class,
    #[value(alias = "transduction")]
    Trans,
    #[value(alias = "pathfinding")]
    Path,
}

impl From<FamilyArg> for Family {
    fn from(f: FamilyArg) -> Self {
        match f {
            FamilyArg::Class => Family::Classification,
            FamilyArg::Trans => Family::Transduction,
            FamilyArg::Path => Family::Pathfinding,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum ModeArg {
    Plain,
    #[value(alias = "compositional")]
    Comp,
}

impl From<ModeArg> for Mode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Plain => Mode::Plain,
            ModeArg::Comp => Mode::Compositional,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum SetArg {
    Train,
    Val,
    Test,
}

impl From<SetArg> for TaskSet {
    fn from(s: SetArg) -> Self {
        match s {
            SetArg::Train => TaskSet::Train,
            SetArg::Val => TaskSet::Val,
            SetArg::Test => TaskSet::Test,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
pub enum AdaptArg {
    None,
    TamZ,
    CompSlot,
    FinetuneFull,
}

impl From<AdaptArg> for AdaptMethod {
    fn from(a: AdaptArg) -> Self {
        match a {
            AdaptArg::None => AdaptMethod::None,
            AdaptArg::TamZ => AdaptMethod::TamZ,
            AdaptArg::CompSlot => AdaptMethod::CompSlot,
            AdaptArg::FinetuneFull => AdaptMethod::FinetuneFull,
        }
    }
}

#[derive(Args)]
pub struct GenArgs {
    #[arg(long, value_enum)]
    pub family: FamilyArg,
    #[arg(long, value_enum, default_value = "plain")]
    pub mode: ModeArg,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Base generation config (JSON); flags override its fields.
    #[arg(long)]
    pub config: Option<std::path::PathBuf>,
    #[arg(long)]
    pub train_tasks: Option<usize>,
    #[arg(long)]
    pub val_tasks: Option<usize>,
    #[arg(long)]
    pub test_tasks: Option<usize>,
    #[arg(long)]
    pub examples_per_task: Option<usize>,
    #[arg(long)]
    pub support_size: Option<usize>,
    /// Output split file.
    #[arg(long, short)]
    pub out: std::path::PathBuf,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Experiment config (JSON).
    #[arg(long, required_unless_present = "print_config")]
    pub config: Option<std::path::PathBuf>,
    /// Print the effective config with every default filled in, then exit.
    #[arg(long)]
    pub print_config: bool,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct EvalArgs {
    /// Checkpoint file; repeat to aggregate over seeds.
    #[arg(long, required = true)]
    pub checkpoint: Vec<std::path::PathBuf>,
    #[arg(long)]
    pub split: std::path::PathBuf,
    /// Comma-separated shot counts.
    #[arg(long, value_delimiter = ',', default_value = "1,5,10,20")]
    pub k: Vec<usize>,
    /// Adaptation method (default: the one paired with the training method).
    #[arg(long, value_enum)]
    pub method: Option<AdaptArg>,
    #[arg(long, value_enum, default_value = "test")]
    pub set: SetArg,
    /// Evaluation examples per task (all when 0).
    #[arg(long, default_value_t = 0)]
    pub max_eval: usize,
    /// CSV destination (stdout when absent).
    #[arg(long, short)]
    pub out: Option<std::path::PathBuf>,
    #[arg(long, default_value_t = 1)]
    pub jobs: usize,
}

#[derive(Args)]
pub struct VizArgs {
    #[arg(long)]
    pub checkpoint: std::path::PathBuf,
    #[arg(long)]
    pub split: std::path::PathBuf,
    /// Keep tasks starting at this cell, written `row,col`.
    #[arg(long)]
    pub start: String,
    #[arg(long, value_enum, default_value = "test")]
    pub set: SetArg,
    /// Support examples used to infer each embedding.
    #[arg(long, default_value_t = 20)]
    pub k: usize,
    #[arg(long, short)]
    pub out: Option<std::path::PathBuf>,
}

/// Failure classes with their exit codes.
pub enum CliError {
    /// Bad flags or configuration (exit 2).
    Usage(String),
    /// Anything else (exit 1).
    Runtime(anyhow::Error),
}

impl<E: Into<anyhow::Error>> From<E> for CliError {
    fn from(e: E) -> Self {
        CliError::Runtime(e.into())
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Gen(a) => commands::gen(&a),
        Command::Train(a) => commands::train(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::VizEmbeddings(a) => commands::viz(&a),
        Command::Selfcheck => selfcheck::run(),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
        Err(CliError::Runtime(e)) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}

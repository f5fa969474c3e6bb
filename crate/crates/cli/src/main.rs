//! `eduembed` command-line front end.
//!
//! Exit codes: 0 when the report was written, 1 for usage errors, 2 for data
//! errors and 3 for numeric failures.

mod commands;
mod report;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use eduembed::cat::Strategy;
use eduembed::cdmodels::Head;
use eduembed::{Error, ErrorKind};

#[derive(Parser, Debug)]
#[command(name = "eduembed", version, about = "Cognitive diagnosis with textual and ID embeddings")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Load a raw corpus, drop sparse students, write canonical files and attribute texts.
    Prepare(PrepareArgs),
    /// Write a planted synthetic corpus with its generating parameters.
    Synth(SynthArgs),
    /// Train the attribute encoder and export the frozen embedding table.
    Stage1(Stage1Args),
    /// Train and score a Stage-2 diagnosis model for one scenario.
    Train(TrainArgs),
    /// Simulate adaptive testing on a pretrained model.
    Cat(CatArgs),
    /// Re-score a saved transductive checkpoint on one split.
    Eval(EvalArgs),
    /// Repeat a scenario over consecutive seeds and report mean and std.
    Seeds(SeedsArgs),
}

/// Config file plus the flags that override it.
#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// TOML run configuration; unset keys keep their defaults.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub stage1_epochs: Option<usize>,
}

#[derive(Args, Debug)]
pub struct PrepareArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long)]
    pub min_responses: Option<usize>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    A,
    B,
}

#[derive(Args, Debug)]
pub struct SynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// `b` uses disjoint identifiers and concept names.
    #[arg(long, value_enum, default_value_t = Domain::A)]
    pub domain: Domain,
}

#[derive(Args, Debug)]
pub struct Stage1Args {
    #[arg(long)]
    pub corpus: PathBuf,
    /// Embedding table to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Encoder checkpoint; defaults to the table path with extension `encoder`.
    #[arg(long)]
    pub encoder: Option<PathBuf>,
    /// Defaults to the table path with extension `report.json`.
    #[arg(long)]
    pub report: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scenario {
    Transductive,
    Inductive,
    CrossDomain,
    CrossSubject,
}

impl Scenario {
    pub fn name(self) -> &'static str {
        match self {
            Scenario::Transductive => "transductive",
            Scenario::Inductive => "inductive",
            Scenario::CrossDomain => "cross-domain",
            Scenario::CrossSubject => "cross-subject",
        }
    }
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum HeadArg {
    Mirt,
    #[value(alias = "mlp")]
    MonotoneMlp,
}

impl From<HeadArg> for Head {
    fn from(h: HeadArg) -> Self {
        match h {
            HeadArg::Mirt => Head::Mirt,
            HeadArg::MonotoneMlp => Head::MonotoneMlp,
        }
    }
}

/// Everything a Stage-2 scenario run needs besides its output location.
#[derive(Args, Debug, Clone)]
pub struct ScenarioArgs {
    #[arg(long, value_enum)]
    pub scenario: Scenario,
    /// Corpus directory (transductive and inductive).
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Stage-1 table (transductive only); Stage 1 is run in-process when absent.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    /// Source corpus directory; repeat for several sources.
    #[arg(long)]
    pub source: Vec<PathBuf>,
    #[arg(long)]
    pub target: Option<PathBuf>,
    #[arg(long)]
    pub lambda: Option<f64>,
    #[arg(long)]
    pub alpha: Option<f64>,
    #[arg(long, value_enum)]
    pub head: Option<HeadArg>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    #[command(flatten)]
    pub run: ScenarioArgs,
    /// Output directory for the checkpoint, report and mastery table.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum StrategyArg {
    Random,
    Maxinfo,
    Emc,
}

impl From<StrategyArg> for Strategy {
    fn from(s: StrategyArg) -> Self {
        match s {
            StrategyArg::Random => Strategy::Random,
            StrategyArg::Maxinfo => Strategy::MaxFisherInfo,
            StrategyArg::Emc => Strategy::ExpectedModelChange,
        }
    }
}

#[derive(Args, Debug, Clone)]
pub struct CatRunArgs {
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, value_enum, default_value_t = StrategyArg::Random)]
    pub strategy: StrategyArg,
    /// Checkpoint steps; overrides the config's `checkpoints`.
    #[arg(long, value_delimiter = ',')]
    pub steps: Option<Vec<usize>>,
    /// Planted parameters written by `synth`; answers are then sampled from
    /// the generating model and any unseen exercise may be asked.
    #[arg(long)]
    pub planted: Option<PathBuf>,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Args, Debug)]
pub struct CatArgs {
    #[command(flatten)]
    pub run: CatRunArgs,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(ValueEnum, Debug, Clone, Copy, PartialEq, Eq)]
pub enum SplitArg {
    Train,
    Valid,
    Test,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub corpus: PathBuf,
    /// Needed when the model reads textual embeddings.
    #[arg(long)]
    pub emb: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = SplitArg::Test)]
    pub split: SplitArg,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub cfg: ConfigArgs,
}

#[derive(Subcommand, Debug)]
pub enum SeedsCommand {
    Train(ScenarioArgs),
    Cat(CatRunArgs),
}

#[derive(Args, Debug)]
pub struct SeedsArgs {
    #[arg(long, default_value_t = 5)]
    pub n: u64,
    /// Seeds are `start..start + n`.
    #[arg(long, default_value_t = 0)]
    pub start: u64,
    #[arg(long)]
    pub out: PathBuf,
    #[command(subcommand)]
    pub what: SeedsCommand,
}

fn exit_code(e: &Error) -> u8 {
    match e.kind() {
        ErrorKind::Usage => 1,
        ErrorKind::Data => 2,
        ErrorKind::Numeric => 3,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let result = match cli.command {
        Command::Prepare(a) => commands::prepare(&a),
        Command::Synth(a) => commands::synth(&a),
        Command::Stage1(a) => commands::stage1(&a),
        Command::Train(a) => commands::train(&a),
        Command::Cat(a) => commands::cat(&a),
        Command::Eval(a) => commands::eval(&a),
        Command::Seeds(a) => commands::seeds(&a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

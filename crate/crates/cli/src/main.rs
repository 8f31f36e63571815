//! `mmk`: data generation, training, evaluation, decoding, gradient
//! checking, retrieval inspection and the ablation grid.
//!
//! Exit codes: 0 success, 1 invalid input (files, flags, configs), 2
//! runtime or numeric failure.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser, Debug)]
#[command(
    name = "mmk",
    version,
    about = "Multi-task knowledge-infused dialogue summarization"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a synthetic dialogue corpus and its knowledge base.
    GenData(GenDataArgs),
    /// Train a model and write checkpoints plus a training log.
    Train(TrainArgs),
    /// Decode a split and score it against the gold targets.
    Eval(EvalArgs),
    /// Decode dialogues and print one JSON object per line.
    Generate(GenerateArgs),
    /// Finite-difference check of the full model gradient.
    Gradcheck(GradcheckArgs),
    /// Rank knowledge entries for a query.
    Retrieve(RetrieveArgs),
    /// Run the four-configuration task ablation over several seeds.
    Ablate(AblateArgs),
}

#[derive(Args, Debug)]
pub struct GenDataArgs {
    /// Number of dialogues.
    #[arg(long, default_value_t = 500)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Visual feature dimension (0 omits visual vectors).
    #[arg(long, default_value_t = 24)]
    pub dvis: usize,
    /// Output directory (dialogues.jsonl, knowledge.jsonl).
    #[arg(long)]
    pub out: PathBuf,
    /// Overwrite an existing output directory (default: refuse).
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Dataset (JSON Lines).
    #[arg(long)]
    pub data: PathBuf,
    /// Preset name (test-nano, test-small, desk-default) or TOML file.
    #[arg(long, default_value = "desk-default")]
    pub config: String,
    /// Comma-separated task set.
    #[arg(long, default_value = "sum,mcs,di")]
    pub tasks: String,
    /// Knowledge base (JSON Lines).
    #[arg(long)]
    pub kb: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Records to train on: train (dev split used for model selection) or all.
    #[arg(long, default_value = "train")]
    pub split: String,
    /// Seed override (default: the config's seed).
    #[arg(long)]
    pub seed: Option<u64>,
    /// Step count override (default: the config's max_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overwrite an existing output directory (default: refuse).
    #[arg(long, default_value_t = false)]
    pub force: bool,
}

#[derive(Args, Debug)]
pub struct DecodeArgs {
    /// Beam width; 1 decodes greedily.
    #[arg(long, default_value_t = 4)]
    pub beam: usize,
    /// Maximum generated tokens.
    #[arg(long = "max-new", default_value_t = 40)]
    pub max_new: usize,
    /// Length penalty exponent α in logp / len^α.
    #[arg(long = "length-penalty", default_value_t = 0.6)]
    pub length_penalty: f64,
}

#[derive(Args, Debug)]
pub struct EvalArgs {
    /// Checkpoint file; vocab.json and knowledge.jsonl are read from its directory (default: none, requires --predictions).
    #[arg(long)]
    pub ckpt: Option<PathBuf>,
    /// Dataset with gold targets.
    #[arg(long)]
    pub data: PathBuf,
    /// train, dev, test or all.
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Report CSV (a Markdown copy is written next to it).
    #[arg(long)]
    pub report: PathBuf,
    /// Tasks to evaluate.
    #[arg(long, default_value = "sum,mcs,di")]
    pub tasks: String,
    /// Score these predictions ({"id", "task", "output"} per line) instead of decoding (default: decode with --ckpt).
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    /// Knowledge base (default: the one saved with the checkpoint).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct GenerateArgs {
    #[arg(long)]
    pub ckpt: PathBuf,
    /// Dialogues (JSON Lines), or - for stdin.
    #[arg(long)]
    pub input: String,
    #[arg(long, default_value = "sum")]
    pub task: String,
    /// Knowledge base (default: the one saved with the checkpoint).
    #[arg(long)]
    pub kb: Option<PathBuf>,
    #[command(flatten)]
    pub decode: DecodeArgs,
}

#[derive(Args, Debug)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "test-nano")]
    pub config: String,
    /// Finite-difference step.
    #[arg(long, default_value_t = 1e-5)]
    pub eps: f64,
    /// Pass threshold on the maximum relative error.
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Seed for the random input and the coordinate sample.
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Write the full per-block report (JSON) here (default: stdout summary only).
    #[arg(long)]
    pub report: Option<PathBuf>,
}

#[derive(Args, Debug)]
pub struct RetrieveArgs {
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long)]
    pub query: String,
    #[arg(long, default_value_t = 3)]
    pub k: usize,
}

#[derive(Args, Debug)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    /// Knowledge base (JSON Lines).
    #[arg(long)]
    pub kb: PathBuf,
    #[arg(long, default_value = "desk-default")]
    pub config: String,
    /// Comma-separated seeds.
    #[arg(long, default_value = "1,2,3")]
    pub seeds: String,
    /// Output directory (ablation.csv, ablation_summary.csv, ablation.md).
    #[arg(long)]
    pub out: PathBuf,
    /// Append the published reference rows, flagged paper_scale=true (default: off).
    #[arg(long = "paper-reference", default_value_t = false)]
    pub paper_reference: bool,
    /// Step count override (default: the config's max_steps).
    #[arg(long)]
    pub steps: Option<usize>,
    /// Overwrite an existing output directory (default: refuse).
    #[arg(long, default_value_t = false)]
    pub force: bool,
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
        Command::GenData(a) => commands::gen_data(a),
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Generate(a) => commands::generate(a),
        Command::Gradcheck(a) => commands::gradcheck(a),
        Command::Retrieve(a) => commands::retrieve(a),
        Command::Ablate(a) => commands::ablate(a),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_validation() { 1 } else { 2 })
        }
    }
}

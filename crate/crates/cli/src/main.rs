//! `deftkit` — convert, train, predict, evaluate and ensemble on DEFT-style
//! definition extraction corpora.
//!
//! Exit status: 0 on success, 2 for configuration problems (bad flags, bad
//! config file, bad hyperparameters), 3 for data problems (unparseable or
//! mismatched files), 1 for anything else.

use std::path::PathBuf;
use std::process;

use clap::{Args, Parser, Subcommand};
use deftkit::Error;

mod commands;

#[derive(Parser)]
#[command(name = "deftkit", version, about = "Definition extraction toolkit for DEFT-style corpora")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Convert a directory of DEFT files into a record file.
    Convert(ConvertArgs),
    /// Train a tagging / relation model on a record file.
    Train(TrainArgs),
    /// Tag a record file with a trained model.
    Predict(PredictArgs),
    /// Score a prediction file against gold records.
    Evaluate(EvaluateArgs),
    /// Majority-vote several prediction files into one.
    Ensemble(EnsembleArgs),
    /// Check analytic gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Print span and relation statistics for a corpus.
    Stats(StatsArgs),
    /// Generate the bundled synthetic corpus.
    Fixture(FixtureArgs),
}

#[derive(Args)]
pub struct ConvertArgs {
    /// Directory of .deft/.tsv files (defaults to $DEFTKIT_DATA_DIR).
    #[arg(long, env = "DEFTKIT_DATA_DIR")]
    pub input: PathBuf,
    /// Record file to write, one JSON object per window.
    #[arg(long)]
    pub output: PathBuf,
    /// Hold out this many whole files as a dev split.
    #[arg(long, requires = "dev_output")]
    pub dev_files: Option<usize>,
    /// Record file for the held-out windows.
    #[arg(long, requires = "dev_files")]
    pub dev_output: Option<PathBuf>,
    /// Seed for the dev-split draw.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
    /// Warn on unknown labels instead of failing.
    #[arg(long)]
    pub permissive: bool,
}

#[derive(Args)]
pub struct TrainArgs {
    /// Training record file.
    #[arg(long)]
    pub train: PathBuf,
    /// Dev record file for early stopping.
    #[arg(long)]
    pub dev: Option<PathBuf>,
    /// Checkpoint file to write.
    #[arg(long)]
    pub output: PathBuf,
    /// TOML file with [model] and [train] sections; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Write per-epoch statistics as JSON lines.
    #[arg(long)]
    pub log: Option<PathBuf>,
    /// Layer-stack file aligned with the training records.
    #[arg(long)]
    pub stack: Option<PathBuf>,
    /// Layer-stack file aligned with the dev records.
    #[arg(long)]
    pub dev_stack: Option<PathBuf>,
    /// Model and RNG seed.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub lr: Option<f64>,
    /// Epochs without dev improvement before stopping.
    #[arg(long)]
    pub patience: Option<usize>,
    /// Maximum global gradient norm; 0 disables clipping.
    #[arg(long)]
    pub clip_norm: Option<f64>,
    /// Task mode: simple, crf or joint.
    #[arg(long)]
    pub mode: Option<String>,
    /// Weight of the tagging loss.
    #[arg(long)]
    pub tag_weight: Option<f64>,
    /// Weight of the relation loss.
    #[arg(long)]
    pub rel_weight: Option<f64>,
    /// Visit examples in corpus order instead of shuffling.
    #[arg(long)]
    pub no_shuffle: bool,
}

#[derive(Args)]
pub struct PredictArgs {
    /// Trained checkpoint.
    #[arg(long)]
    pub model: PathBuf,
    /// Record file to tag.
    #[arg(long)]
    pub input: PathBuf,
    /// Prediction file to write, one JSON object per window.
    #[arg(long)]
    pub output: PathBuf,
    /// Run identifier stored with each prediction; defaults to the
    /// checkpoint file stem.
    #[arg(long)]
    pub run_id: Option<String>,
    /// Layer-stack file aligned with the records.
    #[arg(long)]
    pub stack: Option<PathBuf>,
}

#[derive(Args)]
pub struct EvaluateArgs {
    /// Gold record file.
    #[arg(long)]
    pub gold: PathBuf,
    /// Prediction file to score.
    #[arg(long)]
    pub predictions: PathBuf,
    /// Token scoring mode: type-token (collapse BIO) or bio-token.
    #[arg(long, default_value = "type-token")]
    pub mode: String,
    /// Also write both reports to this file as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

#[derive(Args)]
pub struct EnsembleArgs {
    /// Prediction files to vote over, one per run.
    #[arg(long, num_args = 1.., required = true)]
    pub predictions: Vec<PathBuf>,
    /// Voted prediction file to write.
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Args)]
pub struct GradcheckArgs {
    /// Seeds to run every suite under.
    #[arg(long, num_args = 1.., default_values_t = [1u64, 2, 3, 4, 5])]
    pub seeds: Vec<u64>,
}

#[derive(Args)]
pub struct StatsArgs {
    /// DEFT directory or record file (defaults to $DEFTKIT_DATA_DIR).
    #[arg(long, env = "DEFTKIT_DATA_DIR")]
    pub input: PathBuf,
    /// Warn on unknown labels instead of failing.
    #[arg(long)]
    pub permissive: bool,
}

#[derive(Args)]
pub struct FixtureArgs {
    /// Directory to create the corpus in.
    #[arg(long)]
    pub output: PathBuf,
    /// Shuffle seed for assigning windows to files.
    #[arg(long, default_value_t = 1)]
    pub seed: u64,
}

fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) => 2,
        Error::Parse { .. }
        | Error::Schema(_)
        | Error::Constraint(_)
        | Error::Checkpoint(_)
        | Error::Index(_)
        | Error::Io { .. } => 3,
        _ => 1,
    }
}

fn main() {
    // Die quietly on a closed pipe (`deftkit stats | head`) instead of
    // panicking; Rust masks SIGPIPE by default.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    if let Err(err) = commands::run(cli.command) {
        eprintln!("error: {err}");
        process::exit(exit_code(&err));
    }
}

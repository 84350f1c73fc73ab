//! `trajlm` command-line interface.

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

mod commands;
mod io;

#[derive(Parser, Debug)]
#[command(name = "trajlm", version, about = "Tokenize, train, evaluate and simulate longitudinal measurement models")]
struct Cli {
    /// Worker threads for evaluation and simulation (default: all cores).
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Also write an SVG plot next to the main output.
    #[arg(long, global = true)]
    plot: bool,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit bin boundaries and categories on a training cohort.
    BuildVocab(BuildVocabArgs),
    /// Convert a cohort into token sequences.
    Tokenize(TokenizeArgs),
    /// Train a model and write the best-validation checkpoint.
    Train(TrainArgs),
    /// Within-visit next-token prediction metrics.
    EvalNtp(EvalNtpArgs),
    /// Visit-1 to visit-2 forecasts against LOCF and linear baselines.
    EvalLongitudinal(EvalLongitudinalArgs),
    /// Expected output modality across every bin of an input modality.
    ProbeCrossmodal(ProbeArgs),
    /// Paired control/treatment simulation of one intervention.
    Simulate(SimulateArgs),
    /// Run every trial spec in a directory and score concordance.
    TrialRun(TrialRunArgs),
    /// Generate a synthetic cohort with a ground-truth sidecar.
    Synth(SynthArgs),
    /// Print the parameter manifest and provenance of a checkpoint.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args, Debug)]
struct BuildVocabArgs {
    /// Training cohort (JSONL, one participant per line).
    #[arg(long)]
    cohort: PathBuf,
    /// Output vocabulary JSON.
    #[arg(long)]
    out: PathBuf,
    /// Modality definitions (JSON array); inferred from the cohort when absent.
    #[arg(long)]
    defs: Option<PathBuf>,
    /// Bin count for every continuous modality without its own override.
    #[arg(long)]
    bins: Option<usize>,
}

#[derive(Args, Debug)]
struct TokenizeArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// Output JSON with one entry per participant.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 25_000)]
    max_len: usize,
}

#[derive(Args, Debug)]
struct TrainArgs {
    #[arg(long)]
    cohort: PathBuf,
    #[arg(long)]
    vocab: PathBuf,
    /// `key = value` training configuration; the desk preset when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output checkpoint.
    #[arg(long)]
    out: PathBuf,
    /// Per-step metrics CSV.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CheckpointArgs {
    #[arg(long)]
    ckpt: PathBuf,
    /// Vocabulary the checkpoint must have been trained with.
    #[arg(long)]
    vocab: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalNtpArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    cohort: PathBuf,
    /// Per-modality metrics CSV.
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct EvalLongitudinalArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    cohort: PathBuf,
    /// Comma-separated baselines: locf, linear.
    #[arg(long, value_delimiter = ',')]
    baselines: Vec<String>,
    /// Cohort the linear baseline is fit on; the evaluation cohort when absent.
    #[arg(long)]
    baseline_cohort: Option<PathBuf>,
    /// Modality supplying the BMI feature of the linear baseline.
    #[arg(long)]
    bmi_modality: Option<String>,
    #[arg(long)]
    report: PathBuf,
}

#[derive(Args, Debug)]
struct ProbeArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    input: String,
    #[arg(long)]
    output: String,
    #[arg(long, default_value_t = 50.0)]
    age: f64,
    /// female, male or unknown.
    #[arg(long, default_value = "unknown")]
    sex: String,
    /// Probe timestamp, `YYYY-MM-DDTHH:MM`.
    #[arg(long, default_value = "2020-01-01T09:00")]
    time: String,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    #[arg(long)]
    cohort: PathBuf,
    /// Intervention spec JSON.
    #[arg(long)]
    spec: PathBuf,
    /// Outcome modality.
    #[arg(long)]
    outcome: String,
    #[arg(long, default_value_t = 12.0)]
    horizon: f64,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Keep only participants meeting the named default threshold (for
    /// example `ldl`) on the outcome, observed and predicted.
    #[arg(long)]
    eligibility: Option<String>,
    /// Also write monthly mean deltas for months 1..=N.
    #[arg(long)]
    trajectory: Option<u32>,
    /// Per-participant CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct TrialRunArgs {
    #[command(flatten)]
    model: CheckpointArgs,
    /// Directory of trial spec JSON files.
    #[arg(long)]
    trials: PathBuf,
    #[arg(long, default_value_t = 1000)]
    resamples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Concordance CSV.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Generator configuration JSON; the default cohort when absent.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    participants: Option<usize>,
    /// Output cohort JSONL.
    #[arg(long)]
    out: PathBuf,
    /// Ground-truth JSON; `<out>.truth.json` when absent.
    #[arg(long)]
    truth: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct InspectArgs {
    #[arg(long)]
    ckpt: PathBuf,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match commands::run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", io::describe(&e));
            ExitCode::FAILURE
        }
    }
}

//! `cm`: train, score, probe and compare spoofing countermeasures.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use cm_core::data::ProtocolFormat;
use cm_core::eval::DecomposeBy;
use cm_core::frontend::FrontendKind;
use cm_core::nn::BackendKind;
use cm_core::{Error, ErrorCategory};

#[derive(Parser)]
#[command(name = "cm", version, about = "Speech anti-spoofing countermeasure workbench")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train one model per round and write checkpoints, epoch logs and dev scores.
    Train(TrainArgs),
    /// Score a protocol with a checkpoint and report EER / min t-DCF.
    Eval(EvalArgs),
    /// Re-score band-stop filtered audio to find the bands a model relies on.
    Probe(ProbeArgs),
    /// Pairwise EER significance with Holm-Bonferroni correction.
    Stats(StatsArgs),
    /// Generate the synthetic corpus.
    Synth(SynthArgs),
    /// Dump LFCC features as CMFEAT files plus a manifest.
    Lfcc(LfccArgs),
}

#[derive(Args)]
struct Common {
    /// TOML run configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Worker threads for trial-level parallelism.
    #[arg(long)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct FrontendArgs {
    #[arg(long, value_name = "lfcc|external|external_weighted")]
    frontend: Option<FrontendKind>,
    /// Feature manifest for the external front ends.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Feed stored features to the back end without the projection.
    #[arg(long)]
    no_project: bool,
    /// Frame shift of stored features, seconds.
    #[arg(long)]
    frame_shift: Option<f64>,
}

#[derive(Args)]
struct ProtocolArgs {
    #[arg(long)]
    protocol: Option<PathBuf>,
    #[arg(long, value_name = "canonical_tsv|asvspoof_la")]
    protocol_format: Option<ProtocolFormat>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    frontend: FrontendArgs,
    /// lfcc, external or external_verbatim.
    #[arg(long)]
    preset: Option<String>,
    #[arg(long, value_name = "gf|lgf|llgf")]
    backend: Option<BackendKind>,
    #[arg(long)]
    train_protocol: Option<PathBuf>,
    #[arg(long)]
    dev_protocol: Option<PathBuf>,
    #[arg(long, value_name = "canonical_tsv|asvspoof_la")]
    protocol_format: Option<ProtocolFormat>,
    #[arg(long)]
    seed: Option<u64>,
    /// Independent rounds, seeded seed, seed+1, ...
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    frontend: FrontendArgs,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Require the checkpoint to hold this back end.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// Also report EER per attack or per codec.
    #[arg(long, value_name = "attack|codec")]
    by: Option<DecomposeBy>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct ProbeArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    protocol: ProtocolArgs,
    #[arg(long)]
    checkpoint: PathBuf,
    /// `default` or comma-separated `low-high` pairs in Hz.
    #[arg(long)]
    bands: Option<String>,
    /// Probe a class-stratified subset of this many trials.
    #[arg(long)]
    subset: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    bins: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct StatsArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// Two or more score files.
    #[arg(required = true, num_args = 2..)]
    scores: Vec<PathBuf>,
    #[arg(long)]
    alpha: Option<f64>,
    /// Directory for matrix.csv and systems.csv.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    common: Common,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    n_per_class: Option<usize>,
    /// Artifact band as `low-high` in Hz.
    #[arg(long)]
    band: Option<String>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct LfccArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    protocol: ProtocolArgs,
    /// WAV files; the file stem becomes the trial id.
    wavs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

fn exit_code(e: &Error) -> u8 {
    match e.category() {
        ErrorCategory::ConfigOrIo => 2,
        ErrorCategory::Compatibility => 3,
        ErrorCategory::Numeric => 4,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("CM_LOG", "warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Train(a) => commands::train(a),
        Command::Eval(a) => commands::eval(a),
        Command::Probe(a) => commands::probe(a),
        Command::Stats(a) => commands::stats(a),
        Command::Synth(a) => commands::synth(a),
        Command::Lfcc(a) => commands::lfcc(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("cm: error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

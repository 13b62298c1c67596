//! `css`: simulate data, train, separate and evaluate from the command line.

mod commands;
mod config;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use css_core::CssError;

use config::{Channels, ModelSize, Switch};

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Data(String),
    #[error("internal error: {0}")]
    Internal(String),
    #[error(transparent)]
    Core(#[from] CssError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 1,
            CliError::Data(_) => 2,
            CliError::Internal(_) => 3,
            CliError::Core(e) => match e {
                CssError::Config(_) => 1,
                CssError::Tensor(_) | CssError::NonFinite(_) | CssError::Cache(_) => 3,
                _ => 2,
            },
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(CssError::Io(e))
    }
}

#[derive(Parser, Debug)]
#[command(name = "css", version, about = "Continuous speech separation toolkit")]
struct Cli {
    /// TOML or JSON file with [simulate], [train], [separate] and [evaluate] sections.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate reverberant multi-talker mixtures.
    Simulate(SimulateArgs),
    /// Train the mask estimator on a simulated dataset.
    Train(TrainArgs),
    /// Separate a 16 kHz recording into two overlap-free channels.
    Separate(SeparateArgs),
    /// Score separation on a dataset.
    Evaluate(EvaluateArgs),
    /// Print the configuration, size and checksums of a weights file.
    InspectWeights(InspectArgs),
}

#[derive(Args, Debug)]
pub struct SimulateArgs {
    #[arg(long)]
    out: Option<PathBuf>,
    /// Number of mixtures [default: 200]
    #[arg(long)]
    count: Option<usize>,
    /// [default: 0]
    #[arg(long)]
    seed: Option<u64>,
    /// Microphones kept from the 7-element array [default: 7]
    #[arg(long)]
    mics: Option<usize>,
    /// Leave out diffuse background noise.
    #[arg(long)]
    no_noise: bool,
    /// Only two-talker mixtures.
    #[arg(long)]
    two_speaker: bool,
}

#[derive(Args, Debug)]
pub struct TrainArgs {
    /// Manifest file or dataset directory.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Output weights file.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long, value_enum)]
    model: Option<ModelSize>,
    #[arg(long)]
    mics: Option<usize>,
    #[arg(long)]
    steps: Option<u64>,
    #[arg(long)]
    warmup: Option<u64>,
    /// Peak learning rate.
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    micro_batch: Option<usize>,
    #[arg(long)]
    checkpoint_every: Option<u64>,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// CSV loss log.
    #[arg(long)]
    log: Option<PathBuf>,
    /// Checkpoint to continue from.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// Train on noisy single-talker targets.
    #[arg(long)]
    noisy_targets: bool,
    /// Print the effective configuration and exit.
    #[arg(long)]
    print_config: bool,
}

#[derive(Args, Debug)]
pub struct SeparateArgs {
    input: PathBuf,
    #[arg(long)]
    weights: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// auto uses every microphone; more than one selects beamforming.
    #[arg(long, value_enum)]
    channels: Option<Channels>,
    #[arg(long, value_enum)]
    merge: Option<Switch>,
    /// Previous chunks kept in the attention cache.
    #[arg(long)]
    cache: Option<usize>,
}

#[derive(Args, Debug)]
pub struct EvaluateArgs {
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long)]
    weights: Option<PathBuf>,
    /// Write the full report as JSON here; `-` for stdout.
    #[arg(long)]
    json: Option<PathBuf>,
    /// Score the reference images instead of separated outputs.
    #[arg(long)]
    oracle: bool,
    #[arg(long, value_enum)]
    merge: Option<Switch>,
}

#[derive(Args, Debug)]
pub struct InspectArgs {
    file: PathBuf,
}

fn configure_threads() -> Result<(), CliError> {
    if let Ok(v) = std::env::var("CSS_NUM_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| CliError::Usage(format!("CSS_NUM_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new()
            .num_threads(n.max(1))
            .build_global()
            .map_err(|e| CliError::Internal(e.to_string()))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    configure_threads()?;
    let file = match &cli.config {
        Some(p) => config::ConfigFile::load(p)?,
        None => config::ConfigFile::default(),
    };
    match cli.command {
        Command::Simulate(a) => commands::simulate(file.simulate, a),
        Command::Train(a) => commands::train(file.train, a),
        Command::Separate(a) => commands::separate(file.separate, a),
        Command::Evaluate(a) => commands::evaluate(file.evaluate, a),
        Command::InspectWeights(a) => commands::inspect(&a.file),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match std::panic::catch_unwind(|| run(cli)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
        Err(_) => ExitCode::from(3),
    }
}

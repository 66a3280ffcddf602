//! `uio`: tokenization, training and inference from the command line.

mod artifacts;
mod config;
mod infer_cmd;
mod tokens;
mod train;

use std::process::ExitCode;

use clap::{Parser, Subcommand};

use config::{Flags, RunConfig};

#[derive(Debug, Parser)]
#[command(name = "uio", version, about = "Unified sequence-to-sequence vision and language toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    flags: Flags,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Print the input and target tokens of each record, annotated by band.
    Tokenize,
    /// Turn a target token file back into boxes, keypoints, text or a raster.
    Detokenize,
    /// Train the VQ image tokenizer on a manifest's image-like targets.
    TrainVq,
    /// Train (or resume) the denoising pretraining stage.
    Pretrain,
    /// Train (or resume) the multi-task stage.
    Multitask,
    /// Run a trained model over records and write results.
    Infer,
    /// Sample the mixture and print configured against empirical rates.
    Audit,
}

impl Command {
    fn name(self) -> &'static str {
        match self {
            Command::Tokenize => "tokenize",
            Command::Detokenize => "detokenize",
            Command::TrainVq => "train-vq",
            Command::Pretrain => "pretrain",
            Command::Multitask => "multitask",
            Command::Infer => "infer",
            Command::Audit => "audit",
        }
    }
}

#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration; nothing was computed.
    Usage(String),
    Run(String),
}

impl From<uio_core::Error> for CliError {
    fn from(e: uio_core::Error) -> Self {
        match e {
            uio_core::Error::Config(m) => CliError::Usage(m),
            other => CliError::Run(other.to_string()),
        }
    }
}

fn run(cli: &Cli) -> Result<(), CliError> {
    let cfg = RunConfig::resolve(&cli.flags)?;
    if uio_core::par::env_deterministic() {
        log::info!("UIO_DETERMINISTIC=1: sequential execution");
    }
    match cli.command {
        Command::Tokenize => tokens::tokenize(&cfg),
        Command::Detokenize => tokens::detokenize(&cfg),
        Command::TrainVq => train::train_vq(&cfg, cli.command.name()),
        Command::Pretrain => train::train(&cfg, uio_core::trainer::Stage::Pretrain, cli.command.name()),
        Command::Multitask => train::train(&cfg, uio_core::trainer::Stage::Multitask, cli.command.name()),
        Command::Infer => infer_cmd::infer(&cfg, cli.command.name()),
        Command::Audit => train::audit(&cfg, cli.command.name()),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Run(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(1)
        }
    }
}

impl From<uio_core::ParseError> for CliError {
    fn from(e: uio_core::ParseError) -> Self {
        CliError::Run(format!("parse error: {e}"))
    }
}

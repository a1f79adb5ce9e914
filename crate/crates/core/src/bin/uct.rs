use std::path::PathBuf;
use std::process::ExitCode;

use clap::Parser;
use uct::config::{DecoderKind, ExperimentConfig};
use uct::pipeline::{Command, Pipeline};

/// Unsupervised character-level transduction experiments.
#[derive(Debug, Parser)]
#[command(name = "uct", version)]
struct Cli {
    /// prepare, train-lm, train-wfst, train-seq2seq, decode, evaluate, analyze or all
    command: String,
    #[arg(long)]
    config: PathBuf,
    /// wfst, seq2seq, rerank-wfst, rerank-seq2seq or poe
    #[arg(long)]
    decoder: Option<String>,
    #[arg(long)]
    beam: Option<usize>,
    #[arg(long)]
    nbest: Option<usize>,
    #[arg(long)]
    workers: Option<usize>,
}

fn usage(msg: impl std::fmt::Display) -> ExitCode {
    eprintln!("uct: {msg}");
    ExitCode::from(1)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let command: Command = match cli.command.parse() {
        Ok(c) => c,
        Err(e) => return usage(e),
    };
    let mut config = match ExperimentConfig::load(&cli.config) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("uct: {e}");
            return ExitCode::from(e.exit_code() as u8);
        }
    };
    if let Some(d) = &cli.decoder {
        match d.parse::<DecoderKind>() {
            Ok(d) => config.decode.decoder = d,
            Err(e) => return usage(e),
        }
    }
    for (flag, value, slot) in [
        ("--beam", cli.beam, &mut config.decode.beam),
        ("--nbest", cli.nbest, &mut config.decode.nbest),
        ("--workers", cli.workers, &mut config.decode.workers),
    ] {
        match value {
            Some(0) => return usage(format!("{flag} must be at least 1")),
            Some(v) => *slot = v,
            None => {}
        }
    }
    match Pipeline::new(config).run(command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("uct: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

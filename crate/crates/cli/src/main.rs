//! `ahnlab` command-line driver.
//!
//! Exit codes: 0 success, 1 I/O or other failure, 2 invalid configuration or
//! usage, 3 corpus missing or unusable, 4 non-finite values during training,
//! 5 checkpoint unreadable or inconsistent with the configuration.

mod commands;
mod run_config;

use std::path::PathBuf;
use std::process::ExitCode;

use ahnlab::Error;
use clap::{Parser, Subcommand};

use commands::{BenchArgs, CorpusArgs, EvalArgs, ProbeArgs, TrainArgs};

#[derive(Parser, Debug)]
#[command(
    name = "ahnlab",
    version,
    about = "Sliding-window attention with a learned recurrent memory"
)]
struct Cli {
    /// key=value configuration file; flags override its entries.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, default_value = "out")]
    out_dir: PathBuf,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Pre-train a base model or distill its memory modules.
    Train(TrainArgs),
    /// Held-out perplexity and KL per mixer mode and window.
    Eval(EvalArgs),
    /// Parameter, FLOP and cache costs of every token mixer.
    Bench(BenchArgs),
    /// Gradient magnitudes of out-of-window tokens.
    Probe(ProbeArgs),
    /// Write a synthetic train/held-out corpus.
    Corpus(CorpusArgs),
}

fn exit_code(err: &anyhow::Error) -> u8 {
    match err.downcast_ref::<Error>() {
        Some(Error::Config(_) | Error::UnknownMode(_) | Error::Token { .. } | Error::EmptyReport { .. }) => 2,
        Some(Error::Corpus(_)) => 3,
        Some(Error::NonFinite(_)) => 4,
        Some(Error::Format(_) | Error::Version { .. } | Error::ConfigHash | Error::UnknownArray(_)) => 5,
        _ => 1,
    }
}

fn init_threads() -> anyhow::Result<()> {
    if let Ok(v) = std::env::var("AHNLAB_THREADS") {
        let n: usize = v
            .parse()
            .map_err(|_| Error::Config(format!("AHNLAB_THREADS must be a positive integer, got `{v}`")))?;
        rayon::ThreadPoolBuilder::new().num_threads(n.max(1)).build_global()?;
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = init_threads().and_then(|()| {
        let common = run_config::Common {
            config: cli.config,
            seed: cli.seed,
            out_dir: cli.out_dir,
        };
        match cli.command {
            Command::Train(a) => commands::train(&common, a),
            Command::Eval(a) => commands::eval(&common, a),
            Command::Bench(a) => commands::bench(&common, a),
            Command::Probe(a) => commands::probe(&common, a),
            Command::Corpus(a) => commands::corpus(&common, a),
        }
    });
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

//! `reidr`: mining, evaluation, re-ranking, reward checks and the collapse
//! simulation from the command line.
//!
//! Exit codes: 0 on success, 1 when the invocation or its inputs are
//! invalid, 2 when the run itself fails.

mod commands;
mod config;
mod failure;
mod output;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "reidr", version, about = "Reasoning-based person re-identification toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

/// Flags accepted by every command.
#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Top-level seed; overrides the config file.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config file.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Worker threads (defaults to all cores).
    #[arg(long)]
    pub workers: Option<usize>,
    /// Overwrite existing outputs.
    #[arg(long)]
    pub force: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Mine non-trivial triplets from an embedding corpus.
    Mine {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        corpus: Option<PathBuf>,
    },
    /// Score retrieval with mAP and CMC.
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Re-rank each query's shortlist with a pairwise judge.
    Rerank {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        queries: Option<PathBuf>,
        #[arg(long)]
        gallery: Option<PathBuf>,
    },
    /// Train the toy policy on a synthetic pair stream.
    Simulate {
        #[command(flatten)]
        common: Common,
    },
    /// Score reasoning traces with the gated reward.
    RewardCheck {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        traces: Option<PathBuf>,
        #[arg(long)]
        images: Option<PathBuf>,
    },
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let result = match cli.command {
        Command::Mine { common, corpus } => commands::mine(&common, corpus),
        Command::Eval { common, queries, gallery } => commands::eval(&common, queries, gallery),
        Command::Rerank { common, queries, gallery } => commands::rerank(&common, queries, gallery),
        Command::Simulate { common } => commands::simulate_cmd(&common),
        Command::RewardCheck { common, traces, images } => commands::reward_check(&common, traces, images),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            log::error!("{failure}");
            ExitCode::from(failure.exit_code())
        }
    }
}

//! `cir2`: generate the synthetic benchmark, train both stages, filter,
//! re-rank, evaluate, sweep K and run the ablation suite.
//!
//! Every command reads and writes artifacts in one data directory
//! (`--data-dir`, default `$CIR2_DATA_DIR` or `./cir2-data`) and verifies
//! the content hashes of its inputs before using them.

mod commands;
mod config;
mod store;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use cir2_core::rerank::AblationVariant;
use cir2_core::Error;

use crate::config::{Overrides, RunConfig};
use crate::store::Store;

#[derive(Parser, Debug)]
#[command(name = "cir2", version, about = "Two-stage composed retrieval: filter, then re-rank")]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// TOML configuration; any subset of keys overrides the defaults
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Seed for data generation and both training stages
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Re-ranking cutoff K
    #[arg(long, global = true)]
    k: Option<usize>,

    /// Re-ranker variant: full, without-zt, ref-cls, ref-cls-spatial,
    /// full-mlp-merge, dual-ff
    #[arg(long, global = true)]
    variant: Option<AblationVariant>,

    /// Overwrite existing outputs
    #[arg(long, global = true)]
    force: bool,

    /// Worker threads for embedding, filtering and re-ranking (default: all
    /// cores)
    #[arg(long, global = true)]
    workers: Option<usize>,

    /// Measure per-query stage latency with a single worker
    #[arg(long, global = true)]
    timing: bool,

    /// Artifact directory
    #[arg(long, global = true, env = "CIR2_DATA_DIR", default_value = "cir2-data")]
    data_dir: PathBuf,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate corpora and query triplets
    Gen {
        /// Items per corpus (M)
        #[arg(long)]
        corpus_size: Option<usize>,
    },
    /// Train the filtering model
    TrainFilter,
    /// Embed the validation corpus and cache z_t for all queries
    Embed,
    /// Rank the validation corpus for every validation query
    Filter,
    /// Train a re-ranker
    TrainRerank,
    /// Re-rank the filtered top-K
    Rerank,
    /// Report filtering and re-ranked metrics side by side
    Eval {
        /// Emit one record per cutoff instead (comma-separated)
        #[arg(long, value_delimiter = ',')]
        sweep_k: Option<Vec<usize>>,
    },
    /// Report metrics for each configured cutoff K
    SweepK {
        /// Cutoffs (comma-separated); defaults to the configured list
        #[arg(long, value_delimiter = ',')]
        ks: Option<Vec<usize>>,
    },
    /// Train and evaluate every configured variant over every seed
    Ablate,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) => 2,
        Error::Provenance(_) => 4,
        Error::Parse { .. } | Error::Format { .. } | Error::Io { .. } | Error::Generation(_) | Error::Contract(_) => 3,
        Error::Dimension { .. } | Error::NonFinite(_) => 1,
    }
}

fn run(cli: Cli) -> cir2_core::Result<()> {
    let corpus_size = match &cli.command {
        Command::Gen { corpus_size } => *corpus_size,
        _ => None,
    };
    let overrides = Overrides {
        seed: cli.seed,
        k: cli.k,
        variant: cli.variant,
        corpus_size,
    };
    let cfg = RunConfig::resolve(cli.config.as_deref(), &overrides)?;
    if cli.workers == Some(0) {
        return Err(Error::Config("--workers must be at least 1".into()));
    }
    let store = Store::open(&cli.data_dir, cli.force)?;
    let mut ctx = commands::Ctx {
        cfg,
        store,
        workers: if cli.timing { Some(1) } else { cli.workers },
        timing: cli.timing,
    };
    match cli.command {
        Command::Gen { .. } => commands::gen(&mut ctx),
        Command::TrainFilter => commands::train_filter(&mut ctx),
        Command::Embed => commands::embed(&mut ctx),
        Command::Filter => commands::filter(&mut ctx),
        Command::TrainRerank => commands::train_rerank(&mut ctx),
        Command::Rerank => commands::rerank(&mut ctx),
        Command::Eval { sweep_k: Some(ks) } => commands::sweep_k(&mut ctx, &ks),
        Command::Eval { sweep_k: None } => commands::eval(&mut ctx),
        Command::SweepK { ks } => {
            let ks = ks.unwrap_or_else(|| ctx.cfg.sweep_ks.clone());
            commands::sweep_k(&mut ctx, &ks)
        }
        Command::Ablate => commands::ablate(&mut ctx),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

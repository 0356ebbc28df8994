//! `splitcomp`: inject bottlenecks, train, evaluate, serve and simulate split models.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 missing artifact,
//! 1 anything else.

mod artifacts;
mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use splitcomp_core::bottleneck::SplitPoint;

use commands::{ClientArgs, Context, SplitOverrides};
use config::ExperimentConfig;
use error::CliResult;

#[derive(Debug, Parser)]
#[command(name = "splitcomp", version, about = "Split computing experiments with injected bottlenecks")]
struct Cli {
    /// Experiment config (TOML); flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed for every stochastic step (default: config `seed`, then 0).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (default: config `out`, then `./out`).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, clap::Args)]
struct SplitFlags {
    /// SP1 or SP2.
    #[arg(long)]
    split_point: Option<SplitPoint>,
    /// Bottleneck channel count.
    #[arg(long)]
    channels: Option<usize>,
}

impl From<SplitFlags> for SplitOverrides {
    fn from(f: SplitFlags) -> Self {
        SplitOverrides { split_point: f.split_point, channels: f.channels }
    }
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Insert an encoder/decoder bottleneck into a teacher and save the untrained student.
    Inject {
        /// Teacher checkpoint directory.
        #[arg(long)]
        teacher: Option<PathBuf>,
        #[command(flatten)]
        split: SplitFlags,
    },
    /// Train a student with a recipe, or a teacher with `--recipe pretrain_teacher`.
    Train {
        #[arg(long)]
        recipe: Option<String>,
        #[arg(long)]
        teacher: Option<PathBuf>,
        /// Epochs per stage (teacher: total epochs).
        #[arg(long)]
        epochs: Option<usize>,
        #[command(flatten)]
        split: SplitFlags,
    },
    /// Validation accuracy with and without the bottleneck codec.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Only evaluate this codec (float32 or bq8).
        #[arg(long)]
        codec: Option<String>,
        /// Teacher checkpoint, for the reference accuracy.
        #[arg(long)]
        teacher: Option<PathBuf>,
    },
    /// Serve the tail of a split model over TCP.
    Serve {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        host: Option<String>,
        #[arg(long)]
        port: Option<u16>,
        /// Accept only this codec.
        #[arg(long)]
        codec: Option<String>,
    },
    /// Run the head locally and classify validation images through a server.
    Client {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// host:port of the tail server.
        #[arg(long)]
        endpoint: Option<String>,
        /// Number of validation images to send.
        #[arg(long)]
        images: Option<usize>,
        #[arg(long)]
        codec: Option<String>,
        /// Per-image CSV report.
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(long)]
        timeout_s: Option<f64>,
    },
    /// Delay and energy sweep over channels and execution strategies.
    Simulate,
    /// Accuracy tables and plots from finished runs.
    Report {
        /// Run directories (default: config `report.runs`).
        runs: Vec<PathBuf>,
        /// `sweep.csv` from `simulate`, plotted as delay against rate.
        #[arg(long)]
        sweep: Option<PathBuf>,
    },
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = ExperimentConfig::load(cli.config.as_deref())?;
    let ctx = Context::new(cfg, cli.seed, cli.out);
    match cli.command {
        Command::Inject { teacher, split } => commands::inject(&ctx, teacher, split.into()),
        Command::Train { recipe, teacher, epochs, split } => commands::train(&ctx, recipe, teacher, epochs, split.into()),
        Command::Eval { checkpoint, codec, teacher } => commands::eval(&ctx, checkpoint, codec, teacher),
        Command::Serve { checkpoint, host, port, codec } => commands::serve(&ctx, checkpoint, host, port, codec),
        Command::Client { checkpoint, endpoint, images, codec, report, timeout_s } => commands::client(
            &ctx,
            ClientArgs { checkpoint, endpoint, images, codec, report, timeout_s },
        ),
        Command::Simulate => commands::simulate(&ctx),
        Command::Report { runs, sweep } => commands::report(&ctx, runs, sweep),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

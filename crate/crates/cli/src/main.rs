//! `relagg`: data synthesis, training, evaluation, ablations, sweeps and
//! diagnostic dumps.

mod commands;
mod io;

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};

#[derive(Parser, Debug)]
#[command(name = "relagg", version, about = "Reliability-aware multi-scale sequence models for irregular event streams")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Flat key=value config file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override one config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Output directory, created if missing and locked for the run.
    #[arg(long)]
    out: PathBuf,
    /// Seed override (cohort seed for gen-data, the single training seed
    /// otherwise).
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug, Clone)]
struct DataArgs {
    /// Directory holding events.csv, labels.csv, variables.txt and
    /// optionally groups.csv.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum SplitPart {
    Train,
    Val,
    Test,
    All,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort.
    GenData {
        #[command(flatten)]
        common: Common,
    },
    /// Train one model and test it on the held-out split.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Token budget k.
        #[arg(long)]
        budget: Option<usize>,
        /// Write the effective config and stop.
        #[arg(long)]
        dry_run: bool,
    },
    /// Evaluate a checkpoint on one split.
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = SplitPart::Test)]
        split: SplitPart,
    },
    /// Seed-averaged ablation table.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        /// Comma-separated variant names, or `all` for the full model plus
        /// one removal per component.
        #[arg(long, value_delimiter = ',', default_value = "all")]
        variants: Vec<String>,
        #[arg(long)]
        budget: Option<usize>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Seed-averaged sweep over scale sets or token budgets.
    Sweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_parser = ["scales", "budget"])]
        axis: String,
        /// Comma-separated values: `60+120+240` style scale sets, or
        /// budgets where `off` disables the router.
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        #[arg(long)]
        dry_run: bool,
    },
    /// Learned decay rates with coverage and mean observation gap.
    DecayReport {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
    /// Per-token embeddings of the first samples.
    DumpTokens {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// Multi-scale bucket tokens with their statistics.
    DumpBuckets {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        dump: DumpArgs,
    },
    /// Router scores and hard selections, plus token counts.
    DumpRouting {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        dump: DumpArgs,
        #[arg(long)]
        budget: Option<usize>,
    },
    /// Coverage and staleness differences between label groups.
    CohortStats {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
    },
}

#[derive(Args, Debug, Clone)]
struct DumpArgs {
    /// Trained checkpoint; without one a freshly initialized model is used.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Number of samples to dump, in label-file order; 0 dumps all.
    #[arg(long, default_value_t = 5)]
    limit: usize,
}

/// Usage errors exit with 2, runtime failures with 1.
enum Failure {
    Usage(String),
    Runtime(String),
}

impl From<relagg_core::Error> for Failure {
    fn from(e: relagg_core::Error) -> Self {
        match e {
            relagg_core::Error::Config(_) => Failure::Usage(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

fn init_logging() {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format(|buf, rec| writeln!(buf, "relagg level={} {}", rec.level().as_str().to_lowercase(), rec.args()))
        .init();
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    init_logging();
    match commands::run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(msg)) => {
            eprintln!("error: {msg}\n\n{}", Cli::command().render_usage());
            ExitCode::from(2)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
    }
}

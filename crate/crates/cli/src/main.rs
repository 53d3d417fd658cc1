//! `modelshift`: train a sparse portfolio, prune it structurally, profile, package and replay
//! load traces against it.

mod commands;
mod config;
mod exit;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use modelshift::profile::LatencySource;

const EXIT_CODES: &str = "\
Exit codes:
  0  success
  1  I/O or other failure
  2  usage: bad flags, bad configuration, missing input
  3  format: malformed model, package, dataset, records or trace
  4  collapse: pruning would remove a whole layer
  5  divergence: training loss became non-finite

Failures print one JSON object on stderr: {\"error\": kind, \"exit_code\": n, \"message\": text}.";

#[derive(Debug, Parser)]
#[command(name = "modelshift", version, about, after_help = EXIT_CODES)]
pub struct Cli {
    /// TOML pipeline configuration; flags override it.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory (default `out`).
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Pruning iterations; the portfolio holds n + 1 variants.
    #[arg(long, global = true, value_name = "N")]
    pub portfolio_depth: Option<usize>,
    /// Only remove zero channels whose removal provably leaves outputs unchanged.
    #[arg(long, global = true)]
    pub strict_prune: bool,
    #[arg(long, global = true, value_name = "0-9", value_parser = clap::value_parser!(u32).range(0..=9))]
    pub deflate_level: Option<u32>,
    /// `macs` makes profiles (and packages built from them) independent of timing noise.
    #[arg(long, global = true, value_enum)]
    pub latency_source: Option<LatencyArg>,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    /// Errors only.
    #[arg(short, long, global = true)]
    pub quiet: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum LatencyArg {
    Measured,
    Macs,
}

impl From<LatencyArg> for LatencySource {
    fn from(a: LatencyArg) -> Self {
        match a {
            LatencyArg::Measured => LatencySource::Measured,
            LatencyArg::Macs => LatencySource::Macs,
        }
    }
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a dense model and its iterative-magnitude-pruning portfolio into OUT/sparse.
    Train {
        /// toy-cnn, toy-resnet or vgg-wide.
        #[arg(long)]
        arch: Option<String>,
        /// Raw-tensor dataset directory (default: the bundled synthetic set).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Turn zero channels of sparse models into smaller dense models in OUT/pruned.
    Prune {
        /// A .dms file or a directory of them.
        input: PathBuf,
    },
    /// Measure accuracy, latency, size and memory of models into OUT/profile.
    Profile {
        models: PathBuf,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        #[arg(long)]
        reps: Option<usize>,
    },
    /// Keep the Pareto-optimal models and deflate them into OUT/package/portfolio.dnpk.
    Package {
        models: PathBuf,
        /// Profile records from `profile`; the models are profiled afresh when omitted.
        #[arg(long, value_name = "FILE")]
        records: Option<PathBuf>,
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
    },
    /// Replay a `timestamp_ms,qps` trace against a package into OUT/simulation.
    Simulate {
        package: PathBuf,
        #[arg(long, value_name = "FILE")]
        trace: PathBuf,
    },
    /// Ratio vs accuracy, speedup and spatial compression as OUT/plot/plot.csv.
    PlotData { records: PathBuf },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let err = exit::usage(e.render().to_string().trim_end());
            eprintln!("{}", err.to_json());
            return ExitCode::from(exit::USAGE as u8);
        }
    };
    let level = match (cli.quiet, cli.verbose) {
        (true, _) => "error",
        (false, 0) => "warn",
        (false, 1) => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();
    match commands::run(&cli) {
        Ok(()) => ExitCode::from(exit::OK as u8),
        Err(e) => {
            eprintln!("{}", e.to_json());
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

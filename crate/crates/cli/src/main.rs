//! Command-line entry point: fit, simulate, sweep, gradcheck, dump-nodes and
//! diagnose over a JSON run configuration.

mod artifacts;
mod commands;
mod config;

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

use commands::Failure;
use config::RunConfig;

const VERSION: &str = concat!(
    env!("CARGO_PKG_VERSION"),
    " (config schema ",
    stringify!(1),
    ")"
);

#[derive(Parser)]
#[command(name = "quasibayes", version = VERSION, about = "Quasi-Bayes estimation of latent distributions from contaminated observations")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// Run configuration (JSON).
    #[arg(long)]
    config: PathBuf,
    /// Override the sampler seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Override the chain count.
    #[arg(long)]
    chains: Option<usize>,
    /// Override the output directory (also via QUASIBAYES_OUT_DIR).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Data CSV files carry a header row.
    #[arg(long)]
    header: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a quasi-Bayes posterior and write chains, diagnostics and
    /// densities.
    Fit(CommonArgs),
    /// Generate synthetic datasets from the configured scenario.
    Simulate(CommonArgs),
    /// Sweep sample sizes and seeds over a scenario, fitting each cell.
    Sweep(CommonArgs),
    /// Finite-difference audit of every analytic gradient.
    Gradcheck {
        #[command(flatten)]
        common: CommonArgs,
        #[arg(long, hide = true)]
        corrupt_gradient: bool,
    },
    /// Write quadrature nodes and weights as CSV for external verification.
    DumpNodes(CommonArgs),
    /// Recompute convergence diagnostics from chain CSVs.
    Diagnose {
        /// Chain CSV files from a previous fit.
        chains: Vec<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long, default_value_t = 1.05)]
        rhat_threshold: f64,
        /// Exit 1 when the threshold is exceeded instead of warning.
        #[arg(long)]
        fail_on_rhat: bool,
    },
}

fn load_config(common: &CommonArgs) -> Result<RunConfig, Failure> {
    let mut config = RunConfig::load(&common.config).map_err(Failure::config)?;
    if let Some(seed) = common.seed {
        config.sampler.hmc.seed = seed;
    }
    if let Some(chains) = common.chains {
        config.sampler.hmc.chains = chains;
    }
    if let Some(out) = &common.out {
        config.output.dir = out.clone();
    } else if let Ok(dir) = std::env::var("QUASIBAYES_OUT_DIR") {
        if !dir.is_empty() {
            config.output.dir = PathBuf::from(dir);
        }
    }
    config.validate().map_err(Failure::config)?;
    Ok(config)
}

fn run(cli: Cli) -> Result<(), Failure> {
    match &cli.command {
        Command::Fit(common) => commands::fit(&load_config(common)?, common.header),
        Command::Simulate(common) => commands::simulate(&load_config(common)?, common.header),
        Command::Sweep(common) => commands::sweep(&load_config(common)?, common.header),
        Command::Gradcheck { common, corrupt_gradient } => {
            commands::gradcheck(&load_config(common)?, common.header, *corrupt_gradient)
        }
        Command::DumpNodes(common) => commands::dump_nodes(&load_config(common)?, common.header),
        Command::Diagnose { chains, out, rhat_threshold, fail_on_rhat } => {
            commands::diagnose(chains, out.as_deref(), *rhat_threshold, *fail_on_rhat)
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(failure) => {
            eprintln!("error: {}", failure.message);
            ExitCode::from(failure.code)
        }
    }
}

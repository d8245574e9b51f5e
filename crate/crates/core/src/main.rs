use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};

use brokenstick::io::{
    cmd_classify, cmd_fit, cmd_simulate, cmd_summarize, ClassifyOptions, FitOptions, FitSettings, SimulateOptions,
    SummarizeOptions, DEFAULT_MAX_PEAR_DRAWS,
};

#[derive(Parser)]
#[command(name = "brokenstick", version, about = "Broken-stick growth model with Dirichlet-process slope clusters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the paired fixed-knot and random-knot synthetic cohorts.
    Simulate {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Number of children (default 400).
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Run the MCMC sampler on a cohort CSV (`child_id,age_years,haz`).
    Fit {
        data: PathBuf,
        /// TOML file with run settings; command-line flags take precedence.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        iters: Option<u64>,
        #[arg(long)]
        burnin: Option<u64>,
        #[arg(long)]
        thin: Option<u64>,
        /// `fixed` or `random`.
        #[arg(long)]
        knots: Option<String>,
        /// Number of interior knots.
        #[arg(long)]
        k: Option<usize>,
        #[arg(long)]
        horizon: Option<f64>,
        /// Starting allocation: `singletons` or `single`.
        #[arg(long)]
        init: Option<String>,
        /// Keep HAZ values outside [-6, 6].
        #[arg(long)]
        allow_outliers: bool,
        #[arg(long)]
        out: PathBuf,
    },
    /// Consensus clustering of saved draws by maximizing PEAR.
    Classify {
        draws: PathBuf,
        /// Truth sidecar written by `simulate`; adds the ARI against it.
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_PEAR_DRAWS)]
        max_draws: usize,
        #[arg(long)]
        out: PathBuf,
    },
    /// One-row table of cluster-count and clustering statistics.
    Summarize {
        draws: PathBuf,
        #[arg(long)]
        truth: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_MAX_PEAR_DRAWS)]
        max_draws: usize,
        #[arg(long)]
        out: PathBuf,
    },
}

fn run(cli: Cli) -> brokenstick::Result<()> {
    match cli.command {
        Command::Simulate { seed, n, out } => cmd_simulate(&SimulateOptions {
            seed,
            n_children: n,
            out,
        }),
        Command::Fit {
            data,
            config,
            seed,
            iters,
            burnin,
            thin,
            knots,
            k,
            horizon,
            init,
            allow_outliers,
            out,
        } => cmd_fit(&FitOptions {
            data,
            config,
            overrides: FitSettings {
                seed,
                iterations: iters,
                burnin,
                thin,
                knots,
                k,
                horizon,
                init,
                allow_outliers: allow_outliers.then_some(true),
                ..FitSettings::default()
            },
            out,
        }),
        Command::Classify {
            draws,
            truth,
            max_draws,
            out,
        } => cmd_classify(&ClassifyOptions {
            draws,
            truth,
            out,
            max_draws,
        }),
        Command::Summarize {
            draws,
            truth,
            max_draws,
            out,
        } => cmd_summarize(&SummarizeOptions {
            draws,
            truth,
            out,
            max_draws,
        }),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if e.is_validation() {
                ExitCode::from(2)
            } else {
                ExitCode::from(1)
            }
        }
    }
}

//! bbfit: batchwise distributional regression from the command line.
//! simulate draws benchmark data, ingest converts CSV into the column store,
//! fit runs the batchwise engine, evaluate scores a fit on held-out rows.

use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use bbfit_cli::commands::{self, evaluate::EvaluateInputs};
use bbfit_cli::config::{self, CriterionMode, Overrides, PolicyMode};
use bbfit_cli::error::CliError;

#[derive(Parser)]
#[command(
    name = "bbfit",
    version,
    about = "Batchwise backfitting for distributional regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Draw a synthetic scenario and write train/validation stores.
    Simulate(SimulateArgs),
    /// Convert a CSV file into the binary column store.
    Ingest(IngestArgs),
    /// Run the batchwise fit described by a config file.
    Fit(FitArgs),
    /// Score a fitted model on a held-out store.
    Evaluate(EvaluateArgs),
}

#[derive(Args)]
struct SimulateArgs {
    /// Run configuration (JSON) with a data.simulate scenario.
    #[arg(long)]
    config: PathBuf,
    /// Output directory (falls back to the config, then to ".").
    #[arg(long, env = "BBFIT_OUT_DIR")]
    out: Option<PathBuf>,
    /// Override the scenario seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args)]
struct IngestArgs {
    /// CSV file with a header row; every kept column must be numeric.
    #[arg(long)]
    csv: PathBuf,
    /// Comma-separated subset of columns to keep.
    #[arg(long, value_delimiter = ',')]
    columns: Option<Vec<String>>,
    /// Output directory.
    #[arg(long, env = "BBFIT_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct FitArgs {
    /// Run configuration (JSON): data, model, batches, engine.
    #[arg(long)]
    config: PathBuf,
    /// Step length applied to accepted updates.
    #[arg(long)]
    nu: Option<f64>,
    /// Update policy (two-stage boosts, then resamples the survivors).
    #[arg(long, value_enum)]
    policy: Option<PolicyMode>,
    /// Rows per batch.
    #[arg(long)]
    batch_size: Option<usize>,
    /// Update iterations.
    #[arg(long)]
    iters: Option<usize>,
    /// Seed for batching, simulation and the sampler.
    #[arg(long)]
    seed: Option<u64>,
    /// Smoothing selection criterion.
    #[arg(long, value_enum)]
    criterion: Option<CriterionMode>,
    /// Output directory.
    #[arg(long, env = "BBFIT_OUT_DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvaluateArgs {
    /// fit.json produced by the fit command.
    #[arg(long)]
    fit: Option<PathBuf>,
    /// Held-out column store to score on.
    #[arg(long)]
    store: PathBuf,
    /// truth.json from simulate; enables effect scores and term rates.
    #[arg(long)]
    truth: Option<PathBuf>,
    /// Score the generating truth instead of a fit (needs --truth).
    #[arg(long)]
    oracle: bool,
    /// Effect range above which a term counts as active.
    #[arg(long, default_value_t = 0.1)]
    threshold: f64,
    /// Seed for the randomized residuals of discrete responses.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output directory.
    #[arg(long, env = "BBFIT_OUT_DIR")]
    out: Option<PathBuf>,
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Simulate(args) => {
            let config = config::load(&args.config)?.apply(&Overrides {
                seed: args.seed,
                ..Overrides::default()
            })?;
            let out = commands::out_dir(args.out.as_deref(), config.output.as_deref())?;
            commands::simulate::run(&config, &out)
        }
        Command::Ingest(args) => {
            let out = commands::out_dir(args.out.as_deref(), None)?;
            commands::ingest::run(&args.csv, args.columns.as_deref(), &out)
        }
        Command::Fit(args) => {
            let config = config::load(&args.config)?.apply(&Overrides {
                nu: args.nu,
                policy: args.policy,
                batch_size: args.batch_size,
                iters: args.iters,
                seed: args.seed,
                criterion: args.criterion,
                out: None,
            })?;
            let out = commands::out_dir(args.out.as_deref(), config.output.as_deref())?;
            commands::fit::run(&config, &out)
        }
        Command::Evaluate(args) => {
            let out = commands::out_dir(args.out.as_deref(), None)?;
            commands::evaluate::run(
                &EvaluateInputs {
                    fit: args.fit.as_deref(),
                    store: &args.store,
                    truth: args.truth.as_deref(),
                    oracle: args.oracle,
                    threshold: args.threshold,
                    seed: args.seed,
                },
                &out,
            )
        }
    }
}

use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use wdsurv::widedeep::Variant;

mod commands;

/// Wide-and-deep survival models on point clouds and clinical covariates.
///
/// Results go to stdout (CSV or JSON); logs go to stderr. Set WDSURV_SEED to
/// override the seed of any command. Exit codes: 0 success, 1 invalid input,
/// 2 internal failure.
#[derive(Parser, Debug)]
#[command(name = "wdsurv", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// Only log warnings and errors
    #[arg(short, long, global = true)]
    quiet: bool,
}

#[derive(Args, Debug)]
struct RunArgs {
    /// Cohort manifest CSV
    #[arg(long)]
    manifest: PathBuf,

    /// Run configuration TOML ([train], [model], [features], [data], [search])
    #[arg(long)]
    config: Option<PathBuf>,

    /// Add hippocampus_volume to the wide features
    #[arg(long)]
    with_volume: bool,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic cohort: manifest.csv, clouds/ and truth.csv
    Generate {
        /// Cohort definition TOML
        #[arg(long)]
        spec: Option<PathBuf>,

        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Split, train with validation-based selection, and evaluate on the test part
    Train {
        #[command(flatten)]
        run: RunArgs,

        /// wide, deep or widedeep
        #[arg(long, default_value = "widedeep")]
        variant: Variant,

        /// Checkpoint to write
        #[arg(long)]
        checkpoint: PathBuf,

        /// Per-epoch CSV [default: <checkpoint>.epochs.csv]
        #[arg(long)]
        report: Option<PathBuf>,
    },

    /// Run the protocol over repeated splits for each variant
    Repeat {
        #[command(flatten)]
        run: RunArgs,

        /// Number of splits [default: n_repeats from the config]
        #[arg(long)]
        n_repeats: Option<usize>,

        /// Comma-separated variants
        #[arg(long, value_delimiter = ',', default_value = "wide,deep,widedeep")]
        variants: Vec<Variant>,

        /// Directory for repeats.csv and medians.csv
        #[arg(long)]
        out_dir: PathBuf,
    },

    /// Score the [search] candidates by validation c-index on one split
    Search {
        #[command(flatten)]
        run: RunArgs,

        #[arg(long, default_value = "widedeep")]
        variant: Variant,
    },

    /// Risk scores for every subject of a manifest
    Predict {
        #[arg(long)]
        checkpoint: PathBuf,

        #[arg(long)]
        manifest: PathBuf,
    },

    /// c-index of a checkpoint on a manifest with outcomes
    Evaluate {
        #[arg(long)]
        checkpoint: PathBuf,

        #[arg(long)]
        manifest: PathBuf,
    },

    /// Wide coefficients (log-hazard ratios) by feature name
    Coefficients {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = if cli.quiet { "warn" } else { "info" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level))
        .format_timestamp(None)
        .init();

    let mut out = std::io::stdout().lock();
    match commands::run(cli.command, &mut out)
        .and_then(|()| out.flush().map_err(|e| wdsurv::Error::io("<stdout>", e)))
    {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_user_error() { 1 } else { 2 })
        }
    }
}

//! Batch CLI for block-diagonal Gaussian process raster downscaling.
//!
//! Subcommands mirror the pipeline stages: `refine` (mask set -> region
//! partition), `fit-mean` (harmonic mean removal), `fit-params` (per-region
//! covariance parameters), `krige` (blur-aware reconstruction), `verify`
//! (synthetic blur-and-recover experiment) and `render` (raster -> PNG).

mod commands;
mod config;
mod error;
mod figures;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use commands::Sensor;
use config::PipelineConfig;
use error::CliError;

#[derive(Parser)]
#[command(name = "bdgp", version, about = "Block-diagonal GP raster downscaling pipeline")]
struct Cli {
    /// Pipeline configuration (TOML). Required by every command except
    /// `render`.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Worker thread cap (defaults to the number of cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    /// Seed override for randomized commands.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Output directory override.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Refine an oversegmented mask set into a region partition.
    Refine,
    /// Fit the per-pixel harmonic mean of one sensor and write residuals.
    FitMean {
        /// Which sensor's raster stack to fit. The high-resolution sensor is
        /// sun-synchronous and gets an annual-only model; the low-resolution
        /// sensor gets annual plus diurnal.
        #[arg(long, value_enum)]
        sensor: SensorArg,
    },
    /// Estimate per-region covariance parameters from the residual stacks.
    FitParams,
    /// Reconstruct the target residual raster with blur-aware kriging.
    Krige,
    /// Run the synthetic blur-and-recover verification experiment.
    Verify,
    /// Render a portable raster to a heatmap PNG.
    Render {
        /// Input raster path.
        input: PathBuf,
        /// Palette: viridis, gray or coolwarm.
        #[arg(long, default_value = "viridis")]
        palette: String,
        /// Lower bound of the color range (requires --hi).
        #[arg(long)]
        lo: Option<f64>,
        /// Upper bound of the color range (requires --lo).
        #[arg(long)]
        hi: Option<f64>,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SensorArg {
    Hires,
    Lowres,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig, CliError> {
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| CliError::Config("--config is required for this command".into()))?;
    PipelineConfig::load(path).map_err(CliError::Config)
}

fn run(cli: &Cli) -> Result<(), CliError> {
    if let Some(threads) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .map_err(|e| CliError::Config(format!("cannot size the thread pool: {e}")))?;
    }

    if let Command::Render {
        input,
        palette,
        lo,
        hi,
    } = &cli.command
    {
        return commands::cmd_render(input, palette, *lo, *hi, cli.out.as_deref());
    }

    let config = load_config(cli)?;
    let out_dir = cli
        .out
        .clone()
        .unwrap_or_else(|| config.paths.out_dir.clone());
    let seed = cli.seed.unwrap_or(config.seed);

    match &cli.command {
        Command::Refine => commands::cmd_refine(&config, &out_dir),
        Command::FitMean { sensor } => {
            let sensor = match sensor {
                SensorArg::Hires => Sensor::Hires,
                SensorArg::Lowres => Sensor::Lowres,
            };
            commands::cmd_fit_mean(&config, &out_dir, sensor)
        }
        Command::FitParams => commands::cmd_fit_params(&config, &out_dir),
        Command::Krige => commands::cmd_krige(&config, &out_dir),
        Command::Verify => commands::cmd_verify(&config, &out_dir, seed),
        Command::Render { .. } => unreachable!("handled above"),
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

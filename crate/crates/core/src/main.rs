use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use t1map::fitting::FitConfig;
use t1map::harness::{
    cli_fit, cli_phantom, cli_traj, exit_code, run_experiment, write_report, ExperimentConfig, RunOptions,
};
use t1map::{Error, Result};

const THREADS_ENV: &str = "T1PILOT_THREADS";

/// Learned k-space trajectories for T1 mapping: phantoms, benchmark runs,
/// reports and standalone fits.
#[derive(Parser)]
#[command(name = "t1map", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Experiment configuration (TOML).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run a single seed instead of the configured list.
    #[arg(long)]
    seed: Option<u64>,
    /// Experiment cells evaluated concurrently.
    #[arg(long, default_value_t = 1)]
    jobs: usize,
    /// Output directory (overrides the configured one).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate phantoms and weighted sequences as raw tensors.
    Phantom(Common),
    /// Run the benchmark and write results.csv.
    Run(Common),
    /// Print the comparison table of a run directory and export plot data.
    Report {
        /// Run directory (defaults to --out).
        run_dir: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Fit T1 maps to a stored sequence.
    Fit {
        /// Directory holding sequence.t1pt and times.t1pt.
        #[arg(long)]
        input: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Write the radial and golden-angle baseline trajectories.
    Traj(Common),
}

fn load(common: &Common) -> Result<ExperimentConfig> {
    let path = common.config.as_deref().ok_or_else(|| Error::Config("--config is required".into()))?;
    let mut cfg = ExperimentConfig::load(path)?;
    if let Some(seed) = common.seed {
        cfg.experiment.seeds = vec![seed];
    }
    if let Some(out) = &common.out {
        cfg.experiment.output = out.clone();
    }
    Ok(cfg)
}

fn threads() -> Result<usize> {
    match std::env::var(THREADS_ENV) {
        Ok(v) => v
            .trim()
            .parse::<usize>()
            .ok()
            .filter(|&n| n > 0)
            .ok_or_else(|| Error::Config(format!("{THREADS_ENV} must be a positive integer, got {v:?}"))),
        Err(_) => Ok(RunOptions::default().threads),
    }
}

fn require_out(common: &Common) -> Result<&Path> {
    common.out.as_deref().ok_or_else(|| Error::Config("--out is required".into()))
}

fn execute(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Phantom(common) => {
            let cfg = load(&common)?;
            let out = cfg.experiment.output.join("phantoms");
            cli_phantom(&cfg, common.out.as_deref().unwrap_or(&out))
        }
        Command::Run(common) => {
            let cfg = load(&common)?;
            if common.jobs == 0 {
                return Err(Error::Config("--jobs must be at least 1".into()));
            }
            let rows = run_experiment(&cfg, RunOptions { jobs: common.jobs, threads: threads()? })?;
            let failed = rows.iter().filter(|r| r.outcome.is_err()).count();
            if failed > 0 {
                log::warn!("{failed} of {} result rows failed", rows.len());
            }
            println!("{}", cfg.experiment.output.join("results.csv").display());
            Ok(())
        }
        Command::Report { run_dir, common } => {
            let dir = match (run_dir, &common.out, &common.config) {
                (Some(d), _, _) => d,
                (None, Some(d), _) => d.clone(),
                (None, None, Some(_)) => load(&common)?.experiment.output,
                _ => return Err(Error::Config("give a run directory, --out or --config".into())),
            };
            print!("{}", write_report(&dir)?);
            Ok(())
        }
        Command::Fit { input, common } => {
            let fit = match &common.config {
                Some(_) => load(&common)?.objective.fit,
                None => FitConfig::default(),
            };
            let fit_result = cli_fit(&input, &fit, require_out(&common)?)?;
            println!("{} of {} pixels fitted", fit_result.n_valid(), fit_result.valid_mask.len());
            Ok(())
        }
        Command::Traj(common) => {
            let cfg = load(&common)?;
            cli_traj(&cfg, require_out(&common)?)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let result = execute(Cli::parse());
    if let Err(e) = &result {
        eprintln!("error: {e}");
    }
    ExitCode::from(exit_code(&result) as u8)
}

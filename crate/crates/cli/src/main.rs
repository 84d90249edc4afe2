//! `homlab`: experiment runner for the homogenization laboratory.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 configuration error, 3 numerical
//! failure.

mod artifacts;
mod commands;
mod config;
mod error;
mod plot;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::artifacts::Artifacts;
use crate::config::{Command, ExperimentConfig};
use crate::error::CliError;

#[derive(Parser)]
#[command(
    name = "homlab",
    version,
    about = "Periodic homogenization with sparse defects: experiment runner"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Config file (TOML, or JSON by extension); flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, short)]
    output: Option<PathBuf>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run the command named in a config file.
    Run {
        config: PathBuf,
        #[arg(long, short)]
        output: Option<PathBuf>,
    },
    /// Validate a config file and print its hash without running it.
    Check { config: PathBuf },
    /// Print the fully defaulted config of a command as TOML.
    Defaults { command: Command },
    /// Certify the geometric assumptions of the dyadic defect set.
    GeometryCertify {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        dim: Option<usize>,
        #[arg(long)]
        c0: Option<f64>,
        #[arg(long)]
        index_bound: Option<u32>,
        /// Accepted for compatibility; sampling is always deterministic.
        #[arg(long)]
        seedless: bool,
    },
    /// Cell norms and average decay of the perturbation.
    DefectProfile {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        max_shell: Option<u32>,
    },
    /// Periodic and perturbed correctors for one direction.
    Corrector {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        direction: Option<usize>,
        #[arg(long)]
        box_l: Option<f64>,
        #[arg(long)]
        generations: Option<u32>,
        #[arg(long)]
        cells_per_unit: Option<usize>,
    },
    /// Flux matrix and potential residuals on the periodic cell.
    Potential {
        #[command(flatten)]
        common: Common,
    },
    /// Homogenized tensor, optionally with the flux-average check.
    Homogenize {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        cells_per_unit: Option<usize>,
    },
    /// One-dimensional oracle rate study.
    #[command(name = "rates-1d")]
    Rates1d {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        eps_min_exp: Option<u32>,
        #[arg(long)]
        eps_max_exp: Option<u32>,
    },
    /// Remainder convergence study of the two-scale expansion.
    Rates {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        eps_min_exp: Option<u32>,
        #[arg(long)]
        eps_max_exp: Option<u32>,
    },
}

fn base(command: Command, common: &Common) -> Result<ExperimentConfig, CliError> {
    let mut cfg = match &common.config {
        Some(path) => {
            let cfg = ExperimentConfig::load(path)?;
            if cfg.command != command {
                return Err(CliError::Schema(format!(
                    "{} names command '{}', not '{}'",
                    path.display(),
                    cfg.command.name(),
                    command.name()
                )));
            }
            cfg
        }
        None => ExperimentConfig::new(command),
    };
    if let Some(o) = &common.output {
        cfg.output_dir = o.clone();
    }
    Ok(cfg)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

fn build_config(cmd: Cmd) -> Result<Option<ExperimentConfig>, CliError> {
    let cfg = match cmd {
        Cmd::Defaults { command } => {
            print!("{}", ExperimentConfig::new(command).to_toml());
            return Ok(None);
        }
        Cmd::Check { config } => {
            let cfg = ExperimentConfig::load(&config)?;
            println!(
                "{}: valid {} config, config_sha256={}",
                config.display(),
                cfg.command.name(),
                cfg.hash()
            );
            return Ok(None);
        }
        Cmd::Run { config, output } => {
            let mut cfg = ExperimentConfig::load(&config)?;
            set(&mut cfg.output_dir, output);
            cfg
        }
        Cmd::GeometryCertify {
            common,
            dim,
            c0,
            index_bound,
            seedless: _,
        } => {
            let mut cfg = base(Command::GeometryCertify, &common)?;
            set(&mut cfg.geometry.dim, dim);
            set(&mut cfg.geometry.c0, c0);
            set(&mut cfg.geometry.index_bound, index_bound);
            cfg
        }
        Cmd::DefectProfile { common, max_shell } => {
            let mut cfg = base(Command::DefectProfile, &common)?;
            set(&mut cfg.defect_profile.max_shell, max_shell);
            cfg
        }
        Cmd::Corrector {
            common,
            direction,
            box_l,
            generations,
            cells_per_unit,
        } => {
            let mut cfg = base(Command::Corrector, &common)?;
            set(&mut cfg.corrector.direction, direction);
            set(&mut cfg.corrector.box_l, box_l);
            set(&mut cfg.corrector.cells_per_unit, cells_per_unit);
            if generations.is_some() {
                cfg.coefficient.generations = generations;
            }
            cfg
        }
        Cmd::Potential { common } => base(Command::Potential, &common)?,
        Cmd::Homogenize { common, cells_per_unit } => {
            let mut cfg = base(Command::Homogenize, &common)?;
            set(&mut cfg.homogenize.cells_per_unit, cells_per_unit);
            cfg
        }
        Cmd::Rates1d {
            common,
            preset,
            eps_min_exp,
            eps_max_exp,
        } => {
            let mut cfg = base(Command::Rates1d, &common)?;
            if preset.is_some() {
                cfg.rates_1d.preset = preset;
            }
            set(&mut cfg.rates_1d.eps_min_exp, eps_min_exp);
            set(&mut cfg.rates_1d.eps_max_exp, eps_max_exp);
            cfg
        }
        Cmd::Rates {
            common,
            preset,
            eps_min_exp,
            eps_max_exp,
        } => {
            let mut cfg = base(Command::Rates, &common)?;
            if preset.is_some() {
                cfg.rates.preset = preset;
            }
            set(&mut cfg.rates.eps_min_exp, eps_min_exp);
            set(&mut cfg.rates.eps_max_exp, eps_max_exp);
            cfg
        }
    };
    cfg.validate()?;
    Ok(Some(cfg))
}

fn workers(cfg: &ExperimentConfig) -> Result<Option<usize>, CliError> {
    match std::env::var("HOMLAB_WORKERS") {
        Ok(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(CliError::Schema(format!(
                "HOMLAB_WORKERS must be a positive integer, got '{v}'"
            ))),
        },
        Err(_) => Ok(cfg.workers),
    }
}

fn execute(cmd: Cmd) -> Result<(), CliError> {
    let Some(cfg) = build_config(cmd)? else {
        return Ok(());
    };
    if let Some(n) = workers(&cfg)? {
        // only fails if a pool already exists, which cannot happen here
        let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
    }
    let mut out = Artifacts::create(&cfg.output_dir, cfg.hash())?;
    let summary = commands::run(&cfg, &mut out)?;
    let manifest = out.finish(&cfg)?;
    println!("{}: {summary}", cfg.command.name());
    println!(
        "{} files in {} (config_sha256={})",
        manifest.files.len(),
        cfg.output_dir.display(),
        manifest.config_sha256
    );
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    match execute(cli.cmd) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("homlab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

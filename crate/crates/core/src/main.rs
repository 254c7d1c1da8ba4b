use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use saga_lab::config::{ExperimentConfig, GridAxis};
use saga_lab::runner::{self, RunError, RunOptions, VerifyConfig, VerifyKind};
use saga_lab::sampler::Method;
use serde::Serialize;

#[derive(Parser)]
#[command(name = "saga-lab", version, about = "Toy-scale prior learning over partially denoised latents")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate records for every prompt and seed, then score them.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replace the configured sampling method.
        #[arg(long)]
        method: Option<Method>,
        /// `key=value`, with dotted keys or short aliases such as `momentum`.
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
        /// Also write one PPM per record.
        #[arg(long)]
        images: bool,
    },
    /// Run the cartesian product of the grid axes, resuming finished cells.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// `key=lo:hi:step`, `key=lo:hi` or `key=v1,v2,...`.
        #[arg(long = "grid", value_name = "KEY=VALUES", required = true)]
        grid: Vec<GridAxis>,
        #[arg(long)]
        method: Option<Method>,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Numeric checks of the Gaussian approximation.
    Verify {
        #[arg(value_enum)]
        which: Which,
        /// Mixture, schedule and signal levels; defaults when omitted.
        #[arg(long)]
        config: Option<PathBuf>,
        /// Write the JSON report here as well as to standard output.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Finite-difference check of every tape op and the full guidance chain.
    Gradcheck {
        #[arg(long, default_value_t = 100)]
        instances: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit the learned backend and write its weights.
    TrainBackend {
        #[arg(long)]
        config: PathBuf,
        #[arg(long = "override", value_name = "KEY=VALUE")]
        overrides: Vec<String>,
    },
    /// Aggregate every run below a directory into `report.csv`.
    Report {
        #[arg(long = "in")]
        dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Which {
    Prop1,
    Cumulants,
}

fn print_json<T: Serialize>(v: &T, out: Option<&Path>) -> Result<(), RunError> {
    let text = serde_json::to_string_pretty(v).expect("report serializes");
    if let Some(p) = out {
        std::fs::write(p, &text).map_err(|source| RunError::Io {
            path: p.to_path_buf(),
            source,
        })?;
    }
    println!("{text}");
    Ok(())
}

fn failed(what: &str) -> RunError {
    RunError::Check(format!("{what} failed; see the report"))
}

fn execute(cmd: Command) -> Result<(), RunError> {
    match cmd {
        Command::Run {
            config,
            method,
            overrides,
            images,
        } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let report = runner::run(&cfg, &config, &RunOptions { method, images })?;
            let csv = runner::summary_csv(&report.summary)?;
            print!("{}", String::from_utf8_lossy(&csv));
            eprintln!("wrote {}", cfg.output.display());
        }
        Command::Sweep {
            config,
            grid,
            method,
            overrides,
        } => {
            let opts = RunOptions {
                method,
                images: false,
            };
            let rows = runner::sweep(&config, &overrides, &grid, &opts)?;
            let computed = rows.iter().filter(|r| r.computed).count();
            eprintln!("{} cells, {computed} computed, {} reused", rows.len(), rows.len() - computed);
        }
        Command::Verify { which, config, out } => {
            let cfg = match &config {
                Some(p) => VerifyConfig::load(p)?,
                None => VerifyConfig::default(),
            };
            let kind = match which {
                Which::Prop1 => VerifyKind::Prop1,
                Which::Cumulants => VerifyKind::Cumulants,
            };
            match kind {
                VerifyKind::Prop1 => {
                    let r = runner::verify_prop1(&cfg)?;
                    print_json(&r, out.as_deref())?;
                    if !r.pass {
                        return Err(failed("prop1"));
                    }
                }
                VerifyKind::Cumulants => {
                    let r = runner::verify_cumulants(&cfg)?;
                    print_json(&r, out.as_deref())?;
                    if !r.pass {
                        return Err(failed("cumulants"));
                    }
                }
            }
        }
        Command::Gradcheck {
            instances,
            seed,
            out,
        } => {
            let r = runner::gradcheck(instances, seed)?;
            print_json(&r, out.as_deref())?;
            if r.worst() >= 1e-4 {
                return Err(RunError::Check(format!("worst relative error {:.3e}", r.worst())));
            }
        }
        Command::TrainBackend { config, overrides } => {
            let cfg = ExperimentConfig::load(&config, &overrides)?;
            let (weights, report) = runner::train_backend(&cfg, &config)?;
            print_json(&report, None)?;
            eprintln!("wrote {}", weights.display());
        }
        Command::Report { dir } => {
            let rows = runner::report(&dir)?;
            let csv = runner::summary_csv(&rows)?;
            print!("{}", String::from_utf8_lossy(&csv));
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Err(e) = runner::configure_threads() {
        eprintln!("error: {e}");
        return ExitCode::from(1);
    }
    match execute(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

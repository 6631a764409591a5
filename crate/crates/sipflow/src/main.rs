//! `sipflow` command-line entry point.
//!
//! Exit codes: 0 success, 2 invalid input, 3 aborted run, 1 any other
//! failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use sipflow_core::harness::{compare_losses, run_diagnostics, run_experiment, ExperimentConfig};
use sipflow_core::Error;

#[derive(Parser)]
#[command(name = "sipflow", version, about = "Particle Wasserstein gradient flows for stochastic inverse problems")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment end to end.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Output directory (overrides the config).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Master seed (overrides the config).
        #[arg(long)]
        seed: Option<u64>,
        /// Restore the published problem sizes and budgets.
        #[arg(long)]
        paper_parity: bool,
    },
    /// Iterations and time each loss needs to reach the W₂ threshold.
    CompareLosses {
        #[arg(long)]
        config: PathBuf,
    },
    /// Estimator-variance suite and MAP consistency checks.
    Diagnostics {
        #[arg(long)]
        config: PathBuf,
    },
}

const EXIT_FAILURE: u8 = 1;
const EXIT_VALIDATION: u8 = 2;
const EXIT_ABORTED: u8 = 3;

fn fail(e: Error) -> ExitCode {
    eprintln!("error: {e}");
    ExitCode::from(if e.is_validation() { EXIT_VALIDATION } else { EXIT_FAILURE })
}

fn load(path: &Path) -> Result<ExperimentConfig, Error> {
    ExperimentConfig::load(path)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match cli.command {
        Command::Run {
            config,
            out,
            seed,
            paper_parity,
        } => {
            let mut cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            if let Some(dir) = out {
                cfg.output_dir = dir;
            }
            if let Some(s) = seed {
                cfg.set_seed(s);
            }
            if paper_parity {
                cfg.apply_paper_parity();
            }
            match run_experiment(&cfg) {
                Ok(summary) if summary.aborted => {
                    eprintln!(
                        "run aborted after {} iterations: {}",
                        summary.iterations,
                        summary.abort_reason.unwrap_or_default()
                    );
                    ExitCode::from(EXIT_ABORTED)
                }
                Ok(summary) => {
                    let m = summary.metrics.as_ref().expect("completed runs carry metrics");
                    println!(
                        "{:?}: {} iterations in {:.1} s; parameter W2 {:.4} -> {:.4}, energy distance {:.4} -> {:.4}; output in {}",
                        summary.experiment,
                        summary.iterations,
                        summary.wall_seconds,
                        m.parameter_w2_initial,
                        m.parameter_w2_final,
                        m.parameter_energy_distance_initial,
                        m.parameter_energy_distance_final,
                        cfg.output_dir.display()
                    );
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::CompareLosses { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match compare_losses(&cfg) {
                Ok(rows) => {
                    for r in rows {
                        println!(
                            "sigma={} loss={} iterations={} reached={} W2={:.4} ms/iter={:.3}",
                            r.sigma, r.loss, r.iterations, r.reached, r.final_w2, r.ms_per_iteration
                        );
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
        Command::Diagnostics { config } => {
            let cfg = match load(&config) {
                Ok(c) => c,
                Err(e) => return fail(e),
            };
            match run_diagnostics(&cfg) {
                Ok(rows) => {
                    for r in rows {
                        println!("{},{},{:.6},{:.6}", r.check, r.setting, r.value, r.stderr);
                    }
                    ExitCode::SUCCESS
                }
                Err(e) => fail(e),
            }
        }
    }
}

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use gtrpo_lab::compare::{compare, load_record_set, CompareError};
use gtrpo_lab::config::{Equalize, ExperimentConfig};
use gtrpo_lab::runner::{run_experiment, RunError};
use gtrpo_lab::verify::{self, Suite};

const CHECK_FAILED: u8 = 1;
const CONFIG_ERROR: u8 = 2;

#[derive(Parser)]
#[command(name = "gtrpo", version, about = "Seeded tabular POMDP policy-optimization experiments")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run every seed of an experiment config.
    Run {
        #[arg(long)]
        config: PathBuf,
        /// Replaces the config's seed list; repeatable.
        #[arg(long = "seed")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// episodes | steps
        #[arg(long)]
        equalize: Option<Equalize>,
    },
    /// Summarize and plot run directories against each other.
    Compare {
        #[arg(required = true)]
        runs: Vec<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Final-window length for the summary, in updates.
        #[arg(long, default_value_t = 10)]
        window: usize,
        /// Plot-time smoothing width, in updates.
        #[arg(long, default_value_t = 10)]
        smooth: usize,
    },
    /// Run the oracle-backed property checks; one JSON object per check.
    Verify {
        #[arg(default_value = "all")]
        suite: Suite,
    },
}

fn main() -> ExitCode {
    match Cli::parse().command {
        Command::Run {
            config,
            seeds,
            out,
            equalize,
        } => run(config, seeds, out, equalize),
        Command::Compare {
            runs,
            out,
            window,
            smooth,
        } => {
            let result = runs
                .iter()
                .map(|d| load_record_set(d))
                .collect::<Result<Vec<_>, _>>()
                .and_then(|sets| compare(&sets, window))
                .and_then(|c| c.write(&out, smooth).map(|_| c));
            match result {
                Ok(c) => {
                    print!("{}", c.summary_csv());
                    ExitCode::SUCCESS
                }
                Err(e @ CompareError::MixedAccounting(..)) => {
                    eprintln!("error: {e}");
                    ExitCode::from(CONFIG_ERROR)
                }
                Err(e) => {
                    eprintln!("error: {e}");
                    ExitCode::from(CHECK_FAILED)
                }
            }
        }
        Command::Verify { suite } => {
            let checks = verify::run(suite);
            let failed = checks.iter().filter(|c| !c.passed).count();
            for c in &checks {
                println!("{}", c.to_json_line());
            }
            eprintln!("{suite}: {} checks, {failed} failed", checks.len());
            if failed == 0 {
                ExitCode::SUCCESS
            } else {
                ExitCode::from(CHECK_FAILED)
            }
        }
    }
}

fn run(path: PathBuf, seeds: Vec<u64>, out: Option<PathBuf>, equalize: Option<Equalize>) -> ExitCode {
    let text = match std::fs::read_to_string(&path) {
        Ok(t) => t,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    let mut config = match ExperimentConfig::parse(&text) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {}: {e}", path.display());
            return ExitCode::from(CONFIG_ERROR);
        }
    };
    if !seeds.is_empty() {
        config.seeds = seeds;
    }
    if let Some(out) = out {
        config.output_dir = out;
    }
    if let Some(by) = equalize {
        config.equalize_by = by;
    }
    match run_experiment(&config) {
        Ok(records) => {
            for r in &records {
                let last = r.rows.last();
                eprintln!(
                    "seed {}: {} updates, final mean return {:.4}, {} aborted",
                    r.seed,
                    r.rows.len(),
                    last.map_or(f64::NAN, |row| row.mean_return),
                    r.aborted_updates
                );
            }
            ExitCode::SUCCESS
        }
        Err(e @ (RunError::Env(_) | RunError::Spec(_))) => {
            eprintln!("error: {}: {e}", path.display());
            ExitCode::from(CONFIG_ERROR)
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(CHECK_FAILED)
        }
    }
}

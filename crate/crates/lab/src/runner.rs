//! Seeded training runs writing one CSV per seed.

use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};

use gtrpo_core::env::build_env;
use gtrpo_core::estimation::{empirical_advantage, fit_v_table_with, Batch, ValueContext};
use gtrpo_core::policy::PolicyParams;
use gtrpo_core::pomdp::PomdpSpec;
use gtrpo_core::update::{
    gtrpo_update, ppo_update, DivergenceKind, GtrpoOptions, ObjectiveMode, UpdateError, UpdateReport,
};
use thiserror::Error;

use crate::config::{Algorithm, Equalize, ExperimentConfig};
use crate::formats::write_policy;

/// Column order of every run CSV.
pub const CSV_HEADER: &str =
    "update,env_steps,episodes,mean_return,mean_discounted_return,mean_episode_length,divergence,clipped_fraction";

#[derive(Debug, Error)]
pub enum RunError {
    #[error("environment: {0}")]
    Env(#[from] gtrpo_core::env::EnvError),
    #[error("spec: {0}")]
    Spec(#[from] gtrpo_core::pomdp::SpecError),
    #[error("sampling: {0}")]
    Estimation(#[from] gtrpo_core::estimation::EstimationError),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: io::Error },
}

fn io_err(path: &Path) -> impl FnOnce(io::Error) -> RunError + '_ {
    move |source| RunError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRow {
    pub update: usize,
    pub env_steps: u64,
    pub episodes: u64,
    pub mean_return: f64,
    pub mean_discounted_return: f64,
    pub mean_episode_length: f64,
    /// Sampled divergence of the update (NaN when the update errored).
    pub divergence: f64,
    pub clipped_fraction: f64,
}

impl RunRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.update,
            self.env_steps,
            self.episodes,
            self.mean_return,
            self.mean_discounted_return,
            self.mean_episode_length,
            self.divergence,
            self.clipped_fraction
        )
    }

    pub fn from_csv(line: &str) -> Result<Self, String> {
        let f: Vec<&str> = line.trim().split(',').collect();
        if f.len() != 8 {
            return Err(format!("expected 8 columns, got {}", f.len()));
        }
        let num = |i: usize| f[i].parse::<f64>().map_err(|e| format!("column {}: {e}", i + 1));
        let int = |i: usize| f[i].parse::<u64>().map_err(|e| format!("column {}: {e}", i + 1));
        Ok(Self {
            update: int(0)? as usize,
            env_steps: int(1)?,
            episodes: int(2)?,
            mean_return: num(3)?,
            mean_discounted_return: num(4)?,
            mean_episode_length: num(5)?,
            divergence: num(6)?,
            clipped_fraction: num(7)?,
        })
    }

    /// The x-axis value under the given accounting.
    pub fn budget(&self, by: Equalize) -> u64 {
        match by {
            Equalize::Episodes => self.episodes,
            Equalize::EnvSteps => self.env_steps,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunRecord {
    pub seed: u64,
    pub rows: Vec<RunRow>,
    pub final_policy: PolicyParams,
    /// Updates whose step was rolled back or errored.
    pub aborted_updates: usize,
}

pub fn seed_csv_path(dir: &Path, seed: u64) -> PathBuf {
    dir.join(format!("seed_{seed}.csv"))
}

pub fn build_spec(config: &ExperimentConfig) -> Result<PomdpSpec, RunError> {
    Ok(build_env(&config.env)?.with_gamma(config.gamma)?)
}

/// Episode seeds of the batch that starts after `episodes` episodes.
pub fn batch_seed_base(seed: u64, episodes: u64) -> u64 {
    (seed << 32).wrapping_add(episodes)
}

fn update(
    config: &ExperimentConfig,
    batch: &Batch,
    policy: &PolicyParams,
    progress: f64,
) -> Result<(PolicyParams, UpdateReport), UpdateError> {
    let g = config.gamma;
    let (context, mode) = match config.algorithm {
        Algorithm::PpoMdp => (ValueContext::Observation, ObjectiveMode::Mdp),
        _ => (ValueContext::ThreeObservation, ObjectiveMode::Pomdp),
    };
    let v = fit_v_table_with(batch, g, context);
    let adv = empirical_advantage(batch, &v, g);
    match config.algorithm {
        Algorithm::GtrpoTraj | Algorithm::GtrpoGamma => {
            let div = if config.algorithm == Algorithm::GtrpoTraj {
                DivergenceKind::Trajectory
            } else {
                DivergenceKind::Gamma
            };
            let mut opts = GtrpoOptions::new(config.env.max_steps);
            opts.damping = config.damping;
            gtrpo_update(batch, policy, &adv, div, config.delta_prime, &opts)
        }
        _ => ppo_update(batch, policy, &adv, &config.schedule.at(progress), mode, &config.optimizer),
    }
}

/// Runs one seed, appending rows to `sink` as they are produced.
pub fn run_seed<W: Write>(config: &ExperimentConfig, seed: u64, sink: &mut W) -> Result<RunRecord, io::Error> {
    let spec = build_spec(config).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e.to_string()))?;
    let mut policy = PolicyParams::uniform(spec.num_obs(), spec.num_actions());
    let (mut episodes, mut steps) = (0u64, 0u64);
    let mut rows = Vec::new();
    let mut aborted = 0;
    writeln!(sink, "{CSV_HEADER}")?;
    loop {
        let used = match config.equalize_by {
            Equalize::Episodes => episodes,
            Equalize::EnvSteps => steps,
        };
        if used >= config.total_steps {
            break;
        }
        let m = match config.equalize_by {
            Equalize::Episodes => (config.total_steps - episodes).min(config.batch_episodes as u64) as usize,
            Equalize::EnvSteps => config.batch_episodes,
        };
        let progress = used as f64 / config.total_steps as f64;
        let batch = Batch::sample(&spec, &policy, m, batch_seed_base(seed, episodes))
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e.to_string()))?;
        episodes += m as u64;
        steps += batch.env_steps() as u64;
        let (divergence, clipped_fraction) = match update(config, &batch, &policy, progress) {
            Ok((next, rep)) => {
                if rep.diverged {
                    aborted += 1;
                    eprintln!("seed {seed}, update {}: non-finite step rolled back", rows.len() + 1);
                }
                policy = next;
                (rep.constraint_value, rep.clipped_fraction)
            }
            Err(e) => {
                aborted += 1;
                eprintln!("seed {seed}, update {}: {e}; keeping the previous policy", rows.len() + 1);
                (f64::NAN, 0.0)
            }
        };
        let row = RunRow {
            update: rows.len() + 1,
            env_steps: steps,
            episodes,
            mean_return: batch.mean_return(),
            mean_discounted_return: batch.mean_discounted_return(),
            mean_episode_length: batch.mean_length(),
            divergence,
            clipped_fraction,
        };
        writeln!(sink, "{}", row.to_csv())?;
        sink.flush()?;
        rows.push(row);
    }
    Ok(RunRecord {
        seed,
        rows,
        final_policy: policy,
        aborted_updates: aborted,
    })
}

/// Runs every seed on its own thread. Writes `seed_<n>.csv`,
/// `seed_<n>.policy` and `run.meta` under `config.output_dir`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>, RunError> {
    build_spec(config)?;
    let dir = &config.output_dir;
    fs::create_dir_all(dir).map_err(io_err(dir))?;
    let meta = dir.join("run.meta");
    fs::write(&meta, config.to_kv_string()).map_err(io_err(&meta))?;
    let results: Vec<Result<RunRecord, RunError>> = std::thread::scope(|scope| {
        let handles: Vec<_> = config
            .seeds
            .iter()
            .map(|&seed| {
                scope.spawn(move || {
                    let path = seed_csv_path(dir, seed);
                    let file = File::create(&path).map_err(io_err(&path))?;
                    let mut w = BufWriter::new(file);
                    let rec = run_seed(config, seed, &mut w).map_err(io_err(&path))?;
                    let ckpt = dir.join(format!("seed_{seed}.policy"));
                    fs::write(&ckpt, write_policy(&rec.final_policy)).map_err(io_err(&ckpt))?;
                    Ok(rec)
                })
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("seed worker panicked")).collect()
    });
    results.into_iter().collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(total: u64, by: Equalize) -> ExperimentConfig {
        let mut c = ExperimentConfig::parse(
            "[env]\nbase = two_door\n[algorithm]\nname = ppo_pomdp\n[run]\ntotal_steps = 1\nbatch_episodes = 32\nseeds = 3\n",
        )
        .unwrap();
        c.total_steps = total;
        c.equalize_by = by;
        c
    }

    fn rows(c: &ExperimentConfig) -> (Vec<RunRow>, String) {
        let mut buf = Vec::new();
        let rec = run_seed(c, 3, &mut buf).unwrap();
        (rec.rows, String::from_utf8(buf).unwrap())
    }

    #[test]
    fn single_batch_gives_one_row() {
        let (r, text) = rows(&config(32, Equalize::Episodes));
        assert_eq!(r.len(), 1);
        assert_eq!(text.lines().count(), 2);
        assert_eq!(text.lines().next().unwrap(), CSV_HEADER);
        let (r, _) = rows(&config(1, Equalize::EnvSteps));
        assert_eq!(r.len(), 1);
    }

    #[test]
    fn budgets() {
        let (r, _) = rows(&config(100, Equalize::Episodes));
        assert_eq!(r.last().unwrap().episodes, 100);
        assert_eq!(r.len(), 4);
        let (r, _) = rows(&config(300, Equalize::EnvSteps));
        let last = r.last().unwrap().env_steps;
        assert!(last >= 300);
        assert!(r[r.len() - 2].env_steps < 300);
        assert!(r.windows(2).all(|w| w[0].env_steps < w[1].env_steps));
    }

    #[test]
    fn rows_parse_back() {
        let (r, text) = rows(&config(64, Equalize::Episodes));
        let parsed: Vec<RunRow> = text.lines().skip(1).map(|l| RunRow::from_csv(l).unwrap()).collect();
        assert_eq!(parsed.len(), r.len());
        for (a, b) in parsed.iter().zip(&r) {
            assert_eq!(a.to_csv(), b.to_csv());
        }
    }
}

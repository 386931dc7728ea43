//! Experiment configuration: `[env]`, `[algorithm]`, `[schedule]`, `[run]`.

use std::fmt;
use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use gtrpo_core::env::{BaseEnv, EnvConfig};
use gtrpo_core::trust_region::DEFAULT_DAMPING;
use gtrpo_core::update::{ClipSchedule, OptimizerConfig, OptimizerKind};

use crate::kv::{KvDoc, KvError, Section};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Algorithm {
    PpoMdp,
    PpoPomdp,
    GtrpoTraj,
    GtrpoGamma,
    PpoSignSgd,
}

impl Algorithm {
    pub const ALL: [Algorithm; 5] = [
        Algorithm::PpoMdp,
        Algorithm::PpoPomdp,
        Algorithm::GtrpoTraj,
        Algorithm::GtrpoGamma,
        Algorithm::PpoSignSgd,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Algorithm::PpoMdp => "ppo_mdp",
            Algorithm::PpoPomdp => "ppo_pomdp",
            Algorithm::GtrpoTraj => "gtrpo_traj",
            Algorithm::GtrpoGamma => "gtrpo_gamma",
            Algorithm::PpoSignSgd => "ppo_signsgd",
        }
    }

    pub fn is_gtrpo(self) -> bool {
        matches!(self, Algorithm::GtrpoTraj | Algorithm::GtrpoGamma)
    }
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Algorithm::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| "expected one of ppo_mdp, ppo_pomdp, gtrpo_traj, gtrpo_gamma, ppo_signsgd".to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Equalize {
    Episodes,
    EnvSteps,
}

impl Equalize {
    pub fn name(self) -> &'static str {
        match self {
            Equalize::Episodes => "episodes",
            Equalize::EnvSteps => "env_steps",
        }
    }
}

impl fmt::Display for Equalize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Equalize {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "episodes" => Ok(Equalize::Episodes),
            "env_steps" | "steps" => Ok(Equalize::EnvSteps),
            _ => Err("expected episodes or env_steps".into()),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScheduleConfig {
    Fixed(ClipSchedule),
    /// δ = 0.1 then 0.05 after half the budget.
    Dynamic,
}

impl ScheduleConfig {
    pub fn at(&self, progress: f64) -> ClipSchedule {
        match *self {
            ScheduleConfig::Fixed(s) => s,
            ScheduleConfig::Dynamic => gtrpo_core::update::dynamic_clip_schedule(progress),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub env: EnvConfig,
    pub algorithm: Algorithm,
    pub optimizer: OptimizerConfig,
    /// Trust-region size δ' for the GTRPO variants.
    pub delta_prime: f64,
    pub damping: f64,
    pub schedule: ScheduleConfig,
    pub gamma: f64,
    /// Budget in the unit chosen by `equalize_by`.
    pub total_steps: u64,
    pub batch_episodes: usize,
    pub seeds: Vec<u64>,
    pub equalize_by: Equalize,
    pub output_dir: PathBuf,
}

fn bad(s: &Section, key: &str, msg: impl Into<String>) -> KvError {
    let line = s.get(key).map_or(s.line, |e| e.line);
    KvError::new(line, format!("{}.{}", s.name, key), msg)
}

impl ExperimentConfig {
    pub fn parse(text: &str) -> Result<Self, KvError> {
        let doc = KvDoc::parse(text)?;
        doc.only_sections(&["env", "algorithm", "schedule", "run"])?;

        let env_s = doc.require("env")?;
        env_s.only_keys(&["base", "obs_noise", "alive_bonus_pos", "alive_bonus_neg", "max_steps"])?;
        let base: BaseEnv = env_s
            .parse("base")
            .map_err(|e| KvError::new(e.line, e.field, "expected two_door, noisy_chain or cliff_alive"))?;
        let mut env = EnvConfig::new(base);
        env.obs_noise = env_s.parse_or("obs_noise", 0.0)?;
        if !(0.0..1.0).contains(&env.obs_noise) {
            return Err(bad(env_s, "obs_noise", "must lie in [0, 1)"));
        }
        env.alive_bonus_scale_pos = env_s.parse_or("alive_bonus_pos", 1.0)?;
        env.alive_bonus_scale_neg = env_s.parse_or("alive_bonus_neg", 1.0)?;
        env.max_steps = env_s.parse_or("max_steps", base.default_max_steps())?;
        if env.max_steps == 0 {
            return Err(bad(env_s, "max_steps", "must be positive"));
        }

        let alg_s = doc.require("algorithm")?;
        alg_s.only_keys(&["name", "optimizer", "lr", "epochs", "minibatch", "delta_prime", "damping"])?;
        let algorithm: Algorithm = alg_s.parse("name")?;
        let kind = match alg_s.get("optimizer").map(|e| e.value.as_str()) {
            None => {
                if algorithm == Algorithm::PpoSignSgd {
                    OptimizerKind::SignSgd
                } else {
                    OptimizerKind::Sgd
                }
            }
            Some("sgd") => OptimizerKind::Sgd,
            Some("signsgd") => OptimizerKind::SignSgd,
            Some(_) => return Err(bad(alg_s, "optimizer", "expected sgd or signsgd")),
        };
        if algorithm == Algorithm::PpoSignSgd && kind != OptimizerKind::SignSgd {
            return Err(bad(alg_s, "optimizer", "ppo_signsgd needs optimizer = signsgd"));
        }
        let default_lr = match kind {
            OptimizerKind::Sgd => 0.5,
            OptimizerKind::SignSgd => 0.01,
        };
        let lr: f64 = alg_s.parse_or("lr", default_lr)?;
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(bad(alg_s, "lr", "must be positive"));
        }
        let epochs: usize = alg_s.parse_or("epochs", OptimizerConfig::DEFAULT_EPOCHS)?;
        if epochs == 0 {
            return Err(bad(alg_s, "epochs", "must be positive"));
        }
        let minibatch_size = match alg_s.get("minibatch") {
            Some(_) => {
                let n: usize = alg_s.parse("minibatch")?;
                if n == 0 {
                    return Err(bad(alg_s, "minibatch", "must be positive"));
                }
                Some(n)
            }
            None => None,
        };
        let delta_prime: f64 = alg_s.parse_or("delta_prime", 0.01)?;
        if !(delta_prime > 0.0) {
            return Err(bad(alg_s, "delta_prime", "must be positive"));
        }
        let damping: f64 = alg_s.parse_or("damping", DEFAULT_DAMPING)?;
        if !(damping >= 0.0) {
            return Err(bad(alg_s, "damping", "must be nonnegative"));
        }

        let run_s = doc.require("run")?;
        run_s.only_keys(&["gamma", "total_steps", "batch_episodes", "seeds", "equalize_by", "output_dir"])?;
        let gamma: f64 = run_s.parse_or("gamma", base.default_gamma())?;
        if !(0.0..=1.0).contains(&gamma) {
            return Err(bad(run_s, "gamma", "must lie in [0, 1]"));
        }
        let total_steps: u64 = run_s.parse("total_steps")?;
        if total_steps == 0 {
            return Err(bad(run_s, "total_steps", "must be positive"));
        }
        let batch_episodes: usize = run_s.parse("batch_episodes")?;
        if batch_episodes == 0 {
            return Err(bad(run_s, "batch_episodes", "must be positive"));
        }
        let seeds: Vec<u64> = run_s.parse_list("seeds")?;
        if seeds.is_empty() {
            return Err(bad(run_s, "seeds", "need at least one seed"));
        }
        let equalize_by: Equalize = run_s.parse_or("equalize_by", Equalize::Episodes)?;
        let output_dir = PathBuf::from(run_s.get("output_dir").map_or("out", |e| e.value.as_str()));

        let schedule = match doc.section("schedule") {
            None => ScheduleConfig::Fixed(ClipSchedule::Constant { delta: 0.1 }),
            Some(s) => {
                s.only_keys(&["kind", "delta", "alpha", "beta"])?;
                let sched = match s.get("kind").map_or("constant", |e| e.value.as_str()) {
                    "constant" => ScheduleConfig::Fixed(ClipSchedule::Constant {
                        delta: s.parse_or("delta", 0.1)?,
                    }),
                    "length_dep" => ScheduleConfig::Fixed(ClipSchedule::LengthDependent {
                        alpha: s.parse_or("alpha", 1.2)?,
                    }),
                    "gamma_dep" => ScheduleConfig::Fixed(ClipSchedule::GammaDependent {
                        alpha: s.parse_or("alpha", 1.2)?,
                        beta: s.parse_or("beta", 0.3)?,
                        gamma,
                    }),
                    "dynamic" => ScheduleConfig::Dynamic,
                    _ => return Err(bad(s, "kind", "expected constant, length_dep, gamma_dep or dynamic")),
                };
                if let ScheduleConfig::Fixed(c) = sched {
                    c.validate().map_err(|e| bad(s, "kind", e.to_string()))?;
                }
                sched
            }
        };

        Ok(Self {
            env,
            algorithm,
            optimizer: OptimizerConfig {
                kind,
                lr,
                epochs,
                minibatch_size,
            },
            delta_prime,
            damping,
            schedule,
            gamma,
            total_steps,
            batch_episodes,
            seeds,
            equalize_by,
            output_dir,
        })
    }

    /// Canonical text form; parses back to an equal config.
    pub fn to_kv_string(&self) -> String {
        let mut s = String::new();
        let e = &self.env;
        let _ = writeln!(s, "[env]");
        let _ = writeln!(s, "base = {}", e.base);
        let _ = writeln!(s, "obs_noise = {}", e.obs_noise);
        let _ = writeln!(s, "alive_bonus_pos = {}", e.alive_bonus_scale_pos);
        let _ = writeln!(s, "alive_bonus_neg = {}", e.alive_bonus_scale_neg);
        let _ = writeln!(s, "max_steps = {}", e.max_steps);
        let _ = writeln!(s, "\n[algorithm]");
        let _ = writeln!(s, "name = {}", self.algorithm);
        let o = &self.optimizer;
        let kind = match o.kind {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::SignSgd => "signsgd",
        };
        let _ = writeln!(s, "optimizer = {kind}");
        let _ = writeln!(s, "lr = {}", o.lr);
        let _ = writeln!(s, "epochs = {}", o.epochs);
        if let Some(mb) = o.minibatch_size {
            let _ = writeln!(s, "minibatch = {mb}");
        }
        let _ = writeln!(s, "delta_prime = {}", self.delta_prime);
        let _ = writeln!(s, "damping = {}", self.damping);
        let _ = writeln!(s, "\n[schedule]");
        match self.schedule {
            ScheduleConfig::Dynamic => {
                let _ = writeln!(s, "kind = dynamic");
            }
            ScheduleConfig::Fixed(ClipSchedule::Constant { delta }) => {
                let _ = writeln!(s, "kind = constant\ndelta = {delta}");
            }
            ScheduleConfig::Fixed(ClipSchedule::LengthDependent { alpha }) => {
                let _ = writeln!(s, "kind = length_dep\nalpha = {alpha}");
            }
            ScheduleConfig::Fixed(ClipSchedule::GammaDependent { alpha, beta, .. }) => {
                let _ = writeln!(s, "kind = gamma_dep\nalpha = {alpha}\nbeta = {beta}");
            }
        }
        let _ = writeln!(s, "\n[run]");
        let _ = writeln!(s, "gamma = {}", self.gamma);
        let _ = writeln!(s, "total_steps = {}", self.total_steps);
        let _ = writeln!(s, "batch_episodes = {}", self.batch_episodes);
        let seeds: Vec<String> = self.seeds.iter().map(u64::to_string).collect();
        let _ = writeln!(s, "seeds = {}", seeds.join(" "));
        let _ = writeln!(s, "equalize_by = {}", self.equalize_by);
        let _ = writeln!(s, "output_dir = {}", self.output_dir.display());
        s
    }
}

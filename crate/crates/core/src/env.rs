//! Small benchmark environments with observation-noise and alive-bonus knobs.

use alloc::vec;
use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use thiserror::Error;

use crate::pomdp::{PomdpSpec, SpecError, SpecParts};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EnvError {
    #[error("unknown environment `{0}` (expected two_door, noisy_chain or cliff_alive)")]
    UnknownBase(alloc::string::String),
    #[error("obs_noise {0} must lie in [0, 1)")]
    BadNoise(f64),
    #[error("alive-bonus scale {0} is not finite")]
    BadScale(f64),
    #[error(transparent)]
    Spec(#[from] SpecError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BaseEnv {
    /// Two exits, a noisy hint about which one is open.
    TwoDoor,
    /// Four-cell corridor with slippery moves and blurred position readings.
    NoisyChain,
    /// Staying near a cliff pays a survival bonus; advancing risks a fall.
    CliffAlive,
}

impl BaseEnv {
    pub const ALL: [BaseEnv; 3] = [BaseEnv::TwoDoor, BaseEnv::NoisyChain, BaseEnv::CliffAlive];

    pub fn name(self) -> &'static str {
        match self {
            BaseEnv::TwoDoor => "two_door",
            BaseEnv::NoisyChain => "noisy_chain",
            BaseEnv::CliffAlive => "cliff_alive",
        }
    }

    pub fn default_max_steps(self) -> usize {
        match self {
            BaseEnv::TwoDoor => 4,
            BaseEnv::NoisyChain => 20,
            BaseEnv::CliffAlive => 50,
        }
    }

    pub fn default_gamma(self) -> f64 {
        0.95
    }
}

impl fmt::Display for BaseEnv {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BaseEnv {
    type Err = EnvError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let key: alloc::string::String = s
            .chars()
            .filter(|c| *c != '_' && *c != '-')
            .map(|c| c.to_ascii_lowercase())
            .collect();
        match key.as_str() {
            "twodoor" => Ok(BaseEnv::TwoDoor),
            "noisychain" => Ok(BaseEnv::NoisyChain),
            "cliffalive" => Ok(BaseEnv::CliffAlive),
            _ => Err(EnvError::UnknownBase(s.into())),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EnvConfig {
    pub base: BaseEnv,
    pub obs_noise: f64,
    pub alive_bonus_scale_pos: f64,
    pub alive_bonus_scale_neg: f64,
    pub max_steps: usize,
}

impl EnvConfig {
    pub fn new(base: BaseEnv) -> Self {
        Self {
            base,
            obs_noise: 0.0,
            alive_bonus_scale_pos: 1.0,
            alive_bonus_scale_neg: 1.0,
            max_steps: base.default_max_steps(),
        }
    }
}

/// Reward table split into its additive parts, each laid out like
/// [`SpecParts::reward_mean`].
#[derive(Debug, Clone, PartialEq)]
pub struct RewardParts {
    pub base: Vec<f64>,
    pub alive_pos: Vec<f64>,
    pub alive_neg: Vec<f64>,
}

impl RewardParts {
    pub fn combine(&self, scale_pos: f64, scale_neg: f64) -> Vec<f64> {
        self.base
            .iter()
            .zip(&self.alive_pos)
            .zip(&self.alive_neg)
            .map(|((b, p), n)| b + scale_pos * p + scale_neg * n)
            .collect()
    }
}

struct Blueprint {
    parts: SpecParts,
    rewards: RewardParts,
}

/// Builds the environment, folding noise into O and scaling the alive bonus.
pub fn build_env(config: &EnvConfig) -> Result<PomdpSpec, EnvError> {
    if !(0.0..1.0).contains(&config.obs_noise) {
        return Err(EnvError::BadNoise(config.obs_noise));
    }
    for s in [config.alive_bonus_scale_pos, config.alive_bonus_scale_neg] {
        if !s.is_finite() {
            return Err(EnvError::BadScale(s));
        }
    }
    let Blueprint { mut parts, rewards } = blueprint(config.base);
    parts.observation = mix_observation_noise(&parts.observation, parts.num_obs, config.obs_noise);
    parts.reward_mean = rewards.combine(config.alive_bonus_scale_pos, config.alive_bonus_scale_neg);
    parts.max_steps = config.max_steps;
    Ok(PomdpSpec::new(parts)?)
}

/// The unscaled reward components of a base environment.
pub fn reward_parts(base: BaseEnv) -> RewardParts {
    blueprint(base).rewards
}

/// O'[y|x] = (1−ε)·O[y|x] + ε/n over non-terminal rows and columns.
/// `observation` is row-major with `num_obs` columns; the last row and column
/// are terminal and left alone.
pub fn mix_observation_noise(observation: &[f64], num_obs: usize, eps: f64) -> Vec<f64> {
    let mut out = observation.to_vec();
    if eps == 0.0 {
        return out;
    }
    let rows = observation.len() / num_obs;
    let live = num_obs - 1;
    for x in 0..rows - 1 {
        for y in 0..live {
            let i = x * num_obs + y;
            out[i] = (1.0 - eps) * observation[i] + eps / live as f64;
        }
    }
    out
}

/// One observation, one decision: action `a` ends the episode with reward `rewards[a]`.
pub fn one_step_bandit(rewards: &[f64]) -> PomdpSpec {
    let na = rewards.len();
    let mut t = Tables::new(2, 2, na);
    for a in 0..na {
        t.set_t(0, a, 1, 1.0);
    }
    t.set_o(0, 0, 1.0);
    let reward_mean = t.reward_table(|_, a, _| rewards[a]);
    PomdpSpec::new(SpecParts {
        num_latent: 2,
        num_obs: 2,
        num_actions: na,
        init: vec![1.0],
        transition: t.transition,
        observation: t.observation,
        reward_mean,
        reward_noise_std: 0.0,
        gamma: 1.0,
        max_steps: 1,
    })
    .expect("bandit spec is valid")
}

fn blueprint(base: BaseEnv) -> Blueprint {
    match base {
        BaseEnv::TwoDoor => two_door(),
        BaseEnv::NoisyChain => noisy_chain(),
        BaseEnv::CliffAlive => cliff_alive(),
    }
}

struct Tables {
    nx: usize,
    ny: usize,
    na: usize,
    transition: Vec<f64>,
    observation: Vec<f64>,
}

impl Tables {
    fn new(nx: usize, ny: usize, na: usize) -> Self {
        let mut t = Self {
            nx,
            ny,
            na,
            transition: vec![0.0; nx * na * nx],
            observation: vec![0.0; nx * ny],
        };
        for a in 0..na {
            t.set_t(nx - 1, a, nx - 1, 1.0);
        }
        t.set_o(nx - 1, ny - 1, 1.0);
        t
    }

    fn set_t(&mut self, x: usize, a: usize, next: usize, p: f64) {
        self.transition[(x * self.na + a) * self.nx + next] += p;
    }

    fn set_o(&mut self, x: usize, y: usize, p: f64) {
        self.observation[x * self.ny + y] = p;
    }

    fn reward_table(&self, f: impl Fn(usize, usize, usize) -> f64) -> Vec<f64> {
        let mut r = Vec::with_capacity(self.ny * self.na * self.ny);
        for y in 0..self.ny {
            for a in 0..self.na {
                for y2 in 0..self.ny {
                    r.push(f(y, a, y2));
                }
            }
        }
        r
    }

    fn finish(self, init: Vec<f64>, base: BaseEnv, rewards: RewardParts) -> Blueprint {
        Blueprint {
            parts: SpecParts {
                num_latent: self.nx,
                num_obs: self.ny,
                num_actions: self.na,
                init,
                transition: self.transition,
                observation: self.observation,
                reward_mean: rewards.combine(1.0, 1.0),
                reward_noise_std: 0.0,
                gamma: base.default_gamma(),
                max_steps: base.default_max_steps(),
            },
            rewards,
        }
    }
}

// x: 0 = left exit open, 1 = right exit open, 2 = T.
// y: 0 = hint-left, 1 = hint-right, 2 = T. a: 0 = push-left, 1 = push-right.
fn two_door() -> Blueprint {
    let mut t = Tables::new(3, 3, 2);
    for x in 0..2 {
        for a in 0..2 {
            if a == x {
                t.set_t(x, a, 2, 1.0);
            } else {
                t.set_t(x, a, x, 1.0);
            }
        }
        t.set_o(x, x, 0.75);
        t.set_o(x, 1 - x, 0.25);
    }
    let base = t.reward_table(|_, _, y2| if y2 == 2 { 1.0 } else { -0.1 });
    let zeros = vec![0.0; base.len()];
    let rewards = RewardParts {
        base,
        alive_pos: zeros.clone(),
        alive_neg: zeros,
    };
    t.finish(vec![0.5, 0.5], BaseEnv::TwoDoor, rewards)
}

// Cells 0..=3 then T; a: 0 = left, 1 = right, each slipping the other way w.p. 0.1.
fn noisy_chain() -> Blueprint {
    const CELLS: usize = 4;
    const SLIP: f64 = 0.1;
    let term = CELLS;
    let mut t = Tables::new(CELLS + 1, CELLS + 1, 2);
    let step = |x: usize, right: bool| -> usize {
        if right {
            if x + 1 == CELLS {
                term
            } else {
                x + 1
            }
        } else {
            x.saturating_sub(1)
        }
    };
    for x in 0..CELLS {
        for a in 0..2 {
            let intended = a == 1;
            t.set_t(x, a, step(x, intended), 1.0 - SLIP);
            t.set_t(x, a, step(x, !intended), SLIP);
        }
        let neighbours: Vec<usize> = [x.checked_sub(1), Some(x + 1).filter(|&n| n < CELLS)]
            .into_iter()
            .flatten()
            .collect();
        t.set_o(x, x, 0.7);
        for &n in &neighbours {
            t.set_o(x, n, 0.3 / neighbours.len() as f64);
        }
    }
    let base = t.reward_table(|_, _, y2| if y2 == term { 1.0 } else { -0.05 });
    let zeros = vec![0.0; base.len()];
    let rewards = RewardParts {
        base,
        alive_pos: zeros.clone(),
        alive_neg: zeros,
    };
    let mut init = vec![0.0; CELLS];
    init[0] = 1.0;
    t.finish(init, BaseEnv::NoisyChain, rewards)
}

// x: 0 = safe, 1 = edge, 2 = T (fallen). y: 0 = safe-view, 1 = edge-view, 2 = T.
// a: 0 = hold, 1 = advance.
fn cliff_alive() -> Blueprint {
    let mut t = Tables::new(3, 3, 2);
    t.set_t(0, 0, 0, 1.0);
    t.set_t(0, 1, 1, 0.7);
    t.set_t(0, 1, 0, 0.3);
    t.set_t(1, 0, 0, 0.6);
    t.set_t(1, 0, 1, 0.4);
    t.set_t(1, 1, 2, 0.3);
    t.set_t(1, 1, 1, 0.7);
    t.set_o(0, 0, 0.9);
    t.set_o(0, 1, 0.1);
    t.set_o(1, 0, 0.2);
    t.set_o(1, 1, 0.8);
    let base = t.reward_table(|_, a, y2| match (a, y2) {
        (_, 2) => -1.0,
        (1, _) => 0.5,
        _ => 0.0,
    });
    let alive_pos = t.reward_table(|_, _, y2| if y2 == 0 { 1.0 } else { 0.0 });
    let alive_neg = t.reward_table(|_, _, y2| if y2 == 1 { -0.5 } else { 0.0 });
    let rewards = RewardParts {
        base,
        alive_pos,
        alive_neg,
    };
    t.finish(vec![1.0, 0.0], BaseEnv::CliffAlive, rewards)
}

//! Finite episodic POMDPs and trajectory sampling.
//!
//! Index conventions: the terminal latent state is `num_latent - 1` and the
//! terminal observation is `num_obs - 1`. The terminal state is absorbing and
//! emits the terminal observation with probability one; no other state emits
//! it. Rewards are drawn from a kernel over `(y, a, y')`.
//!
//! # Sampling order
//!
//! All randomness comes from a `ChaCha8Rng` seeded with `seed_from_u64`.
//! Categorical draws consume one `f64` from the standard uniform distribution
//! and select the first index whose cumulative probability exceeds it. One
//! episode consumes, in order:
//!
//! 1. `x₁ ~ P₁`, `y₁ ~ O(·|x₁)`;
//! 2. per step: `a_h ~ π(·|y_h)`, `x_{h+1} ~ T(·|x_h, a_h)`,
//!    `y_{h+1} ~ O(·|x_{h+1})`, then, only when the reward noise is positive,
//!    one `StandardNormal` draw `z` with `r_h = R̄[y_h][a_h][y_{h+1}] + σ z`.
//!
//! The episode ends when `x_{h+1}` is terminal or `h` reaches `max_steps`.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use thiserror::Error;

use crate::policy::{PolicyError, PolicyParams};

const ROW_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SpecError {
    #[error("need at least {min} {what}, got {got}")]
    TooSmall {
        what: &'static str,
        min: usize,
        got: usize,
    },
    #[error("{table} has {got} entries, expected {expected}")]
    BadLength {
        table: &'static str,
        expected: usize,
        got: usize,
    },
    #[error("{table} row {row} sums to {sum}, not 1")]
    RowSum {
        table: &'static str,
        row: usize,
        sum: f64,
    },
    #[error("{table} entry {index} = {value} is not a probability")]
    BadProbability {
        table: &'static str,
        index: usize,
        value: f64,
    },
    #[error("terminal latent state is not absorbing under action {action}")]
    TerminalNotAbsorbing { action: usize },
    #[error("terminal latent state must emit the terminal observation with probability 1")]
    TerminalObservation,
    #[error("non-terminal latent state {latent} emits the terminal observation")]
    NonTerminalEmitsTerminal { latent: usize },
    #[error("reward table entry {index} is not finite")]
    NonFiniteReward { index: usize },
    #[error("reward noise std {0} must be finite and nonnegative")]
    BadNoise(f64),
    #[error("discount {0} outside [0, 1]")]
    BadGamma(f64),
    #[error("max_steps must be positive")]
    ZeroMaxSteps,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum SampleError {
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Raw tables of a POMDP, before validation.
///
/// Layouts: `init[x]` over non-terminal states, `transition[(x * A + a) * X + x']`,
/// `observation[x * Y + y]`, `reward_mean[(y * A + a) * Y + y']`.
#[derive(Debug, Clone, PartialEq)]
pub struct SpecParts {
    pub num_latent: usize,
    pub num_obs: usize,
    pub num_actions: usize,
    pub init: Vec<f64>,
    pub transition: Vec<f64>,
    pub observation: Vec<f64>,
    pub reward_mean: Vec<f64>,
    pub reward_noise_std: f64,
    pub gamma: f64,
    pub max_steps: usize,
}

/// A validated finite episodic POMDP. Immutable once built.
#[derive(Debug, Clone, PartialEq)]
pub struct PomdpSpec {
    parts: SpecParts,
}

impl PomdpSpec {
    pub fn new(parts: SpecParts) -> Result<Self, SpecError> {
        validate(&parts)?;
        Ok(Self { parts })
    }

    pub fn parts(&self) -> &SpecParts {
        &self.parts
    }

    pub fn into_parts(self) -> SpecParts {
        self.parts
    }

    pub fn num_latent(&self) -> usize {
        self.parts.num_latent
    }

    pub fn num_obs(&self) -> usize {
        self.parts.num_obs
    }

    pub fn num_actions(&self) -> usize {
        self.parts.num_actions
    }

    pub fn terminal_latent(&self) -> usize {
        self.parts.num_latent - 1
    }

    pub fn terminal_obs(&self) -> usize {
        self.parts.num_obs - 1
    }

    pub fn gamma(&self) -> f64 {
        self.parts.gamma
    }

    pub fn max_steps(&self) -> usize {
        self.parts.max_steps
    }

    pub fn reward_noise_std(&self) -> f64 {
        self.parts.reward_noise_std
    }

    /// Same model with a different discount.
    pub fn with_gamma(&self, gamma: f64) -> Result<Self, SpecError> {
        let mut parts = self.parts.clone();
        parts.gamma = gamma;
        Self::new(parts)
    }

    /// Same model with a different episode-length cap.
    pub fn with_max_steps(&self, max_steps: usize) -> Result<Self, SpecError> {
        let mut parts = self.parts.clone();
        parts.max_steps = max_steps;
        Self::new(parts)
    }

    /// P₁(x) for a non-terminal `x`.
    pub fn init(&self, x: usize) -> f64 {
        self.parts.init[x]
    }

    pub fn init_dist(&self) -> &[f64] {
        &self.parts.init
    }

    pub fn transition(&self, x: usize, a: usize, next: usize) -> f64 {
        let p = &self.parts;
        p.transition[(x * p.num_actions + a) * p.num_latent + next]
    }

    pub fn transition_row(&self, x: usize, a: usize) -> &[f64] {
        let p = &self.parts;
        let start = (x * p.num_actions + a) * p.num_latent;
        &p.transition[start..start + p.num_latent]
    }

    pub fn observation(&self, x: usize, y: usize) -> f64 {
        self.parts.observation[x * self.parts.num_obs + y]
    }

    pub fn observation_row(&self, x: usize) -> &[f64] {
        let n = self.parts.num_obs;
        &self.parts.observation[x * n..(x + 1) * n]
    }

    pub fn reward_mean(&self, y: usize, a: usize, next_obs: usize) -> f64 {
        let p = &self.parts;
        p.reward_mean[(y * p.num_actions + a) * p.num_obs + next_obs]
    }

    /// True when every non-terminal state can reach the terminal state with
    /// positive probability within `num_latent` steps.
    pub fn terminal_reachable(&self) -> bool {
        let n = self.num_latent();
        let term = self.terminal_latent();
        let mut reach = vec![false; n];
        reach[term] = true;
        for _ in 0..n {
            let mut changed = false;
            for x in 0..n {
                if reach[x] {
                    continue;
                }
                let hit = (0..self.num_actions())
                    .any(|a| (0..n).any(|x2| reach[x2] && self.transition(x, a, x2) > 0.0));
                if hit {
                    reach[x] = true;
                    changed = true;
                }
            }
            if !changed {
                break;
            }
        }
        reach.iter().all(|&r| r)
    }

    /// Draws one episode. Identical `(spec, policy, seed)` give identical trajectories.
    pub fn sample_episode(&self, policy: &PolicyParams, seed: u64) -> Result<Trajectory, SampleError> {
        policy.check_shape(self.num_obs(), self.num_actions())?;
        let probs = policy.prob_table();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let term = self.terminal_latent();

        let mut x = categorical(&mut rng, &self.parts.init);
        let mut y = categorical(&mut rng, self.observation_row(x));
        let mut events = Vec::new();
        loop {
            let a = categorical(&mut rng, probs.row(y));
            let x_next = categorical(&mut rng, self.transition_row(x, a));
            let y_next = categorical(&mut rng, self.observation_row(x_next));
            let mut reward = self.reward_mean(y, a, y_next);
            if self.parts.reward_noise_std > 0.0 {
                let z: f64 = StandardNormal.sample(&mut rng);
                reward += self.parts.reward_noise_std * z;
            }
            events.push(Event {
                latent: x,
                obs: y,
                action: a,
                reward,
            });
            let natural = x_next == term;
            if natural || events.len() >= self.parts.max_steps {
                return Ok(Trajectory {
                    events,
                    next_latent: x_next,
                    next_obs: y_next,
                    terminated_naturally: natural,
                });
            }
            x = x_next;
            y = y_next;
        }
    }
}

/// Draw an index from `probs` using one uniform variate.
pub(crate) fn categorical<R: Rng + ?Sized>(rng: &mut R, probs: &[f64]) -> usize {
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut last_positive = 0;
    for (i, &p) in probs.iter().enumerate() {
        if p > 0.0 {
            last_positive = i;
            acc += p;
            if u < acc {
                return i;
            }
        }
    }
    // u landed in the rounding gap above the cumulative sum.
    last_positive
}

/// One step `(x_h, y_h, a_h, r_h)` of an episode.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Event {
    pub latent: usize,
    pub obs: usize,
    pub action: usize,
    pub reward: f64,
}

/// A sampled episode.
///
/// `next_latent`/`next_obs` hold the successor drawn after the last event:
/// the terminal pair when the episode ended naturally, a live pair when it was
/// truncated at `max_steps`.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub events: Vec<Event>,
    pub next_latent: usize,
    pub next_obs: usize,
    pub terminated_naturally: bool,
}

/// Conditioning context `(y_{h−1}, a_{h−1})` of a step; the first step has none.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Context {
    Start,
    After { obs: usize, action: usize },
}

impl Context {
    /// Dense index in `0..=num_obs * num_actions`; `Start` maps to the last slot.
    pub fn index(self, num_obs: usize, num_actions: usize) -> usize {
        match self {
            Context::Start => num_obs * num_actions,
            Context::After { obs, action } => obs * num_actions + action,
        }
    }

    pub fn count(num_obs: usize, num_actions: usize) -> usize {
        num_obs * num_actions + 1
    }

    pub fn from_index(index: usize, num_obs: usize, num_actions: usize) -> Self {
        if index == num_obs * num_actions {
            Context::Start
        } else {
            Context::After {
                obs: index / num_actions,
                action: index % num_actions,
            }
        }
    }
}

impl Trajectory {
    /// Context of step `h` (0-based).
    pub fn context(&self, h: usize) -> Context {
        if h == 0 {
            Context::Start
        } else {
            let e = &self.events[h - 1];
            Context::After {
                obs: e.obs,
                action: e.action,
            }
        }
    }

    /// |τ|.
    pub fn len(&self) -> usize {
        self.events.len()
    }

    pub fn is_empty(&self) -> bool {
        self.events.is_empty()
    }

    /// Observation following step `h` (0-based).
    pub fn obs_after(&self, h: usize) -> usize {
        self.events.get(h + 1).map_or(self.next_obs, |e| e.obs)
    }

    pub fn undiscounted_return(&self) -> f64 {
        self.events.iter().map(|e| e.reward).sum()
    }
}

/// Σ_h γ^{h−1} r_h with the first reward undiscounted.
pub fn discounted_return(traj: &Trajectory, gamma: f64) -> f64 {
    discounted_sum(traj.events.iter().map(|e| e.reward), gamma)
}

pub(crate) fn discounted_sum<I: IntoIterator<Item = f64>>(rewards: I, gamma: f64) -> f64 {
    let mut w = 1.0;
    let mut total = 0.0;
    for r in rewards {
        total += w * r;
        w *= gamma;
    }
    total
}

fn check_row(table: &'static str, row: usize, values: &[f64], offset: usize) -> Result<(), SpecError> {
    for (i, &v) in values.iter().enumerate() {
        if !(0.0..=1.0).contains(&v) || !v.is_finite() {
            return Err(SpecError::BadProbability {
                table,
                index: offset + i,
                value: v,
            });
        }
    }
    let sum: f64 = values.iter().sum();
    if (sum - 1.0).abs() > ROW_TOL {
        return Err(SpecError::RowSum { table, row, sum });
    }
    Ok(())
}

fn validate(p: &SpecParts) -> Result<(), SpecError> {
    if p.num_latent < 2 {
        return Err(SpecError::TooSmall {
            what: "latent states (incl. terminal)",
            min: 2,
            got: p.num_latent,
        });
    }
    if p.num_obs < 2 {
        return Err(SpecError::TooSmall {
            what: "observations (incl. terminal)",
            min: 2,
            got: p.num_obs,
        });
    }
    if p.num_actions < 1 {
        return Err(SpecError::TooSmall {
            what: "actions",
            min: 1,
            got: 0,
        });
    }
    let (nx, ny, na) = (p.num_latent, p.num_obs, p.num_actions);
    let lens = [
        ("init", p.init.len(), nx - 1),
        ("transition", p.transition.len(), nx * na * nx),
        ("observation", p.observation.len(), nx * ny),
        ("reward", p.reward_mean.len(), ny * na * ny),
    ];
    for (table, got, expected) in lens {
        if got != expected {
            return Err(SpecError::BadLength { table, expected, got });
        }
    }
    check_row("init", 0, &p.init, 0)?;
    for row in 0..nx * na {
        check_row("transition", row, &p.transition[row * nx..(row + 1) * nx], row * nx)?;
    }
    for x in 0..nx {
        check_row("observation", x, &p.observation[x * ny..(x + 1) * ny], x * ny)?;
    }
    let term = nx - 1;
    for a in 0..na {
        if p.transition[(term * na + a) * nx + term] != 1.0 {
            return Err(SpecError::TerminalNotAbsorbing { action: a });
        }
    }
    if p.observation[term * ny + ny - 1] != 1.0 {
        return Err(SpecError::TerminalObservation);
    }
    for x in 0..term {
        if p.observation[x * ny + ny - 1] != 0.0 {
            return Err(SpecError::NonTerminalEmitsTerminal { latent: x });
        }
    }
    if let Some(index) = p.reward_mean.iter().position(|r| !r.is_finite()) {
        return Err(SpecError::NonFiniteReward { index });
    }
    if !(p.reward_noise_std.is_finite() && p.reward_noise_std >= 0.0) {
        return Err(SpecError::BadNoise(p.reward_noise_std));
    }
    if !(0.0..=1.0).contains(&p.gamma) {
        return Err(SpecError::BadGamma(p.gamma));
    }
    if p.max_steps == 0 {
        return Err(SpecError::ZeroMaxSteps);
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    /// One live state that loops onto itself with unit reward.
    fn self_loop(max_steps: usize) -> PomdpSpec {
        PomdpSpec::new(SpecParts {
            num_latent: 2,
            num_obs: 2,
            num_actions: 1,
            init: vec![1.0],
            transition: vec![1.0, 0.0, 0.0, 1.0],
            observation: vec![1.0, 0.0, 0.0, 1.0],
            reward_mean: vec![1.0; 4],
            reward_noise_std: 0.0,
            gamma: 1.0,
            max_steps,
        })
        .unwrap()
    }

    #[test]
    fn deterministic_loop_is_truncated() {
        let spec = self_loop(3);
        let pol = PolicyParams::uniform(2, 1);
        let t = spec.sample_episode(&pol, 7).unwrap();
        assert_eq!(t.len(), 3);
        assert!(!t.terminated_naturally);
        let rewards: Vec<f64> = t.events.iter().map(|e| e.reward).collect();
        assert_eq!(rewards, vec![1.0, 1.0, 1.0]);
        assert!(!spec.terminal_reachable());
    }

    #[test]
    fn forced_termination_gives_length_one() {
        let spec = PomdpSpec::new(SpecParts {
            num_latent: 2,
            num_obs: 2,
            num_actions: 2,
            init: vec![1.0],
            transition: vec![0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0],
            observation: vec![1.0, 0.0, 0.0, 1.0],
            reward_mean: vec![0.0; 8],
            reward_noise_std: 0.0,
            gamma: 0.9,
            max_steps: 10,
        })
        .unwrap();
        assert!(spec.terminal_reachable());
        let pol = PolicyParams::uniform(2, 2);
        for seed in 0..200 {
            let t = spec.sample_episode(&pol, seed).unwrap();
            assert_eq!(t.len(), 1);
            assert!(t.terminated_naturally);
            assert_eq!(t.next_obs, 1);
        }
    }

    #[test]
    fn discounted_return_examples() {
        let mk = |rs: &[f64]| Trajectory {
            events: rs
                .iter()
                .map(|&reward| Event {
                    latent: 0,
                    obs: 0,
                    action: 0,
                    reward,
                })
                .collect(),
            next_latent: 1,
            next_obs: 1,
            terminated_naturally: true,
        };
        assert_eq!(discounted_return(&mk(&[1.0, 1.0, 1.0]), 0.5), 1.75);
        assert_eq!(discounted_return(&mk(&[5.0]), 0.3), 5.0);
        assert_eq!(discounted_return(&mk(&[1.0, 2.0, 3.0]), 1.0), 6.0);
    }

    #[test]
    fn validation_errors() {
        let good = self_loop(3).into_parts();

        let mut p = good.clone();
        p.transition[0] = 0.9;
        assert!(matches!(PomdpSpec::new(p), Err(SpecError::RowSum { .. })));

        let mut p = good.clone();
        p.transition = vec![1.0, 0.0, 1.0, 0.0];
        assert!(matches!(PomdpSpec::new(p), Err(SpecError::TerminalNotAbsorbing { .. })));

        let mut p = good.clone();
        p.observation = vec![0.0, 1.0, 0.0, 1.0];
        assert!(matches!(PomdpSpec::new(p), Err(SpecError::NonTerminalEmitsTerminal { .. })));

        let mut p = good.clone();
        p.gamma = 1.5;
        assert!(matches!(PomdpSpec::new(p), Err(SpecError::BadGamma(_))));

        let mut p = good.clone();
        p.max_steps = 0;
        assert_eq!(PomdpSpec::new(p), Err(SpecError::ZeroMaxSteps));

        let mut p = good;
        p.init = vec![0.5, 0.5];
        assert!(matches!(PomdpSpec::new(p), Err(SpecError::BadLength { .. })));
    }

    #[test]
    fn policy_shape_checked_before_sampling() {
        let spec = self_loop(3);
        let pol = PolicyParams::uniform(3, 1);
        assert!(spec.sample_episode(&pol, 0).is_err());
    }
}

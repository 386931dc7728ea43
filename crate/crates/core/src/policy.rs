//! Tabular softmax memoryless policies π_θ(a|y).
//!
//! Every policy in this crate is a logit table θ[y][a]; action probabilities
//! are the row-wise softmax. The terminal observation keeps a row so that the
//! table shape is `num_obs × num_actions`, but that row is never consulted.

use alloc::vec::Vec;

use thiserror::Error;

use crate::pomdp::Trajectory;
use crate::table::{GradTable, ParamTable};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum PolicyError {
    #[error("observation {obs} out of range (num_obs = {num_obs})")]
    ObsOutOfRange { obs: usize, num_obs: usize },
    #[error("action {action} out of range (num_actions = {num_actions})")]
    ActionOutOfRange { action: usize, num_actions: usize },
    #[error("policy shape {got:?} does not match expected {expected:?}")]
    ShapeMismatch {
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("logit table contains a non-finite entry")]
    NonFinite,
}

/// Logits of a memoryless stochastic policy.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyParams {
    logits: ParamTable,
}

impl PolicyParams {
    /// The uniform policy (all logits zero).
    pub fn uniform(num_obs: usize, num_actions: usize) -> Self {
        Self {
            logits: ParamTable::zeros(num_obs, num_actions),
        }
    }

    pub fn from_table(logits: ParamTable) -> Result<Self, PolicyError> {
        if !logits.all_finite() {
            return Err(PolicyError::NonFinite);
        }
        Ok(Self { logits })
    }

    pub fn from_rows(num_obs: usize, num_actions: usize, data: Vec<f64>) -> Result<Self, PolicyError> {
        let got = (num_obs, data.len().checked_div(num_obs).unwrap_or(0));
        let table = ParamTable::from_vec(num_obs, num_actions, data).ok_or(PolicyError::ShapeMismatch {
            expected: (num_obs, num_actions),
            got,
        })?;
        Self::from_table(table)
    }

    pub fn num_obs(&self) -> usize {
        self.logits.rows()
    }

    pub fn num_actions(&self) -> usize {
        self.logits.cols()
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.num_obs(), self.num_actions())
    }

    pub fn logits(&self) -> &ParamTable {
        &self.logits
    }

    pub fn into_logits(self) -> ParamTable {
        self.logits
    }

    /// Returns a copy moved by `k * direction` in logit space.
    pub fn stepped(&self, direction: &[f64], k: f64) -> Self {
        let mut logits = self.logits.clone();
        for (t, d) in logits.as_mut_slice().iter_mut().zip(direction) {
            *t += k * d;
        }
        Self { logits }
    }

    pub fn check_shape(&self, num_obs: usize, num_actions: usize) -> Result<(), PolicyError> {
        if self.shape() != (num_obs, num_actions) {
            return Err(PolicyError::ShapeMismatch {
                expected: (num_obs, num_actions),
                got: self.shape(),
            });
        }
        Ok(())
    }

    fn check_obs(&self, obs: usize) -> Result<(), PolicyError> {
        if obs >= self.num_obs() {
            return Err(PolicyError::ObsOutOfRange {
                obs,
                num_obs: self.num_obs(),
            });
        }
        Ok(())
    }

    fn check_action(&self, action: usize) -> Result<(), PolicyError> {
        if action >= self.num_actions() {
            return Err(PolicyError::ActionOutOfRange {
                action,
                num_actions: self.num_actions(),
            });
        }
        Ok(())
    }

    /// π(·|y) computed with max-subtraction.
    pub fn action_probs(&self, obs: usize) -> Result<Vec<f64>, PolicyError> {
        self.check_obs(obs)?;
        let mut out = Vec::with_capacity(self.num_actions());
        softmax_into(self.logits.row(obs), &mut out);
        Ok(out)
    }

    /// log π(a|y).
    pub fn log_prob(&self, obs: usize, action: usize) -> Result<f64, PolicyError> {
        self.check_obs(obs)?;
        self.check_action(action)?;
        let row = self.logits.row(obs);
        Ok(row[action] - log_sum_exp(row))
    }

    /// Full table of log π(a|y), one row per observation.
    pub fn log_prob_table(&self) -> ParamTable {
        let mut out = self.logits.clone();
        for y in 0..out.rows() {
            let row = out.row_mut(y);
            let lse = log_sum_exp(row);
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        out
    }

    /// Full table of π(a|y).
    pub fn prob_table(&self) -> ParamTable {
        let mut out = self.log_prob_table();
        for v in out.as_mut_slice() {
            *v = libm::exp(*v);
        }
        out
    }

    /// ∂ log π(a|y) / ∂θ. Only row `obs` is non-zero: `1{a=b} − π(b|y)`.
    pub fn log_prob_grad(&self, obs: usize, action: usize) -> Result<GradTable, PolicyError> {
        self.check_obs(obs)?;
        self.check_action(action)?;
        let mut grad = ParamTable::zeros(self.num_obs(), self.num_actions());
        let probs = self.action_probs(obs)?;
        add_score(&mut grad, obs, action, &probs, 1.0);
        Ok(grad)
    }

    /// Σ_h ∂ log π(a_h|y_h) / ∂θ, the score of a whole trajectory.
    pub fn trajectory_score(&self, traj: &Trajectory) -> Result<GradTable, PolicyError> {
        let probs = self.prob_table();
        let mut grad = ParamTable::zeros(self.num_obs(), self.num_actions());
        for ev in &traj.events {
            self.check_obs(ev.obs)?;
            self.check_action(ev.action)?;
            add_score(&mut grad, ev.obs, ev.action, probs.row(ev.obs), 1.0);
        }
        Ok(grad)
    }
}

/// π_new(a|y) / π_old(a|y), evaluated as the exponential of a log difference.
pub fn policy_ratio(
    new: &PolicyParams,
    old: &PolicyParams,
    obs: usize,
    action: usize,
) -> Result<f64, PolicyError> {
    old.check_shape(new.num_obs(), new.num_actions())?;
    Ok(libm::exp(new.log_prob(obs, action)? - old.log_prob(obs, action)?))
}

/// `grad[obs][b] += weight * (1{b = action} − probs[b])`.
#[inline]
pub(crate) fn add_score(grad: &mut ParamTable, obs: usize, action: usize, probs: &[f64], weight: f64) {
    let row = grad.row_mut(obs);
    for (b, (g, p)) in row.iter_mut().zip(probs).enumerate() {
        let ind = if b == action { 1.0 } else { 0.0 };
        *g += weight * (ind - p);
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let s: f64 = row.iter().map(|v| libm::exp(v - max)).sum();
    max + libm::log(s)
}

fn softmax_into(row: &[f64], out: &mut Vec<f64>) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    out.clear();
    out.extend(row.iter().map(|v| libm::exp(v - max)));
    let s: f64 = out.iter().sum();
    for p in out.iter_mut() {
        *p /= s;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pomdp::{Event, Trajectory};
    use alloc::vec;
    use proptest::prelude::*;

    fn traj(steps: &[(usize, usize)]) -> Trajectory {
        Trajectory {
            events: steps
                .iter()
                .map(|&(obs, action)| Event {
                    latent: 0,
                    obs,
                    action,
                    reward: 0.0,
                })
                .collect(),
            next_latent: 0,
            next_obs: 0,
            terminated_naturally: true,
        }
    }

    #[test]
    fn uniform_two_actions() {
        let p = PolicyParams::uniform(1, 2);
        assert_eq!(p.action_probs(0).unwrap(), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_of_one_zero() {
        let p = PolicyParams::from_rows(1, 2, vec![1.0, 0.0]).unwrap();
        let probs = p.action_probs(0).unwrap();
        // e / (1 + e)
        assert!((probs[0] - 0.731_058_578_630_004_9).abs() < 1e-15);
        assert!((probs[1] - 0.268_941_421_369_995_1).abs() < 1e-15);
    }

    #[test]
    fn shift_invariance_and_large_logits() {
        for c in [-700.0, -3.5, 0.0, 42.0, 700.0] {
            let p = PolicyParams::from_rows(1, 2, vec![c, c]).unwrap();
            assert_eq!(p.action_probs(0).unwrap(), vec![0.5, 0.5]);
        }
        let p = PolicyParams::from_rows(1, 3, vec![700.0, -700.0, 699.0]).unwrap();
        let probs = p.action_probs(0).unwrap();
        assert!(probs.iter().all(|v| v.is_finite()));
        assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_range_errors() {
        let p = PolicyParams::uniform(2, 2);
        assert!(matches!(p.action_probs(2), Err(PolicyError::ObsOutOfRange { .. })));
        assert!(matches!(p.log_prob_grad(0, 5), Err(PolicyError::ActionOutOfRange { .. })));
        assert!(PolicyParams::from_rows(1, 2, vec![f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn log_prob_grad_uniform() {
        let p = PolicyParams::uniform(2, 2);
        let g = p.log_prob_grad(0, 0).unwrap();
        assert_eq!(g.row(0), &[0.5, -0.5]);
        assert_eq!(g.row(1), &[0.0, 0.0]);
    }

    #[test]
    fn log_prob_grad_saturated() {
        let p = PolicyParams::from_rows(1, 2, vec![20.0, -20.0]).unwrap();
        let g = p.log_prob_grad(0, 0).unwrap();
        assert!(g.max_abs() < 1e-8);
    }

    #[test]
    fn trajectory_score_is_additive() {
        let p = PolicyParams::uniform(2, 2);
        let single = p.log_prob_grad(0, 1).unwrap();
        assert_eq!(p.trajectory_score(&traj(&[(0, 1)])).unwrap(), single);
        let mut twice = single.clone();
        twice.scale(2.0);
        assert_eq!(p.trajectory_score(&traj(&[(0, 1), (0, 1)])).unwrap(), twice);
    }

    #[test]
    fn ratio_examples() {
        let old = PolicyParams::uniform(1, 2);
        assert_eq!(policy_ratio(&old, &old, 0, 1).unwrap(), 1.0);
        let shifted = PolicyParams::from_rows(1, 2, vec![3.25, 3.25]).unwrap();
        assert!((policy_ratio(&shifted, &old, 0, 0).unwrap() - 1.0).abs() < 1e-15);
        let new = PolicyParams::from_rows(1, 2, vec![1.0, 0.0]).unwrap();
        let r = policy_ratio(&new, &old, 0, 0).unwrap();
        assert!((r - 1.462_117_157_260_009_8).abs() < 1e-14);
    }

    fn logits_strategy(rows: usize, cols: usize) -> impl Strategy<Value = PolicyParams> {
        proptest::collection::vec(-6.0f64..6.0, rows * cols)
            .prop_map(move |v| PolicyParams::from_rows(rows, cols, v).unwrap())
    }

    proptest! {
        #[test]
        fn score_has_zero_mean(p in logits_strategy(3, 4), y in 0usize..3) {
            let probs = p.action_probs(y).unwrap();
            prop_assert!((probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let mut mean = ParamTable::zeros(3, 4);
            for (a, pa) in probs.iter().enumerate() {
                mean.add_scaled(&p.log_prob_grad(y, a).unwrap(), *pa);
            }
            prop_assert!(mean.max_abs() < 1e-15);
            let g = p.log_prob_grad(y, 0).unwrap();
            prop_assert!(g.row(y).iter().sum::<f64>().abs() < 1e-15);
        }

        #[test]
        fn ratio_round_trip(a in logits_strategy(2, 3), b in logits_strategy(2, 3), y in 0usize..2, act in 0usize..3) {
            let r1 = policy_ratio(&a, &b, y, act).unwrap();
            let r2 = policy_ratio(&b, &a, y, act).unwrap();
            prop_assert!((r1 * r2 - 1.0).abs() < 1e-12);
        }
    }
}

//! Monte Carlo estimators over sampled batches.

use alloc::vec;
use alloc::vec::Vec;

use thiserror::Error;

use crate::oracle::{prefix_weights, AdvantageKind, ConditionalTables, OracleError};
use crate::policy::{add_score, PolicyError, PolicyParams};
use crate::pomdp::{discounted_return, Context, PomdpSpec, SampleError, Trajectory};
use crate::table::GradTable;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum EstimationError {
    #[error("batch is empty")]
    EmptyBatch,
    #[error("advantages cover {got} episodes, batch has {expected}")]
    Misaligned { expected: usize, got: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// Episodes sampled under one policy.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub trajectories: Vec<Trajectory>,
    pub policy_used: PolicyParams,
    pub seed_base: u64,
    pub gamma: f64,
}

impl Batch {
    pub fn new(
        trajectories: Vec<Trajectory>,
        policy_used: PolicyParams,
        seed_base: u64,
        gamma: f64,
    ) -> Result<Self, EstimationError> {
        if trajectories.is_empty() {
            return Err(EstimationError::EmptyBatch);
        }
        let (ny, na) = policy_used.shape();
        for t in &trajectories {
            for e in &t.events {
                if e.obs >= ny {
                    return Err(PolicyError::ObsOutOfRange { obs: e.obs, num_obs: ny }.into());
                }
                if e.action >= na {
                    return Err(PolicyError::ActionOutOfRange {
                        action: e.action,
                        num_actions: na,
                    }
                    .into());
                }
            }
        }
        Ok(Self {
            trajectories,
            policy_used,
            seed_base,
            gamma,
        })
    }

    /// `m` episodes; episode `t` uses seed `seed_base + t` (wrapping).
    pub fn sample(spec: &PomdpSpec, policy: &PolicyParams, m: usize, seed_base: u64) -> Result<Self, EstimationError> {
        let trajectories = (0..m as u64)
            .map(|t| spec.sample_episode(policy, seed_base.wrapping_add(t)))
            .collect::<Result<Vec<_>, _>>()?;
        Self::new(trajectories, policy.clone(), seed_base, spec.gamma())
    }

    pub fn len(&self) -> usize {
        self.trajectories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trajectories.is_empty()
    }

    /// Σ_t |τ^t|.
    pub fn env_steps(&self) -> usize {
        self.trajectories.iter().map(Trajectory::len).sum()
    }

    pub fn mean_length(&self) -> f64 {
        self.env_steps() as f64 / self.len() as f64
    }

    pub fn mean_return(&self) -> f64 {
        self.trajectories.iter().map(Trajectory::undiscounted_return).sum::<f64>() / self.len() as f64
    }

    pub fn mean_discounted_return(&self) -> f64 {
        self.trajectories
            .iter()
            .map(|t| discounted_return(t, self.gamma))
            .sum::<f64>()
            / self.len() as f64
    }
}

/// Σ_{h'≥h} γ^{h'−h} r_{h'} for every step.
pub fn tail_returns(traj: &Trajectory, gamma: f64) -> Vec<f64> {
    let mut out = vec![0.0; traj.len()];
    let mut acc = 0.0;
    for (h, e) in traj.events.iter().enumerate().rev() {
        acc = e.reward + gamma * acc;
        out[h] = acc;
    }
    out
}

/// Per-coordinate mean and standard error of a sampled gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct GradientEstimate {
    pub mean: GradTable,
    pub std_error: GradTable,
}

/// (1/m) Σ_t ∇log f(τ^t) R(τ^t) with the realized discounted return.
pub fn mc_policy_gradient(batch: &Batch) -> Result<GradTable, EstimationError> {
    Ok(mc_policy_gradient_stats(batch)?.mean)
}

pub fn mc_policy_gradient_stats(batch: &Batch) -> Result<GradientEstimate, EstimationError> {
    let pol = &batch.policy_used;
    let probs = pol.prob_table();
    let (ny, na) = pol.shape();
    let m = batch.len() as f64;
    let mut sum = GradTable::zeros(ny, na);
    let mut sum_sq = GradTable::zeros(ny, na);
    let mut term = GradTable::zeros(ny, na);
    for t in &batch.trajectories {
        term.scale(0.0);
        let r = discounted_return(t, batch.gamma);
        for e in &t.events {
            add_score(&mut term, e.obs, e.action, probs.row(e.obs), r);
        }
        sum.add_scaled(&term, 1.0);
        for (s, v) in sum_sq.as_mut_slice().iter_mut().zip(term.as_slice()) {
            *s += v * v;
        }
    }
    let mut mean = sum;
    mean.scale(1.0 / m);
    let mut std_error = GradTable::zeros(ny, na);
    if batch.len() > 1 {
        for ((se, &mu), &sq) in std_error
            .as_mut_slice()
            .iter_mut()
            .zip(mean.as_slice())
            .zip(sum_sq.as_slice())
        {
            let var = ((sq - m * mu * mu) / (m - 1.0)).max(0.0);
            *se = libm::sqrt(var / m);
        }
    }
    Ok(GradientEstimate { mean, std_error })
}

/// What a fitted value table conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ValueContext {
    /// v[y].
    Observation,
    /// v[y][y⁻][a⁻], with a reserved start cell for the first step.
    ThreeObservation,
}

impl ValueContext {
    pub fn advantage_kind(self) -> AdvantageKind {
        match self {
            ValueContext::Observation => AdvantageKind::OneObservation,
            ValueContext::ThreeObservation => AdvantageKind::ThreeObservation,
        }
    }
}

/// Tabular regression of tail returns on observable context, pooled over steps.
#[derive(Debug, Clone, PartialEq)]
pub struct VTable {
    pub context: ValueContext,
    num_obs: usize,
    num_actions: usize,
    values: Vec<f64>,
    counts: Vec<u64>,
    sum_sq: Vec<f64>,
    pub default_value: f64,
}

impl VTable {
    fn cell(&self, y: usize, ctx: Context) -> usize {
        match self.context {
            ValueContext::Observation => y,
            ValueContext::ThreeObservation => y * Context::count(self.num_obs, self.num_actions) + ctx.index(self.num_obs, self.num_actions),
        }
    }

    /// Fitted value and whether the cell was unvisited (then the default is returned).
    pub fn value(&self, y: usize, ctx: Context) -> (f64, bool) {
        let i = self.cell(y, ctx);
        if self.counts[i] == 0 {
            (self.default_value, true)
        } else {
            (self.values[i], false)
        }
    }

    pub fn count(&self, y: usize, ctx: Context) -> u64 {
        self.counts[self.cell(y, ctx)]
    }

    /// Standard error of the cell mean; `None` below two visits.
    pub fn std_error(&self, y: usize, ctx: Context) -> Option<f64> {
        let i = self.cell(y, ctx);
        let n = self.counts[i] as f64;
        if self.counts[i] < 2 {
            return None;
        }
        let mu = self.values[i];
        let var = ((self.sum_sq[i] - n * mu * mu) / (n - 1.0)).max(0.0);
        Some(libm::sqrt(var / n))
    }
}

/// V(y, y⁻, a⁻) with the first step in the start cell.
pub fn fit_v_table(batch: &Batch, gamma: f64) -> VTable {
    fit_v_table_with(batch, gamma, ValueContext::ThreeObservation)
}

pub fn fit_v_table_with(batch: &Batch, gamma: f64, context: ValueContext) -> VTable {
    let (ny, na) = batch.policy_used.shape();
    let cells = match context {
        ValueContext::Observation => ny,
        ValueContext::ThreeObservation => ny * Context::count(ny, na),
    };
    let mut table = VTable {
        context,
        num_obs: ny,
        num_actions: na,
        values: vec![0.0; cells],
        counts: vec![0; cells],
        sum_sq: vec![0.0; cells],
        default_value: 0.0,
    };
    let mut total = 0.0;
    let mut n = 0u64;
    for t in &batch.trajectories {
        for (h, tail) in tail_returns(t, gamma).into_iter().enumerate() {
            let i = table.cell(t.events[h].obs, t.context(h));
            table.values[i] += tail;
            table.sum_sq[i] += tail * tail;
            table.counts[i] += 1;
            total += tail;
            n += 1;
        }
    }
    for (v, &c) in table.values.iter_mut().zip(&table.counts) {
        if c > 0 {
            *v /= c as f64;
        }
    }
    table.default_value = if n > 0 { total / n as f64 } else { 0.0 };
    table
}

/// Advantage estimates aligned with `batch.trajectories[t].events[h]`.
#[derive(Debug, Clone, PartialEq)]
pub struct PositionAdvantages {
    pub values: Vec<Vec<f64>>,
    /// Positions whose baseline came from an unvisited cell; updates skip them.
    pub flagged: Vec<Vec<bool>>,
    pub kind: AdvantageKind,
}

impl PositionAdvantages {
    pub fn zeros(batch: &Batch, kind: AdvantageKind) -> Self {
        Self {
            values: batch.trajectories.iter().map(|t| vec![0.0; t.len()]).collect(),
            flagged: batch.trajectories.iter().map(|t| vec![false; t.len()]).collect(),
            kind,
        }
    }

    /// Exact advantages from the oracle tables of the batch policy.
    pub fn from_oracle(batch: &Batch, tables: &ConditionalTables, kind: AdvantageKind) -> Result<Self, EstimationError> {
        let values = batch
            .trajectories
            .iter()
            .map(|t| tables.position_advantages(t, kind))
            .collect::<Result<Vec<_>, _>>()?;
        let flagged = values.iter().map(|v| vec![false; v.len()]).collect();
        Ok(Self { values, flagged, kind })
    }

    pub fn check_aligned(&self, batch: &Batch) -> Result<(), EstimationError> {
        let ok = self.values.len() == batch.len()
            && self.flagged.len() == batch.len()
            && batch
                .trajectories
                .iter()
                .zip(self.values.iter().zip(&self.flagged))
                .all(|(t, (v, f))| v.len() == t.len() && f.len() == t.len());
        if ok {
            Ok(())
        } else {
            Err(EstimationError::Misaligned {
                expected: batch.len(),
                got: self.values.len(),
            })
        }
    }

    pub fn flagged_count(&self) -> usize {
        self.flagged.iter().flatten().filter(|f| **f).count()
    }
}

/// Â_h = (sampled tail return from h) − v(context at h).
pub fn empirical_advantage(batch: &Batch, v: &VTable, gamma: f64) -> PositionAdvantages {
    let mut values = Vec::with_capacity(batch.len());
    let mut flagged = Vec::with_capacity(batch.len());
    for t in &batch.trajectories {
        let tails = tail_returns(t, gamma);
        let mut vals = Vec::with_capacity(t.len());
        let mut flags = Vec::with_capacity(t.len());
        for (h, tail) in tails.into_iter().enumerate() {
            let (base, unvisited) = v.value(t.events[h].obs, t.context(h));
            vals.push(tail - base);
            flags.push(unvisited);
        }
        values.push(vals);
        flagged.push(flags);
    }
    PositionAdvantages {
        values,
        flagged,
        kind: v.context.advantage_kind(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KlEstimator {
    /// (1/m) Σ_t Σ_h log(π_old/π_new): unbiased for the trajectory KL.
    Episodic,
    /// The same double sum over Σ_t |τ^t|: a per-step average.
    Trpo,
}

/// Per-episode Σ_h log(π_old(a_h|y_h)/π_new(a_h|y_h)).
pub fn episode_log_ratios(batch: &Batch, policy_new: &PolicyParams) -> Result<Vec<f64>, EstimationError> {
    let (ny, na) = batch.policy_used.shape();
    policy_new.check_shape(ny, na)?;
    let lo = batch.policy_used.log_prob_table();
    let ln = policy_new.log_prob_table();
    Ok(batch
        .trajectories
        .iter()
        .map(|t| t.events.iter().map(|e| lo.get(e.obs, e.action) - ln.get(e.obs, e.action)).sum())
        .collect())
}

pub fn empirical_kl(batch: &Batch, policy_new: &PolicyParams, variant: KlEstimator) -> Result<f64, EstimationError> {
    let total: f64 = episode_log_ratios(batch, policy_new)?.iter().sum();
    Ok(match variant {
        KlEstimator::Episodic => total / batch.len() as f64,
        KlEstimator::Trpo => total / batch.env_steps() as f64,
    })
}

/// (1/m) Σ_t Σ_{h=1}^{horizon} w_h Σ_{k≤min(h,|τ|)} log(π_old/π_new): the
/// prefix-weighted KL of old ‖ new, the order that old-policy samples estimate.
pub fn empirical_gamma_kl(batch: &Batch, policy_new: &PolicyParams, horizon: usize) -> Result<f64, EstimationError> {
    let (ny, na) = batch.policy_used.shape();
    policy_new.check_shape(ny, na)?;
    let lo = batch.policy_used.log_prob_table();
    let ln = policy_new.log_prob_table();
    let longest = batch.trajectories.iter().map(Trajectory::len).max().unwrap_or(0);
    let hz = horizon.max(longest);
    let (w, tail) = prefix_weights(batch.gamma, hz);
    let mut total = 0.0;
    for t in &batch.trajectories {
        let mut cum = 0.0;
        let mut acc = 0.0;
        for (k, e) in t.events.iter().enumerate() {
            cum += lo.get(e.obs, e.action) - ln.get(e.obs, e.action);
            acc += w[k + 1] * cum;
        }
        acc += tail[t.len()] * cum;
        total += acc;
    }
    Ok(total / batch.len() as f64)
}

/// All sampled divergences between the batch policy and a candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct DivergenceReport {
    pub kl_episodic: f64,
    pub kl_trpo: f64,
    pub d_gamma: f64,
    pub per_episode: Vec<f64>,
    pub mean_length: f64,
}

pub fn divergence_report(batch: &Batch, policy_new: &PolicyParams, horizon: usize) -> Result<DivergenceReport, EstimationError> {
    let per_episode = episode_log_ratios(batch, policy_new)?;
    let total: f64 = per_episode.iter().sum();
    Ok(DivergenceReport {
        kl_episodic: total / batch.len() as f64,
        kl_trpo: total / batch.env_steps() as f64,
        d_gamma: empirical_gamma_kl(batch, policy_new, horizon)?,
        per_episode,
        mean_length: batch.mean_length(),
    })
}

//! Exact quantities by full trajectory enumeration.
//!
//! Everything here is a weighted sum over a [`TrajectoryAtlas`]; nothing is
//! sampled. Step weights inside an episode use the 0-based factor `γ^h`,
//! i.e. the first reward is undiscounted.

mod atlas;
mod tables;

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::DMatrix;
use thiserror::Error;

use crate::policy::{add_score, PolicyError, PolicyParams};
use crate::table::GradTable;

pub use atlas::{AtlasEntry, AtlasStep, HistoryNode, TrajectoryAtlas, MAX_ATLAS_PATHS};
pub use tables::{
    averaged_advantage, epsilon_spans, improvement_under, surrogate_l, surrogate_l_averaged, AdvantageKind,
    ConditionalTables, EpsilonSpans,
};

/// Exponent offset of the prefix weight in F_γ and D_γ: the prefix of length
/// `h` (1-based) is weighted by `γ^(h − 1 + PREFIX_WEIGHT_ORIGIN)`. The value 1
/// reproduces the printed `γ^h`.
pub const PREFIX_WEIGHT_ORIGIN: i32 = 1;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum OracleError {
    #[error("probability mass still alive at horizon {horizon} (model mass {leaked_model_mass:e}); raise tau_max")]
    MassLeak { horizon: usize, leaked_model_mass: f64 },
    #[error("enumeration bound {bound:e} exceeds {limit:e}")]
    TooLarge { bound: f64, limit: f64 },
    #[error("horizon must be positive")]
    ZeroHorizon,
    #[error("{table} entry {index} has zero conditioning probability")]
    Undefined { table: &'static str, index: usize },
    #[error("trajectory of length {len} exceeds the table horizon {horizon}")]
    BeyondHorizon { len: usize, horizon: usize },
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Which divergence [`kl`] evaluates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum KlVariant {
    /// KL(f(·;θ) ‖ f(·;θ')) over whole trajectories.
    Trajectory,
    /// Σ_h γ^h KL(prefix_h under θ' ‖ prefix_h under θ), argument order as printed.
    Gamma,
}

/// Weight of the 1-based prefix length `h`.
pub fn prefix_weight(gamma: f64, h: usize) -> f64 {
    let e = h as i32 - 1 + PREFIX_WEIGHT_ORIGIN;
    libm::pow(gamma, e as f64)
}

/// `w[h]` for h in 1..=horizon (index 0 unused) and `tail[l] = Σ_{h>l} w[h]`.
pub fn prefix_weights(gamma: f64, horizon: usize) -> (Vec<f64>, Vec<f64>) {
    let mut w = vec![0.0; horizon + 1];
    for (h, slot) in w.iter_mut().enumerate().skip(1) {
        *slot = prefix_weight(gamma, h);
    }
    let mut tail = vec![0.0; horizon + 1];
    for l in (0..horizon).rev() {
        tail[l] = tail[l + 1] + w[l + 1];
    }
    (w, tail)
}

/// η(θ) = Σ_τ f(τ;θ) R(τ).
pub fn eta(atlas: &TrajectoryAtlas, policy: &PolicyParams) -> Result<f64, OracleError> {
    let w = atlas.weights(policy)?;
    Ok(w.iter().zip(atlas.returns()).map(|(f, r)| f * r).sum())
}

/// ∇η at `target` written as an expectation under `behaviour`:
/// Σ_τ f(τ;b) · f(τ;θ)/f(τ;b) · ∇log f(τ;θ) · R(τ).
pub fn grad_eta_importance(
    atlas: &TrajectoryAtlas,
    behaviour: &PolicyParams,
    target: &PolicyParams,
) -> Result<GradTable, OracleError> {
    let lb = atlas.policy_log_probs(behaviour)?;
    let lt = atlas.policy_log_probs(target)?;
    let probs = target.prob_table();
    let returns = atlas.returns();
    let mut grad = GradTable::zeros(target.num_obs(), target.num_actions());
    for (i, e) in atlas.entries().iter().enumerate() {
        let f_b = e.model_prob * libm::exp(lb[i]);
        let ratio = libm::exp(lt[i] - lb[i]);
        let w = f_b * ratio * returns[i];
        for s in atlas.steps(e) {
            add_score(&mut grad, s.obs, s.action, probs.row(s.obs), w);
        }
    }
    Ok(grad)
}

/// ∇η(θ) by the importance-sampling identity evaluated at θ' = θ.
pub fn grad_eta(atlas: &TrajectoryAtlas, policy: &PolicyParams) -> Result<GradTable, OracleError> {
    grad_eta_importance(atlas, policy, policy)
}

/// ∇η(θ) by differentiating Π_h π(a_h|y_h) with the product rule, without logs.
pub fn grad_eta_score_function(atlas: &TrajectoryAtlas, policy: &PolicyParams) -> Result<GradTable, OracleError> {
    atlas.check_policy(policy)?;
    let probs = policy.prob_table();
    let returns = atlas.returns();
    let (ny, na) = policy.shape();
    let mut grad = GradTable::zeros(ny, na);
    let mut prefix = Vec::new();
    let mut suffix = Vec::new();
    for (i, e) in atlas.entries().iter().enumerate() {
        let steps = atlas.steps(e);
        let l = steps.len();
        prefix.clear();
        prefix.push(1.0);
        for s in steps {
            let last = *prefix.last().unwrap();
            prefix.push(last * probs.get(s.obs, s.action));
        }
        suffix.clear();
        suffix.resize(l + 1, 1.0);
        for k in (0..l).rev() {
            suffix[k] = suffix[k + 1] * probs.get(steps[k].obs, steps[k].action);
        }
        let scale = e.model_prob * returns[i];
        for (k, s) in steps.iter().enumerate() {
            let others = prefix[k] * suffix[k + 1];
            let p_a = probs.get(s.obs, s.action);
            for b in 0..na {
                let indicator = if b == s.action { 1.0 } else { 0.0 };
                let d_pi = p_a * (indicator - probs.get(s.obs, b));
                grad.add_at(s.obs, b, scale * others * d_pi);
            }
        }
    }
    Ok(grad)
}

/// Fisher information of the trajectory law (`discounted = false`) or F_γ,
/// the prefix-weighted sum of prefix-law Fisher matrices. Indices follow the
/// row-major logit layout `y * |A| + a`.
pub fn fisher(atlas: &TrajectoryAtlas, policy: &PolicyParams, discounted: bool) -> Result<DMatrix<f64>, OracleError> {
    let w = atlas.weights(policy)?;
    let probs = policy.prob_table();
    let (ny, na) = policy.shape();
    let d = ny * na;
    let (pw, tail) = prefix_weights(atlas.gamma(), atlas.horizon());
    let mut out = DMatrix::zeros(d, d);
    let mut score = GradTable::zeros(ny, na);
    for (i, e) in atlas.entries().iter().enumerate() {
        score.scale(0.0);
        let steps = atlas.steps(e);
        for (k, s) in steps.iter().enumerate() {
            add_score(&mut score, s.obs, s.action, probs.row(s.obs), 1.0);
            if discounted {
                let mut weight = pw[k + 1];
                if k + 1 == steps.len() {
                    weight += tail[k + 1];
                }
                add_outer(&mut out, score.as_slice(), w[i] * weight);
            }
        }
        if !discounted {
            add_outer(&mut out, score.as_slice(), w[i]);
        }
    }
    Ok(out)
}

fn add_outer(m: &mut DMatrix<f64>, s: &[f64], w: f64) {
    if w == 0.0 {
        return;
    }
    for (r, &sr) in s.iter().enumerate() {
        if sr == 0.0 {
            continue;
        }
        for (c, &sc) in s.iter().enumerate() {
            m[(r, c)] += w * sr * sc;
        }
    }
}

/// Per-step log ratios log π_p(a_h|y_h) − log π_q(a_h|y_h), laid out like the atlas steps.
fn step_log_ratios(
    atlas: &TrajectoryAtlas,
    p: &PolicyParams,
    q: &PolicyParams,
) -> Result<Vec<Vec<f64>>, OracleError> {
    atlas.check_policy(p)?;
    atlas.check_policy(q)?;
    let lp = p.log_prob_table();
    let lq = q.log_prob_table();
    Ok(atlas
        .entries()
        .iter()
        .map(|e| {
            atlas
                .steps(e)
                .iter()
                .map(|s| lp.get(s.obs, s.action) - lq.get(s.obs, s.action))
                .collect()
        })
        .collect())
}

/// KL between the laws of the length-`h` prefixes, KL(P_p^h ‖ P_q^h).
/// A trajectory shorter than `h` is its own prefix; `h = 0` gives 0.
pub fn prefix_kl(atlas: &TrajectoryAtlas, p: &PolicyParams, q: &PolicyParams, h: usize) -> Result<f64, OracleError> {
    let fp = atlas.weights(p)?;
    let lr = step_log_ratios(atlas, p, q)?;
    Ok(fp
        .iter()
        .zip(&lr)
        .map(|(f, r)| f * r.iter().take(h).sum::<f64>())
        .sum())
}

/// Σ_{h=1}^{τmax} w_h KL(P_p^h ‖ P_q^h) with w_h from [`prefix_weight`].
pub fn discounted_prefix_kl(atlas: &TrajectoryAtlas, p: &PolicyParams, q: &PolicyParams) -> Result<f64, OracleError> {
    let fp = atlas.weights(p)?;
    let lr = step_log_ratios(atlas, p, q)?;
    let (w, tail) = prefix_weights(atlas.gamma(), atlas.horizon());
    let mut total = 0.0;
    for (f, r) in fp.iter().zip(&lr) {
        let mut cum = 0.0;
        let mut acc = 0.0;
        for (k, x) in r.iter().enumerate() {
            cum += x;
            acc += w[k + 1] * cum;
        }
        acc += tail[r.len()] * cum;
        total += f * acc;
    }
    Ok(total)
}

/// Trajectory KL(θ ‖ θ') or D_γ(θ, θ'), see [`KlVariant`].
pub fn kl(
    atlas: &TrajectoryAtlas,
    policy_from: &PolicyParams,
    policy_to: &PolicyParams,
    variant: KlVariant,
) -> Result<f64, OracleError> {
    match variant {
        KlVariant::Trajectory => prefix_kl(atlas, policy_from, policy_to, atlas.horizon()),
        KlVariant::Gamma => discounted_prefix_kl(atlas, policy_to, policy_from),
    }
}

/// Total variation between the length-`h` prefix laws.
pub fn prefix_tv(atlas: &TrajectoryAtlas, p: &PolicyParams, q: &PolicyParams, h: usize) -> Result<f64, OracleError> {
    let fq = atlas.weights(q)?;
    let lr = step_log_ratios(atlas, p, q)?;
    Ok(0.5
        * fq.iter()
            .zip(&lr)
            .map(|(f, r)| f * libm::fabs(libm::exp(r.iter().take(h).sum::<f64>()) - 1.0))
            .sum::<f64>())
}

/// Total variation between the trajectory laws.
pub fn tv(atlas: &TrajectoryAtlas, p: &PolicyParams, q: &PolicyParams) -> Result<f64, OracleError> {
    prefix_tv(atlas, p, q, atlas.horizon())
}

/// Every quantity entering the monotonic-improvement bounds for one
/// `(old, new)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct ImprovementBounds {
    pub eta_old: f64,
    pub eta_new: f64,
    pub surrogate: f64,
    pub spans: EpsilonSpans,
    /// Spans with the old policy in the action average.
    pub spans_same: EpsilonSpans,
    pub tv: f64,
    /// KL(new ‖ old) and KL(old ‖ new) over trajectories.
    pub kl_new_old: f64,
    pub kl_old_new: f64,
    /// D_γ in the printed order (prefix laws of new ‖ old) and the reverse.
    pub d_gamma: f64,
    pub d_gamma_reverse: f64,
    /// Σ_{k=1}^{τmax−1} γ^k TV_k, the sharpest prefix form.
    pub weighted_prefix_tv: f64,
    /// Σ_{k=1}^{τmax−1} γ^k; the D_γ bound follows from the prefix form when this is ≤ 2.
    pub prefix_weight_sum: f64,
}

impl ImprovementBounds {
    pub fn compute(atlas: &TrajectoryAtlas, old: &PolicyParams, new: &PolicyParams) -> Result<Self, OracleError> {
        let tables = ConditionalTables::compute(atlas, old)?;
        let g = atlas.gamma();
        let mut weighted_prefix_tv = 0.0;
        let mut prefix_weight_sum = 0.0;
        for k in 1..atlas.horizon() {
            let w = libm::pow(g, k as f64);
            weighted_prefix_tv += w * prefix_tv(atlas, new, old, k)?;
            prefix_weight_sum += w;
        }
        Ok(Self {
            eta_old: eta(atlas, old)?,
            eta_new: eta(atlas, new)?,
            surrogate: surrogate_l(atlas, &tables, new)?,
            spans: epsilon_spans(atlas, &tables, new)?,
            spans_same: epsilon_spans(atlas, &tables, old)?,
            tv: tv(atlas, new, old)?,
            kl_new_old: kl(atlas, new, old, KlVariant::Trajectory)?,
            kl_old_new: kl(atlas, old, new, KlVariant::Trajectory)?,
            d_gamma: kl(atlas, old, new, KlVariant::Gamma)?,
            d_gamma_reverse: discounted_prefix_kl(atlas, old, new)?,
            weighted_prefix_tv,
            prefix_weight_sum,
        })
    }

    /// η(new) − (L − penalty); nonnegative when the bound holds.
    pub fn slack(&self, penalty: f64) -> f64 {
        self.eta_new - (self.surrogate - penalty)
    }

    pub fn tv_penalty(&self) -> f64 {
        self.spans.epsilon * self.tv
    }

    /// ε·sqrt(½ KL) with KL(new ‖ old).
    pub fn kl_penalty(&self) -> f64 {
        self.spans.epsilon * libm::sqrt(0.5 * self.kl_new_old.max(0.0))
    }

    pub fn kl_penalty_reverse(&self) -> f64 {
        self.spans.epsilon * libm::sqrt(0.5 * self.kl_old_new.max(0.0))
    }

    pub fn prefix_tv_penalty(&self) -> f64 {
        self.spans.epsilon_prime * self.weighted_prefix_tv
    }

    pub fn d_gamma_penalty(&self) -> f64 {
        self.spans.epsilon_prime * libm::sqrt(self.d_gamma.max(0.0))
    }

    pub fn d_gamma_penalty_reverse(&self) -> f64 {
        self.spans.epsilon_prime * libm::sqrt(self.d_gamma_reverse.max(0.0))
    }
}

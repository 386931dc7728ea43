//! Policy improvement rules: clipped PPO objectives and GTRPO steps.

use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::estimation::{empirical_gamma_kl, empirical_kl, Batch, EstimationError, KlEstimator, PositionAdvantages};
use crate::oracle::{grad_eta, kl, surrogate_l, AdvantageKind, ConditionalTables, KlVariant, OracleError, TrajectoryAtlas};
use crate::policy::{add_score, PolicyError, PolicyParams};
use crate::table::{dot, GradTable};
use crate::trust_region::{
    conjugate_gradient, fisher_vector_product, FisherKind, FisherOperator, TrustRegionError, DEFAULT_CG_TOL,
    DEFAULT_DAMPING,
};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ClipError {
    #[error("alpha must exceed 1, got {0}")]
    Alpha(f64),
    #[error("beta must lie in (0, 1), got {0}")]
    Beta(f64),
    #[error("delta must lie in (0, 1), got {0}")]
    Delta(f64),
    #[error("gamma must lie in [0, 1], got {0}")]
    Gamma(f64),
    #[error("step {h} is outside an episode of length {tau_len}")]
    Position { tau_len: usize, h: usize },
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum UpdateError {
    #[error("objective mode {mode:?} needs {expected:?} advantages, got {got:?}")]
    ModeMismatch {
        mode: ObjectiveMode,
        expected: AdvantageKind,
        got: AdvantageKind,
    },
    #[error("learning rate must be positive and finite, got {0}")]
    LearningRate(f64),
    #[error("delta' must be positive, got {0}")]
    DeltaPrime(f64),
    #[error(transparent)]
    Clip(#[from] ClipError),
    #[error(transparent)]
    Estimation(#[from] EstimationError),
    #[error(transparent)]
    TrustRegion(#[from] TrustRegionError),
    #[error(transparent)]
    Oracle(#[from] OracleError),
    #[error(transparent)]
    Policy(#[from] PolicyError),
}

/// Per-sample bounds on the importance ratio.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ClipSchedule {
    /// (1 − δ, 1 + δ).
    Constant { delta: f64 },
    /// (α^{−1/|τ|}, α^{1/|τ|}).
    LengthDependent { alpha: f64 },
    /// (max{α^{−1/(|τ|γ^h)}, 1 − β}, min{α^{1/(|τ|γ^h)}, 1 + β}), `h` 1-based.
    GammaDependent { alpha: f64, beta: f64, gamma: f64 },
}

impl ClipSchedule {
    pub fn validate(&self) -> Result<(), ClipError> {
        let alpha_ok = |a: f64| if a > 1.0 && a.is_finite() { Ok(()) } else { Err(ClipError::Alpha(a)) };
        match *self {
            ClipSchedule::Constant { delta } => {
                if delta > 0.0 && delta < 1.0 {
                    Ok(())
                } else {
                    Err(ClipError::Delta(delta))
                }
            }
            ClipSchedule::LengthDependent { alpha } => alpha_ok(alpha),
            ClipSchedule::GammaDependent { alpha, beta, gamma } => {
                alpha_ok(alpha)?;
                if !(beta > 0.0 && beta < 1.0) {
                    return Err(ClipError::Beta(beta));
                }
                if !(0.0..=1.0).contains(&gamma) {
                    return Err(ClipError::Gamma(gamma));
                }
                Ok(())
            }
        }
    }

    /// Bounds for step `h` (1-based) of an episode of length `tau_len`.
    pub fn bounds(&self, tau_len: usize, h: usize) -> Result<(f64, f64), ClipError> {
        self.validate()?;
        if tau_len == 0 || h == 0 || h > tau_len {
            return Err(ClipError::Position { tau_len, h });
        }
        let len = tau_len as f64;
        Ok(match *self {
            ClipSchedule::Constant { delta } => (1.0 - delta, 1.0 + delta),
            ClipSchedule::LengthDependent { alpha } => {
                let e = 1.0 / len;
                (libm::pow(alpha, -e), libm::pow(alpha, e))
            }
            ClipSchedule::GammaDependent { alpha, beta, gamma } => {
                // γ = 0 makes the exponent infinite and leaves only the caps.
                let e = 1.0 / (len * libm::pow(gamma, h as f64));
                let lower = libm::pow(alpha, -e).max(1.0 - beta);
                let upper = libm::pow(alpha, e).min(1.0 + beta);
                (lower, upper)
            }
        })
    }
}

/// Free-function form of [`ClipSchedule::bounds`].
pub fn clip_bounds(sched: &ClipSchedule, tau_len: usize, h: usize) -> Result<(f64, f64), ClipError> {
    sched.bounds(tau_len, h)
}

/// δ = 0.1 for the first half of training, 0.05 afterwards.
pub fn dynamic_clip_schedule(progress: f64) -> ClipSchedule {
    ClipSchedule::Constant {
        delta: if progress < 0.5 { 0.1 } else { 0.05 },
    }
}

/// Which advantage a clipped objective expects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ObjectiveMode {
    /// Advantages with a current-observation baseline.
    Mdp,
    /// Three-observation advantages.
    Pomdp,
}

impl ObjectiveMode {
    pub fn advantage_kind(self) -> AdvantageKind {
        match self {
            ObjectiveMode::Mdp => AdvantageKind::OneObservation,
            ObjectiveMode::Pomdp => AdvantageKind::ThreeObservation,
        }
    }

    fn check(self, adv: &PositionAdvantages) -> Result<(), UpdateError> {
        if adv.kind == self.advantage_kind() {
            Ok(())
        } else {
            Err(UpdateError::ModeMismatch {
                mode: self,
                expected: self.advantage_kind(),
                got: adv.kind,
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PpoObjective {
    pub value: f64,
    pub positions: usize,
    pub skipped: usize,
    /// Fraction of positions whose ratio lies outside its bounds.
    pub clipped_fraction: f64,
}

fn usable_positions(batch: &Batch, adv: &PositionAdvantages) -> (Vec<(usize, usize)>, usize) {
    let mut out = Vec::new();
    let mut skipped = 0;
    for (t, flags) in adv.flagged.iter().enumerate() {
        for (h, &f) in flags.iter().enumerate() {
            if f || !adv.values[t][h].is_finite() {
                skipped += 1;
            } else {
                out.push((t, h));
            }
        }
    }
    debug_assert_eq!(out.len() + skipped, batch.env_steps());
    (out, skipped)
}

struct ClippedTerms {
    value: f64,
    clipped: usize,
}

/// Sums the clipped terms over `positions`; with `grad`, also adds the
/// gradient of each term (zero on the saturated branch).
fn clipped_terms(
    batch: &Batch,
    policy_new: &PolicyParams,
    adv: &PositionAdvantages,
    sched: &ClipSchedule,
    positions: &[(usize, usize)],
    mut grad: Option<&mut GradTable>,
) -> Result<ClippedTerms, UpdateError> {
    let lo = batch.policy_used.log_prob_table();
    let ln = policy_new.log_prob_table();
    let probs = policy_new.prob_table();
    let mut value = 0.0;
    let mut clipped = 0;
    for &(t, h) in positions {
        let traj = &batch.trajectories[t];
        let e = &traj.events[h];
        let a_hat = adv.values[t][h];
        let ratio = libm::exp(ln.get(e.obs, e.action) - lo.get(e.obs, e.action));
        let (lower, upper) = sched.bounds(traj.len(), h + 1)?;
        let clipped_ratio = ratio.clamp(lower, upper);
        if clipped_ratio != ratio {
            clipped += 1;
        }
        let raw = ratio * a_hat;
        let cap = clipped_ratio * a_hat;
        value += raw.min(cap);
        if let Some(g) = grad.as_deref_mut() {
            if raw <= cap {
                add_score(g, e.obs, e.action, probs.row(e.obs), raw);
            }
        }
    }
    Ok(ClippedTerms { value, clipped })
}

/// Mean over usable positions of min{ρÂ, clip(ρ; lower_h, upper_h)Â}.
pub fn ppo_objective(
    batch: &Batch,
    policy_new: &PolicyParams,
    adv: &PositionAdvantages,
    sched: &ClipSchedule,
    mode: ObjectiveMode,
) -> Result<PpoObjective, UpdateError> {
    mode.check(adv)?;
    adv.check_aligned(batch)?;
    let (ny, na) = batch.policy_used.shape();
    policy_new.check_shape(ny, na)?;
    let (positions, skipped) = usable_positions(batch, adv);
    let terms = clipped_terms(batch, policy_new, adv, sched, &positions, None)?;
    let n = positions.len();
    Ok(PpoObjective {
        value: if n > 0 { terms.value / n as f64 } else { 0.0 },
        positions: n,
        skipped,
        clipped_fraction: if n > 0 { terms.clipped as f64 / n as f64 } else { 0.0 },
    })
}

/// Gradient of [`ppo_objective`] with respect to the logits of `policy_new`.
pub fn ppo_gradient(
    batch: &Batch,
    policy_new: &PolicyParams,
    adv: &PositionAdvantages,
    sched: &ClipSchedule,
    mode: ObjectiveMode,
) -> Result<GradTable, UpdateError> {
    mode.check(adv)?;
    adv.check_aligned(batch)?;
    let (positions, _) = usable_positions(batch, adv);
    minibatch_gradient(batch, policy_new, adv, sched, &positions)
}

fn minibatch_gradient(
    batch: &Batch,
    policy_new: &PolicyParams,
    adv: &PositionAdvantages,
    sched: &ClipSchedule,
    positions: &[(usize, usize)],
) -> Result<GradTable, UpdateError> {
    let (ny, na) = policy_new.shape();
    let mut g = GradTable::zeros(ny, na);
    if positions.is_empty() {
        return Ok(g);
    }
    clipped_terms(batch, policy_new, adv, sched, positions, Some(&mut g))?;
    g.scale(1.0 / positions.len() as f64);
    Ok(g)
}

/// θ + lr·sign(g) coordinatewise, with sign(0) = 0.
pub fn sign_sgd_step(params: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
    params
        .iter()
        .zip(grad)
        .map(|(&p, &g)| {
            if g > 0.0 {
                p + lr
            } else if g < 0.0 {
                p - lr
            } else {
                p
            }
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum OptimizerKind {
    Sgd,
    SignSgd,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizerConfig {
    pub kind: OptimizerKind,
    pub lr: f64,
    pub epochs: usize,
    /// Positions per minibatch; `None` uses the whole batch.
    pub minibatch_size: Option<usize>,
}

impl OptimizerConfig {
    pub const DEFAULT_EPOCHS: usize = 4;

    pub fn sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            lr,
            epochs: Self::DEFAULT_EPOCHS,
            minibatch_size: None,
        }
    }

    pub fn sign_sgd(lr: f64) -> Self {
        Self {
            kind: OptimizerKind::SignSgd,
            ..Self::sgd(lr)
        }
    }
}

/// Outcome of one policy update.
#[derive(Debug, Clone, PartialEq)]
pub struct UpdateReport {
    pub objective_before: f64,
    pub objective_after: f64,
    /// Sampled (or, for the exact variant, exact) divergence of the returned policy.
    pub constraint_value: f64,
    pub accepted: bool,
    pub backtrack_count: usize,
    pub clipped_fraction: f64,
    /// The update produced a non-finite objective or divergence and was rolled back.
    pub diverged: bool,
    pub skipped_positions: usize,
    pub optimizer_steps: usize,
}

impl UpdateReport {
    fn unchanged(objective: f64, skipped: usize) -> Self {
        Self {
            objective_before: objective,
            objective_after: objective,
            constraint_value: 0.0,
            accepted: false,
            backtrack_count: 0,
            clipped_fraction: 0.0,
            diverged: false,
            skipped_positions: skipped,
            optimizer_steps: 0,
        }
    }
}

/// Ascends the clipped objective. Minibatch order in epoch `k` comes from a
/// ChaCha8 stream seeded with `batch.seed_base ^ k`.
pub fn ppo_update(
    batch: &Batch,
    policy: &PolicyParams,
    adv: &PositionAdvantages,
    sched: &ClipSchedule,
    mode: ObjectiveMode,
    opt: &OptimizerConfig,
) -> Result<(PolicyParams, UpdateReport), UpdateError> {
    if !(opt.lr > 0.0 && opt.lr.is_finite()) {
        return Err(UpdateError::LearningRate(opt.lr));
    }
    sched.validate()?;
    let before = ppo_objective(batch, policy, adv, sched, mode)?;
    let (positions, skipped) = usable_positions(batch, adv);
    let mb = opt.minibatch_size.unwrap_or(positions.len()).max(1);
    let mut theta = policy.clone();
    let mut steps = 0;
    let mut order = positions.clone();
    for epoch in 0..opt.epochs {
        order.copy_from_slice(&positions);
        let mut rng = ChaCha8Rng::seed_from_u64(batch.seed_base ^ epoch as u64);
        order.shuffle(&mut rng);
        for chunk in order.chunks(mb) {
            let g = minibatch_gradient(batch, &theta, adv, sched, chunk)?;
            let next = match opt.kind {
                OptimizerKind::Sgd => theta.stepped(g.as_slice(), opt.lr),
                OptimizerKind::SignSgd => {
                    let data = sign_sgd_step(theta.logits().as_slice(), g.as_slice(), opt.lr);
                    match PolicyParams::from_rows(theta.num_obs(), theta.num_actions(), data) {
                        Ok(p) => p,
                        Err(_) => return Ok((policy.clone(), diverged(before, skipped, steps))),
                    }
                }
            };
            if !next.logits().all_finite() {
                return Ok((policy.clone(), diverged(before, skipped, steps)));
            }
            theta = next;
            steps += 1;
        }
    }
    let after = ppo_objective(batch, &theta, adv, sched, mode)?;
    let constraint_value = empirical_kl(batch, &theta, KlEstimator::Episodic)?;
    // An infinite KL means some sampled action lost all its mass.
    if !after.value.is_finite() || !constraint_value.is_finite() {
        return Ok((policy.clone(), diverged(before, skipped, steps)));
    }
    Ok((
        theta,
        UpdateReport {
            objective_before: before.value,
            objective_after: after.value,
            constraint_value,
            accepted: true,
            backtrack_count: 0,
            clipped_fraction: after.clipped_fraction,
            diverged: false,
            skipped_positions: skipped,
            optimizer_steps: steps,
        },
    ))
}

fn diverged(before: PpoObjective, skipped: usize, steps: usize) -> UpdateReport {
    UpdateReport {
        diverged: true,
        optimizer_steps: steps,
        ..UpdateReport::unchanged(before.value, skipped)
    }
}

/// Divergence constraining a GTRPO step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum DivergenceKind {
    Trajectory,
    Gamma,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GtrpoOptions {
    pub damping: f64,
    pub cg_tol: f64,
    /// `None` means 10·dim.
    pub cg_max_iter: Option<usize>,
    pub max_backtracks: usize,
    pub shrink: f64,
    /// τmax for the discounted divergence and F_γ.
    pub horizon: usize,
}

impl GtrpoOptions {
    pub fn new(horizon: usize) -> Self {
        Self {
            damping: DEFAULT_DAMPING,
            cg_tol: DEFAULT_CG_TOL,
            cg_max_iter: None,
            max_backtracks: 10,
            shrink: 0.5,
            horizon,
        }
    }
}

/// (1/m) Σ_t Σ_h γ^h ρ_h Â_h over usable positions, ρ against the batch policy.
pub fn empirical_surrogate(batch: &Batch, policy_new: &PolicyParams, adv: &PositionAdvantages) -> Result<f64, UpdateError> {
    Ok(surrogate_and_gradient(batch, policy_new, adv, false)?.0)
}

fn surrogate_and_gradient(
    batch: &Batch,
    policy_new: &PolicyParams,
    adv: &PositionAdvantages,
    with_grad: bool,
) -> Result<(f64, GradTable), UpdateError> {
    adv.check_aligned(batch)?;
    let (ny, na) = batch.policy_used.shape();
    policy_new.check_shape(ny, na)?;
    let lo = batch.policy_used.log_prob_table();
    let ln = policy_new.log_prob_table();
    let probs = policy_new.prob_table();
    let mut g = GradTable::zeros(ny, na);
    let mut total = 0.0;
    for (t, traj) in batch.trajectories.iter().enumerate() {
        let mut disc = 1.0;
        for (h, e) in traj.events.iter().enumerate() {
            if !adv.flagged[t][h] && adv.values[t][h].is_finite() {
                let ratio = libm::exp(ln.get(e.obs, e.action) - lo.get(e.obs, e.action));
                let term = disc * ratio * adv.values[t][h];
                total += term;
                if with_grad {
                    add_score(&mut g, e.obs, e.action, probs.row(e.obs), term);
                }
            }
            disc *= batch.gamma;
        }
    }
    let m = batch.len() as f64;
    g.scale(1.0 / m);
    Ok((total / m, g))
}

fn sampled_divergence(batch: &Batch, new: &PolicyParams, kind: DivergenceKind, horizon: usize) -> Result<f64, UpdateError> {
    Ok(match kind {
        DivergenceKind::Trajectory => empirical_kl(batch, new, KlEstimator::Episodic)?,
        DivergenceKind::Gamma => empirical_gamma_kl(batch, new, horizon)?,
    })
}

/// Natural-gradient step scaled to ½dᵀFd = δ', then halved until the
/// objective improves and the divergence is within δ'.
fn line_search<S, D>(
    policy: &PolicyParams,
    step: &[f64],
    base: f64,
    delta_prime: f64,
    opts: &GtrpoOptions,
    mut surrogate: S,
    mut divergence: D,
) -> Result<(PolicyParams, UpdateReport), UpdateError>
where
    S: FnMut(&PolicyParams) -> Result<f64, UpdateError>,
    D: FnMut(&PolicyParams) -> Result<f64, UpdateError>,
{
    let mut k = 1.0;
    for tries in 0..=opts.max_backtracks {
        let cand = policy.stepped(step, k);
        if cand.logits().all_finite() {
            let obj = surrogate(&cand)?;
            let div = divergence(&cand)?;
            if obj.is_finite() && obj > base && div <= delta_prime {
                return Ok((
                    cand,
                    UpdateReport {
                        objective_before: base,
                        objective_after: obj,
                        constraint_value: div,
                        accepted: true,
                        backtrack_count: tries,
                        clipped_fraction: 0.0,
                        diverged: false,
                        skipped_positions: 0,
                        optimizer_steps: 1,
                    },
                ));
            }
        }
        k *= opts.shrink;
    }
    Ok((
        policy.clone(),
        UpdateReport {
            backtrack_count: opts.max_backtracks,
            ..UpdateReport::unchanged(base, 0)
        },
    ))
}

fn natural_direction<O: crate::trust_region::LinearOperator>(
    op: &O,
    g: &GradTable,
    delta_prime: f64,
    opts: &GtrpoOptions,
) -> Result<Option<Vec<f64>>, UpdateError> {
    if g.max_abs() == 0.0 {
        return Ok(None);
    }
    let d = conjugate_gradient(op, g.as_slice(), opts.cg_max_iter, opts.cg_tol)?.x;
    let fd = fisher_vector_product(op, &d)?;
    let quad = 0.5 * dot(&d, &fd);
    if !(quad > 0.0) {
        return Ok(None);
    }
    let scale = libm::sqrt(delta_prime / quad);
    Ok(Some(d.iter().map(|x| x * scale).collect()))
}

/// One GTRPO step from sampled data.
pub fn gtrpo_update(
    batch: &Batch,
    policy: &PolicyParams,
    adv: &PositionAdvantages,
    divergence: DivergenceKind,
    delta_prime: f64,
    opts: &GtrpoOptions,
) -> Result<(PolicyParams, UpdateReport), UpdateError> {
    if !(delta_prime > 0.0) {
        return Err(UpdateError::DeltaPrime(delta_prime));
    }
    let skipped = adv.flagged_count();
    let (base, g) = surrogate_and_gradient(batch, policy, adv, true)?;
    let kind = match divergence {
        DivergenceKind::Trajectory => FisherKind::Trajectory,
        DivergenceKind::Gamma => FisherKind::Discounted { horizon: opts.horizon },
    };
    let op = FisherOperator::from_batch(batch, kind, opts.damping)?;
    let Some(step) = natural_direction(&op, &g, delta_prime, opts)? else {
        return Ok((policy.clone(), UpdateReport::unchanged(base, skipped)));
    };
    let (p, mut report) = line_search(
        policy,
        &step,
        base,
        delta_prime,
        opts,
        |c| Ok(surrogate_and_gradient(batch, c, adv, false)?.0),
        |c| sampled_divergence(batch, c, divergence, opts.horizon),
    )?;
    report.skipped_positions = skipped;
    Ok((p, report))
}

/// One GTRPO step with the exact surrogate, Fisher and divergence.
pub fn gtrpo_update_exact(
    atlas: &TrajectoryAtlas,
    policy: &PolicyParams,
    divergence: DivergenceKind,
    delta_prime: f64,
    opts: &GtrpoOptions,
) -> Result<(PolicyParams, UpdateReport), UpdateError> {
    if !(delta_prime > 0.0) {
        return Err(UpdateError::DeltaPrime(delta_prime));
    }
    let tables = ConditionalTables::compute(atlas, policy)?;
    let base = surrogate_l(atlas, &tables, policy)?;
    // ∇L at π' = π equals ∇η.
    let g = grad_eta(atlas, policy)?;
    let op = FisherOperator::from_atlas(atlas, policy, divergence == DivergenceKind::Gamma, opts.damping)?;
    let Some(step) = natural_direction(&op, &g, delta_prime, opts)? else {
        return Ok((policy.clone(), UpdateReport::unchanged(base, 0)));
    };
    let variant = match divergence {
        DivergenceKind::Trajectory => KlVariant::Trajectory,
        DivergenceKind::Gamma => KlVariant::Gamma,
    };
    line_search(
        policy,
        &step,
        base,
        delta_prime,
        opts,
        |c| Ok(surrogate_l(atlas, &tables, c)?),
        |c| Ok(kl(atlas, policy, c, variant)?),
    )
}

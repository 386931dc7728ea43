//! Fisher-vector products, conjugate gradient and compatible function
//! approximation.

use alloc::vec;
use alloc::vec::Vec;

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::estimation::Batch;
use crate::oracle::{prefix_weights, OracleError, TrajectoryAtlas};
use crate::policy::{add_score, PolicyParams};
use crate::pomdp::discounted_return;
use crate::table::{dot, norm, GradTable};

pub const DEFAULT_DAMPING: f64 = 1e-3;
pub const DEFAULT_CG_TOL: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum TrustRegionError {
    #[error("vector has dimension {got}, operator has {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("negative weight {0}")]
    NegativeWeight(f64),
    #[error("conjugate gradient stopped after {iterations} iterations at relative residual {residual:e}")]
    NotConverged {
        best: Vec<f64>,
        residual: f64,
        iterations: usize,
    },
    #[error("batch has no trajectories")]
    EmptyBatch,
    #[error(transparent)]
    Oracle(#[from] OracleError),
}

/// A symmetric linear map on flat parameter vectors.
pub trait LinearOperator {
    fn dim(&self) -> usize;
    fn apply_into(&self, v: &[f64], out: &mut [f64]);
}

/// Which Fisher matrix a sampled operator approximates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FisherKind {
    /// Whole-trajectory scores, weight 1/m.
    Trajectory,
    /// Prefix scores weighted as in F_γ up to `horizon`; shorter episodes
    /// carry the remaining weight on their full score.
    Discounted { horizon: usize },
}

/// F = Σ_i w_i s_i s_iᵀ + λI, kept as the score list.
#[derive(Debug, Clone, PartialEq)]
pub struct FisherOperator {
    dim: usize,
    scores: Vec<f64>,
    weights: Vec<f64>,
    damping: f64,
}

impl FisherOperator {
    pub fn new(dim: usize, damping: f64) -> Self {
        Self {
            dim,
            scores: Vec::new(),
            weights: Vec::new(),
            damping,
        }
    }

    pub fn push(&mut self, score: &[f64], weight: f64) -> Result<(), TrustRegionError> {
        if score.len() != self.dim {
            return Err(TrustRegionError::Dimension {
                expected: self.dim,
                got: score.len(),
            });
        }
        if !(weight >= 0.0) {
            return Err(TrustRegionError::NegativeWeight(weight));
        }
        self.scores.extend_from_slice(score);
        self.weights.push(weight);
        Ok(())
    }

    /// Sampled Fisher of the batch policy.
    pub fn from_batch(batch: &Batch, kind: FisherKind, damping: f64) -> Result<Self, TrustRegionError> {
        if batch.is_empty() {
            return Err(TrustRegionError::EmptyBatch);
        }
        let pol = &batch.policy_used;
        let probs = pol.prob_table();
        let (ny, na) = pol.shape();
        let mut op = Self::new(ny * na, damping);
        let wm = 1.0 / batch.len() as f64;
        let mut s = GradTable::zeros(ny, na);
        match kind {
            FisherKind::Trajectory => {
                for t in &batch.trajectories {
                    s.scale(0.0);
                    for e in &t.events {
                        add_score(&mut s, e.obs, e.action, probs.row(e.obs), 1.0);
                    }
                    op.push(s.as_slice(), wm)?;
                }
            }
            FisherKind::Discounted { horizon } => {
                let longest = batch.trajectories.iter().map(|t| t.len()).max().unwrap_or(0);
                let (w, tail) = prefix_weights(batch.gamma, horizon.max(longest));
                for t in &batch.trajectories {
                    s.scale(0.0);
                    for (k, e) in t.events.iter().enumerate() {
                        add_score(&mut s, e.obs, e.action, probs.row(e.obs), 1.0);
                        let mut weight = w[k + 1];
                        if k + 1 == t.len() {
                            weight += tail[k + 1];
                        }
                        op.push(s.as_slice(), wm * weight)?;
                    }
                }
            }
        }
        Ok(op)
    }

    /// Exact Fisher (or F_γ) with atlas probabilities as weights.
    pub fn from_atlas(
        atlas: &TrajectoryAtlas,
        policy: &PolicyParams,
        discounted: bool,
        damping: f64,
    ) -> Result<Self, TrustRegionError> {
        let f = atlas.weights(policy)?;
        let probs = policy.prob_table();
        let (ny, na) = policy.shape();
        let (w, tail) = prefix_weights(atlas.gamma(), atlas.horizon());
        let mut op = Self::new(ny * na, damping);
        let mut s = GradTable::zeros(ny, na);
        for (e, fe) in atlas.entries().iter().zip(f) {
            s.scale(0.0);
            let steps = atlas.steps(e);
            for (k, st) in steps.iter().enumerate() {
                add_score(&mut s, st.obs, st.action, probs.row(st.obs), 1.0);
                if discounted {
                    let mut weight = w[k + 1];
                    if k + 1 == steps.len() {
                        weight += tail[k + 1];
                    }
                    op.push(s.as_slice(), fe * weight)?;
                }
            }
            if !discounted {
                op.push(s.as_slice(), fe)?;
            }
        }
        Ok(op)
    }

    pub fn damping(&self) -> f64 {
        self.damping
    }

    pub fn with_damping(mut self, damping: f64) -> Self {
        self.damping = damping;
        self
    }

    pub fn num_scores(&self) -> usize {
        self.weights.len()
    }

    /// Σ w s sᵀ + λI as a dense matrix.
    pub fn to_dense(&self) -> DMatrix<f64> {
        let d = self.dim;
        let mut m = DMatrix::identity(d, d) * self.damping;
        for (s, &w) in self.scores.chunks_exact(d).zip(&self.weights) {
            for r in 0..d {
                if s[r] == 0.0 {
                    continue;
                }
                for c in 0..d {
                    m[(r, c)] += w * s[r] * s[c];
                }
            }
        }
        m
    }
}

impl LinearOperator for FisherOperator {
    fn dim(&self) -> usize {
        self.dim
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        for (o, x) in out.iter_mut().zip(v) {
            *o = self.damping * x;
        }
        for (s, &w) in self.scores.chunks_exact(self.dim).zip(&self.weights) {
            let k = w * dot(s, v);
            if k != 0.0 {
                for (o, si) in out.iter_mut().zip(s) {
                    *o += k * si;
                }
            }
        }
    }
}

/// A dense symmetric matrix plus diagonal damping.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseOperator {
    pub matrix: DMatrix<f64>,
    pub damping: f64,
}

impl LinearOperator for DenseOperator {
    fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    fn apply_into(&self, v: &[f64], out: &mut [f64]) {
        let d = self.dim();
        for (r, o) in out.iter_mut().enumerate().take(d) {
            let mut acc = self.damping * v[r];
            for (c, x) in v.iter().enumerate() {
                acc += self.matrix[(r, c)] * x;
            }
            *o = acc;
        }
    }
}

fn check_dim<O: LinearOperator + ?Sized>(op: &O, v: &[f64]) -> Result<(), TrustRegionError> {
    if v.len() == op.dim() {
        Ok(())
    } else {
        Err(TrustRegionError::Dimension {
            expected: op.dim(),
            got: v.len(),
        })
    }
}

/// Σ_i w_i s_i (s_iᵀ v) + λv without forming the matrix.
pub fn fisher_vector_product<O: LinearOperator + ?Sized>(op: &O, v: &[f64]) -> Result<Vec<f64>, TrustRegionError> {
    check_dim(op, v)?;
    let mut out = vec![0.0; v.len()];
    op.apply_into(v, &mut out);
    Ok(out)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CgSolution {
    pub x: Vec<f64>,
    pub iterations: usize,
    /// ‖op(x) − g‖ / ‖g‖.
    pub residual: f64,
}

/// Solves op(x) = g. `max_iter = None` means 10·dim. Fails with the best
/// iterate when the relative residual never drops to `tol`.
pub fn conjugate_gradient<O: LinearOperator + ?Sized>(
    op: &O,
    g: &[f64],
    max_iter: Option<usize>,
    tol: f64,
) -> Result<CgSolution, TrustRegionError> {
    check_dim(op, g)?;
    let n = g.len();
    let max_iter = max_iter.unwrap_or(10 * n.max(1));
    let gn = norm(g);
    let mut x = vec![0.0; n];
    if gn == 0.0 {
        return Ok(CgSolution {
            x,
            iterations: 0,
            residual: 0.0,
        });
    }
    let mut r = g.to_vec();
    let mut p = r.clone();
    let mut ap = vec![0.0; n];
    let mut rr = dot(&r, &r);
    let mut best = (x.clone(), 1.0);
    for it in 1..=max_iter {
        op.apply_into(&p, &mut ap);
        let pap = dot(&p, &ap);
        if !(pap > 0.0) {
            break;
        }
        let alpha = rr / pap;
        for i in 0..n {
            x[i] += alpha * p[i];
            r[i] -= alpha * ap[i];
        }
        // Recompute the true residual so the reported value is honest.
        op.apply_into(&x, &mut ap);
        let true_res = norm(&g.iter().zip(&ap).map(|(a, b)| a - b).collect::<Vec<_>>()) / gn;
        if true_res < best.1 {
            best = (x.clone(), true_res);
        }
        if true_res <= tol {
            return Ok(CgSolution {
                x,
                iterations: it,
                residual: true_res,
            });
        }
        let rr_new = dot(&r, &r);
        let beta = rr_new / rr;
        rr = rr_new;
        for i in 0..n {
            p[i] = r[i] + beta * p[i];
        }
    }
    Err(TrustRegionError::NotConverged {
        best: best.0,
        residual: best.1,
        iterations: max_iter,
    })
}

/// ½ dᵀ op(d).
pub fn quadratic_constraint<O: LinearOperator + ?Sized>(op: &O, direction: &[f64]) -> Result<f64, TrustRegionError> {
    let fd = fisher_vector_product(op, direction)?;
    Ok(0.5 * dot(direction, &fd))
}

/// Least-squares fit of returns on trajectory scores.
#[derive(Debug, Clone, PartialEq)]
pub struct CompatibleFit {
    pub omega: Vec<f64>,
    /// The normal equations were singular and a small ridge was added.
    pub rank_deficient: bool,
}

/// Relative ridge used when the Gram matrix is singular.
const RIDGE: f64 = 1e-10;

/// argmin_ω Σ_i w_i (φ_iᵀω − R_i)² through the normal equations.
pub fn weighted_least_squares(features: &[Vec<f64>], weights: &[f64], targets: &[f64]) -> CompatibleFit {
    let d = features.first().map_or(0, Vec::len);
    let mut gram = DMatrix::<f64>::zeros(d, d);
    let mut rhs = DVector::<f64>::zeros(d);
    for ((phi, &w), &r) in features.iter().zip(weights).zip(targets) {
        for i in 0..d {
            if phi[i] == 0.0 {
                continue;
            }
            rhs[i] += w * phi[i] * r;
            for j in 0..d {
                gram[(i, j)] += w * phi[i] * phi[j];
            }
        }
    }
    let eig = gram.clone().symmetric_eigenvalues();
    let top = eig.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let low = eig.iter().fold(f64::INFINITY, |a, &b| a.min(b));
    if top == 0.0 {
        return CompatibleFit {
            omega: vec![0.0; d],
            rank_deficient: d > 0,
        };
    }
    let rank_deficient = low <= RIDGE * top;
    if rank_deficient {
        let scale = gram.trace() / d as f64;
        for i in 0..d {
            gram[(i, i)] += RIDGE * scale;
        }
    }
    let omega = match gram.clone().cholesky() {
        Some(ch) => ch.solve(&rhs),
        None => gram.lu().solve(&rhs).unwrap_or_else(|| DVector::zeros(d)),
    };
    CompatibleFit {
        omega: omega.iter().copied().collect(),
        rank_deficient,
    }
}

/// Compatible weights from sampled trajectories: features are trajectory
/// scores, targets realized discounted returns, weights 1/m.
pub fn compatible_weights(batch: &Batch) -> Result<CompatibleFit, TrustRegionError> {
    if batch.is_empty() {
        return Err(TrustRegionError::EmptyBatch);
    }
    let pol = &batch.policy_used;
    let probs = pol.prob_table();
    let (ny, na) = pol.shape();
    let mut features = Vec::with_capacity(batch.len());
    let mut targets = Vec::with_capacity(batch.len());
    for t in &batch.trajectories {
        let mut s = GradTable::zeros(ny, na);
        for e in &t.events {
            add_score(&mut s, e.obs, e.action, probs.row(e.obs), 1.0);
        }
        features.push(s.into_vec());
        targets.push(discounted_return(t, batch.gamma));
    }
    let weights = vec![1.0 / batch.len() as f64; batch.len()];
    Ok(weighted_least_squares(&features, &weights, &targets))
}

/// Compatible weights with exact atlas probabilities; solves F ω = ∇η on the score span.
pub fn compatible_weights_exact(atlas: &TrajectoryAtlas, policy: &PolicyParams) -> Result<CompatibleFit, TrustRegionError> {
    let weights = atlas.weights(policy)?;
    let probs = policy.prob_table();
    let (ny, na) = policy.shape();
    let features = atlas
        .entries()
        .iter()
        .map(|e| {
            let mut s = GradTable::zeros(ny, na);
            for st in atlas.steps(e) {
                add_score(&mut s, st.obs, st.action, probs.row(st.obs), 1.0);
            }
            s.into_vec()
        })
        .collect::<Vec<_>>();
    Ok(weighted_least_squares(&features, &weights, &atlas.returns()))
}

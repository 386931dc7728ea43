use alloc::vec;
use alloc::vec::Vec;

use crate::policy::PolicyParams;
use crate::pomdp::{Context, Trajectory};

use super::{eta, OracleError, TrajectoryAtlas};

/// Which advantage a per-position estimate stands for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum AdvantageKind {
    /// Q(y_{h+1}, a_h, y_h, h) − V(y_h, h): the baseline sees the current observation only.
    OneObservation,
    /// Q(y_{h+1}, a_h, y_h, h) − V(y_h, h, y_{h−1}, a_{h−1}).
    ThreeObservation,
}

/// Exact conditional values of one policy.
///
/// All values are expectations of the tail return Σ_{h'≥h} γ^{h'−h} r_{h'}
/// (0-based `h`), conditioned on the listed observable quantities. Cells whose
/// conditioning event has probability zero are undefined and every getter
/// refuses to read them.
#[derive(Debug, Clone)]
pub struct ConditionalTables {
    policy: PolicyParams,
    gamma: f64,
    horizon: usize,
    ny: usize,
    na: usize,
    nc: usize,
    // [h][y][c]
    v: Vec<f64>,
    v_mass: Vec<f64>,
    // [h][y]
    v1: Vec<f64>,
    v1_mass: Vec<f64>,
    // [h][y⁺][a][y]
    q: Vec<f64>,
    q_mass: Vec<f64>,
    // [h][y⁺][a][y][c]
    adv: Vec<f64>,
    adv_mass: Vec<f64>,
    // h-pooled: [y][c] and [y][c][a]
    pooled_v: Vec<f64>,
    pooled_v_mass: Vec<f64>,
    pooled_q: Vec<f64>,
    pooled_q_mass: Vec<f64>,
    pooled_v1: Vec<f64>,
    pooled_v1_mass: Vec<f64>,
}

fn finish(sum: &mut [f64], mass: &[f64]) {
    for (s, &m) in sum.iter_mut().zip(mass) {
        *s = if m > 0.0 { *s / m } else { f64::NAN };
    }
}

impl ConditionalTables {
    pub fn compute(atlas: &TrajectoryAtlas, policy: &PolicyParams) -> Result<Self, OracleError> {
        let w = atlas.weights(policy)?;
        let spec = atlas.spec();
        let (ny, na) = (spec.num_obs(), spec.num_actions());
        let nc = Context::count(ny, na);
        let hz = atlas.horizon();
        let g = atlas.gamma();
        let mut t = Self {
            policy: policy.clone(),
            gamma: g,
            horizon: hz,
            ny,
            na,
            nc,
            v: vec![0.0; hz * ny * nc],
            v_mass: vec![0.0; hz * ny * nc],
            v1: vec![0.0; hz * ny],
            v1_mass: vec![0.0; hz * ny],
            q: vec![0.0; hz * ny * na * ny],
            q_mass: vec![0.0; hz * ny * na * ny],
            adv: vec![0.0; hz * ny * na * ny * nc],
            adv_mass: vec![0.0; hz * ny * na * ny * nc],
            pooled_v: vec![0.0; ny * nc],
            pooled_v_mass: vec![0.0; ny * nc],
            pooled_q: vec![0.0; ny * nc * na],
            pooled_q_mass: vec![0.0; ny * nc * na],
            pooled_v1: vec![0.0; ny],
            pooled_v1_mass: vec![0.0; ny],
        };
        let mut tails = Vec::new();
        for (e, &f) in atlas.entries().iter().zip(&w) {
            let steps = atlas.steps(e);
            tails.clear();
            tails.resize(steps.len() + 1, 0.0);
            for k in (0..steps.len()).rev() {
                tails[k] = steps[k].mean_reward + g * tails[k + 1];
            }
            for (h, s) in steps.iter().enumerate() {
                let c = atlas.nodes()[s.node].context.index(ny, na);
                let tail = tails[h];
                let iv = t.v_index(h, s.obs, c);
                t.v[iv] += f * tail;
                t.v_mass[iv] += f;
                let i1 = h * ny + s.obs;
                t.v1[i1] += f * tail;
                t.v1_mass[i1] += f;
                let iq = t.q_index(h, s.next_obs, s.action, s.obs);
                t.q[iq] += f * tail;
                t.q_mass[iq] += f;
                let ia = iq * nc + c;
                t.adv_mass[ia] += f;
                let ip = s.obs * nc + c;
                t.pooled_v[ip] += f * tail;
                t.pooled_v_mass[ip] += f;
                t.pooled_q[ip * na + s.action] += f * tail;
                t.pooled_q_mass[ip * na + s.action] += f;
                t.pooled_v1[s.obs] += f * tail;
                t.pooled_v1_mass[s.obs] += f;
            }
        }
        finish(&mut t.v, &t.v_mass);
        finish(&mut t.v1, &t.v1_mass);
        finish(&mut t.q, &t.q_mass);
        finish(&mut t.pooled_v, &t.pooled_v_mass);
        finish(&mut t.pooled_q, &t.pooled_q_mass);
        finish(&mut t.pooled_v1, &t.pooled_v1_mass);
        for ia in 0..t.adv.len() {
            t.adv[ia] = if t.adv_mass[ia] > 0.0 {
                let iq = ia / nc;
                let c = ia % nc;
                // iq = ((h*ny + y⁺)*na + a)*ny + y
                let y = iq % ny;
                let h = iq / (ny * na * ny);
                t.q[iq] - t.v[t.v_index(h, y, c)]
            } else {
                f64::NAN
            };
        }
        Ok(t)
    }

    fn v_index(&self, h: usize, y: usize, c: usize) -> usize {
        (h * self.ny + y) * self.nc + c
    }

    fn q_index(&self, h: usize, y_next: usize, a: usize, y: usize) -> usize {
        ((h * self.ny + y_next) * self.na + a) * self.ny + y
    }

    fn read(table: &'static str, values: &[f64], mass: &[f64], index: usize) -> Result<f64, OracleError> {
        match mass.get(index) {
            Some(&m) if m > 0.0 => Ok(values[index]),
            _ => Err(OracleError::Undefined { table, index }),
        }
    }

    /// Policy the tables were computed for.
    pub fn policy(&self) -> &PolicyParams {
        &self.policy
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.gamma
    }

    /// V(y_h, h, y_{h−1}, a_{h−1}); `Context::Start` at h = 0.
    pub fn v(&self, h: usize, y: usize, ctx: Context) -> Result<f64, OracleError> {
        let i = self.v_index(h, y, ctx.index(self.ny, self.na));
        Self::read("V", &self.v, &self.v_mass, i)
    }

    pub fn v_defined(&self, h: usize, y: usize, ctx: Context) -> bool {
        self.v(h, y, ctx).is_ok()
    }

    /// Probability that step `h` exists with observation `y` and context `ctx`.
    pub fn v_mass(&self, h: usize, y: usize, ctx: Context) -> f64 {
        self.v_mass[self.v_index(h, y, ctx.index(self.ny, self.na))]
    }

    /// V(y_h, h) conditioned on the current observation only.
    pub fn v1(&self, h: usize, y: usize) -> Result<f64, OracleError> {
        Self::read("V1", &self.v1, &self.v1_mass, h * self.ny + y)
    }

    /// Q(y_{h+1}, a_h, y_h, h).
    pub fn q(&self, h: usize, y_next: usize, a: usize, y: usize) -> Result<f64, OracleError> {
        let i = self.q_index(h, y_next, a, y);
        Self::read("Q", &self.q, &self.q_mass, i)
    }

    /// A(y_{h+1}, a_h, y_h, h, y_{h−1}, a_{h−1}) = Q − V.
    pub fn advantage(&self, h: usize, y_next: usize, a: usize, y: usize, ctx: Context) -> Result<f64, OracleError> {
        let i = self.q_index(h, y_next, a, y) * self.nc + ctx.index(self.ny, self.na);
        Self::read("A", &self.adv, &self.adv_mass, i)
    }

    /// Probability of the joint context `(h, y⁺, a, y, ctx)`.
    pub fn advantage_mass(&self, h: usize, y_next: usize, a: usize, y: usize, ctx: Context) -> f64 {
        self.adv_mass[self.q_index(h, y_next, a, y) * self.nc + ctx.index(self.ny, self.na)]
    }

    /// Q(y⁺, a, y, h) − V(y, h): the advantage with a one-observation baseline.
    pub fn advantage_one_obs(&self, h: usize, y_next: usize, a: usize, y: usize) -> Result<f64, OracleError> {
        Ok(self.q(h, y_next, a, y)? - self.v1(h, y)?)
    }

    /// E[tail | y, ctx] pooled over steps, the target of an h-free value fit.
    pub fn pooled_v(&self, y: usize, ctx: Context) -> Result<f64, OracleError> {
        let i = y * self.nc + ctx.index(self.ny, self.na);
        Self::read("pooled V", &self.pooled_v, &self.pooled_v_mass, i)
    }

    /// E[tail | y, ctx, a] pooled over steps.
    pub fn pooled_q(&self, y: usize, ctx: Context, a: usize) -> Result<f64, OracleError> {
        let i = (y * self.nc + ctx.index(self.ny, self.na)) * self.na + a;
        Self::read("pooled Q", &self.pooled_q, &self.pooled_q_mass, i)
    }

    /// E[tail | y] pooled over steps and contexts.
    pub fn pooled_v1(&self, y: usize) -> Result<f64, OracleError> {
        Self::read("pooled V1", &self.pooled_v1, &self.pooled_v1_mass, y)
    }

    /// Exact advantage at every step of `traj`.
    pub fn position_advantages(&self, traj: &Trajectory, kind: AdvantageKind) -> Result<Vec<f64>, OracleError> {
        if traj.len() > self.horizon {
            return Err(OracleError::BeyondHorizon {
                len: traj.len(),
                horizon: self.horizon,
            });
        }
        traj.events
            .iter()
            .enumerate()
            .map(|(h, e)| {
                let y_next = traj.obs_after(h);
                match kind {
                    AdvantageKind::ThreeObservation => self.advantage(h, y_next, e.action, e.obs, traj.context(h)),
                    AdvantageKind::OneObservation => self.advantage_one_obs(h, y_next, e.action, e.obs),
                }
            })
            .collect()
    }
}

/// Σ_τ f(τ; eval) Σ_h γ^h A_π(step h), the right-hand side of the
/// improvement identity when `eval` is the new policy.
pub fn improvement_under(
    atlas: &TrajectoryAtlas,
    tables: &ConditionalTables,
    eval: &PolicyParams,
) -> Result<f64, OracleError> {
    let w = atlas.weights(eval)?;
    let g = tables.gamma;
    let mut total = 0.0;
    for (e, f) in atlas.entries().iter().zip(w) {
        let mut disc = 1.0;
        let mut acc = 0.0;
        for s in atlas.steps(e) {
            let ctx = atlas.nodes()[s.node].context;
            acc += disc * tables.advantage(atlas.nodes()[s.node].depth, s.next_obs, s.action, s.obs, ctx)?;
            disc *= g;
        }
        total += f * acc;
    }
    Ok(total)
}

/// L_π(π') = η(π) + Σ_τ f(τ;π) Σ_h γ^h (π'/π)(a_h|y_h) A_π(step h).
pub fn surrogate_l(atlas: &TrajectoryAtlas, tables: &ConditionalTables, new: &PolicyParams) -> Result<f64, OracleError> {
    let old = &tables.policy;
    let w = atlas.weights(old)?;
    atlas.check_policy(new)?;
    let lo = old.log_prob_table();
    let ln = new.log_prob_table();
    let g = tables.gamma;
    let mut total = 0.0;
    for (e, f) in atlas.entries().iter().zip(w) {
        let mut disc = 1.0;
        let mut acc = 0.0;
        for (h, s) in atlas.steps(e).iter().enumerate() {
            let ratio = libm::exp(ln.get(s.obs, s.action) - lo.get(s.obs, s.action));
            let ctx = atlas.nodes()[s.node].context;
            acc += disc * ratio * tables.advantage(h, s.next_obs, s.action, s.obs, ctx)?;
            disc *= g;
        }
        total += f * acc;
    }
    Ok(eta(atlas, old)? + total)
}

/// Ā over observable histories: for each trie node that is a decision point,
/// E_{a∼π'(·|y_h)} E[A_π(y_{h+1}, a, y_h, h, y_{h−1}, a_{h−1}) | history, a].
/// Non-decision nodes hold `None`.
pub fn averaged_advantage(
    atlas: &TrajectoryAtlas,
    tables: &ConditionalTables,
    new: &PolicyParams,
) -> Result<Vec<Option<f64>>, OracleError> {
    atlas.check_policy(new)?;
    let probs = new.prob_table();
    let (ny, na) = (atlas.spec().num_obs(), atlas.spec().num_actions());
    let mut out = vec![None; atlas.nodes().len()];
    for (id, node) in atlas.nodes().iter().enumerate() {
        if !atlas.is_position(id) || node.model_mass <= 0.0 {
            continue;
        }
        let mut acc = 0.0;
        for a in 0..na {
            let mut inner = 0.0;
            for y2 in 0..ny {
                if let Some(child) = atlas.child(id, a, y2) {
                    let p = atlas.nodes()[child].model_mass / node.model_mass;
                    inner += p * tables.advantage(node.depth, y2, a, node.obs, node.context)?;
                }
            }
            acc += probs.get(node.obs, a) * inner;
        }
        out[id] = Some(acc);
    }
    Ok(out)
}

/// L computed through Ā instead of per-step ratios; equal to [`surrogate_l`].
pub fn surrogate_l_averaged(
    atlas: &TrajectoryAtlas,
    tables: &ConditionalTables,
    new: &PolicyParams,
) -> Result<f64, OracleError> {
    let abar = averaged_advantage(atlas, tables, new)?;
    let w = atlas.weights(&tables.policy)?;
    let mut total = 0.0;
    for (e, f) in atlas.entries().iter().zip(w) {
        total += f * discounted_abar(atlas, e, &abar, tables.gamma)?;
    }
    Ok(eta(atlas, &tables.policy)? + total)
}

fn discounted_abar(
    atlas: &TrajectoryAtlas,
    e: &super::AtlasEntry,
    abar: &[Option<f64>],
    g: f64,
) -> Result<f64, OracleError> {
    let mut disc = 1.0;
    let mut acc = 0.0;
    for s in atlas.steps(e) {
        let v = abar[s.node].ok_or(OracleError::Undefined {
            table: "averaged A",
            index: s.node,
        })?;
        acc += disc * v;
        disc *= g;
    }
    Ok(acc)
}

/// Spans of the averaged advantage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpsilonSpans {
    /// max_τ G(τ) − min_τ G(τ) with G(τ) = Σ_h γ^h Ā(history at h).
    pub epsilon: f64,
    /// max(0, max Ā) − min(0, min Ā) over decision points; 0 stands for
    /// steps beyond the end of an episode.
    pub epsilon_prime: f64,
}

pub fn epsilon_spans(
    atlas: &TrajectoryAtlas,
    tables: &ConditionalTables,
    new: &PolicyParams,
) -> Result<EpsilonSpans, OracleError> {
    let abar = averaged_advantage(atlas, tables, new)?;
    let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
    for e in atlas.entries() {
        let g = discounted_abar(atlas, e, &abar, tables.gamma)?;
        lo = lo.min(g);
        hi = hi.max(g);
    }
    let (mut alo, mut ahi) = (0.0f64, 0.0f64);
    for v in abar.iter().flatten() {
        alo = alo.min(*v);
        ahi = ahi.max(*v);
    }
    Ok(EpsilonSpans {
        epsilon: if hi >= lo { hi - lo } else { 0.0 },
        epsilon_prime: ahi - alo,
    })
}

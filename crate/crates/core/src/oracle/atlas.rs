use alloc::vec;
use alloc::vec::Vec;

use crate::policy::PolicyParams;
use crate::pomdp::{Context, PomdpSpec};

use super::OracleError;

/// Largest admissible `(|X|·|Y|·|A|)^τmax`.
pub const MAX_ATLAS_PATHS: f64 = 1e7;

const NO_CHILD: usize = usize::MAX;

/// One step of an enumerated trajectory.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasStep {
    pub latent: usize,
    pub obs: usize,
    pub action: usize,
    pub next_obs: usize,
    /// R̄[y][a][y'].
    pub mean_reward: f64,
    /// Observable history `(y₁, a₁, …, y_h)` ending at this step's observation.
    pub node: usize,
}

/// A complete trajectory together with its θ-free probability factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AtlasEntry {
    /// P₁·O·T·O… including the successor draw after the last event.
    pub model_prob: f64,
    pub start: usize,
    pub len: usize,
    pub next_latent: usize,
    pub next_obs: usize,
    pub terminated_naturally: bool,
}

/// Node of the observable-history trie.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryNode {
    /// 0-based step index of `obs`.
    pub depth: usize,
    pub obs: usize,
    pub context: Context,
    /// Σ over latent paths of the model factor of this history; the policy
    /// factor is shared by all of them, so ratios of masses are conditional
    /// probabilities for every policy.
    pub model_mass: f64,
    children: Vec<usize>,
}

/// Every positive-probability trajectory of a spec, up to a horizon.
#[derive(Debug, Clone)]
pub struct TrajectoryAtlas {
    spec: PomdpSpec,
    horizon: usize,
    entries: Vec<AtlasEntry>,
    steps: Vec<AtlasStep>,
    nodes: Vec<HistoryNode>,
}

impl TrajectoryAtlas {
    /// Enumerates all trajectories of `spec` of length at most `tau_max`
    /// (clamped to `max_steps`). Fails if some path is still alive at the
    /// horizon or the enumeration bound is exceeded.
    pub fn enumerate(spec: &PomdpSpec, tau_max: usize) -> Result<Self, OracleError> {
        let horizon = tau_max.min(spec.max_steps());
        if horizon == 0 {
            return Err(OracleError::ZeroHorizon);
        }
        let branch = (spec.num_latent() * spec.num_obs() * spec.num_actions()) as f64;
        let bound = libm::pow(branch, horizon as f64);
        if bound > MAX_ATLAS_PATHS {
            return Err(OracleError::TooLarge {
                bound,
                limit: MAX_ATLAS_PATHS,
            });
        }
        let mut b = Builder {
            spec,
            horizon,
            entries: Vec::new(),
            steps: Vec::new(),
            nodes: Vec::new(),
            path: Vec::with_capacity(horizon),
            leaked: 0.0,
        };
        let root_children: Vec<usize> = vec![NO_CHILD; spec.num_obs()];
        let mut roots = root_children;
        for x in 0..spec.num_latent() - 1 {
            let p0 = spec.init(x);
            if p0 == 0.0 {
                continue;
            }
            for y in 0..spec.num_obs() {
                let po = spec.observation(x, y);
                if po == 0.0 {
                    continue;
                }
                if roots[y] == NO_CHILD {
                    roots[y] = b.new_node(0, y, Context::Start);
                }
                let node = roots[y];
                b.nodes[node].model_mass += p0 * po;
                b.visit(x, node, p0 * po);
            }
        }
        if b.leaked > 0.0 {
            return Err(OracleError::MassLeak {
                horizon,
                leaked_model_mass: b.leaked,
            });
        }
        Ok(Self {
            spec: spec.clone(),
            horizon,
            entries: b.entries,
            steps: b.steps,
            nodes: b.nodes,
        })
    }

    pub fn spec(&self) -> &PomdpSpec {
        &self.spec
    }

    /// τmax actually used.
    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn gamma(&self) -> f64 {
        self.spec.gamma()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[AtlasEntry] {
        &self.entries
    }

    pub fn steps(&self, entry: &AtlasEntry) -> &[AtlasStep] {
        &self.steps[entry.start..entry.start + entry.len]
    }

    pub fn nodes(&self) -> &[HistoryNode] {
        &self.nodes
    }

    /// Child of `node` reached by action `a` and observation `y`.
    pub fn child(&self, node: usize, a: usize, y: usize) -> Option<usize> {
        let c = self.nodes[node].children[a * self.spec.num_obs() + y];
        (c != NO_CHILD).then_some(c)
    }

    /// Whether `node` is a decision point (an event is drawn there).
    pub fn is_position(&self, node: usize) -> bool {
        let n = &self.nodes[node];
        n.obs != self.spec.terminal_obs() && n.depth < self.spec.max_steps()
    }

    pub(crate) fn check_policy(&self, policy: &PolicyParams) -> Result<(), OracleError> {
        policy.check_shape(self.spec.num_obs(), self.spec.num_actions())?;
        Ok(())
    }

    /// Σ_h log π(a_h|y_h) for every entry.
    pub fn policy_log_probs(&self, policy: &PolicyParams) -> Result<Vec<f64>, OracleError> {
        self.check_policy(policy)?;
        let lp = policy.log_prob_table();
        Ok(self
            .entries
            .iter()
            .map(|e| self.steps(e).iter().map(|s| lp.get(s.obs, s.action)).sum())
            .collect())
    }

    /// f(τ;θ) for every entry.
    pub fn weights(&self, policy: &PolicyParams) -> Result<Vec<f64>, OracleError> {
        let lp = self.policy_log_probs(policy)?;
        Ok(self
            .entries
            .iter()
            .zip(lp)
            .map(|(e, l)| e.model_prob * libm::exp(l))
            .collect())
    }

    /// Σ_τ f(τ;θ); 1 up to rounding for a complete atlas.
    pub fn total_mass(&self, policy: &PolicyParams) -> Result<f64, OracleError> {
        Ok(self.weights(policy)?.iter().sum())
    }

    /// Discounted mean-reward return of every entry.
    pub fn returns(&self) -> Vec<f64> {
        let g = self.gamma();
        self.entries
            .iter()
            .map(|e| crate::pomdp::discounted_sum(self.steps(e).iter().map(|s| s.mean_reward), g))
            .collect()
    }
}

struct Builder<'a> {
    spec: &'a PomdpSpec,
    horizon: usize,
    entries: Vec<AtlasEntry>,
    steps: Vec<AtlasStep>,
    nodes: Vec<HistoryNode>,
    path: Vec<AtlasStep>,
    leaked: f64,
}

impl Builder<'_> {
    fn new_node(&mut self, depth: usize, obs: usize, context: Context) -> usize {
        let width = self.spec.num_actions() * self.spec.num_obs();
        self.nodes.push(HistoryNode {
            depth,
            obs,
            context,
            model_mass: 0.0,
            children: vec![NO_CHILD; width],
        });
        self.nodes.len() - 1
    }

    fn child(&mut self, node: usize, a: usize, y: usize) -> usize {
        let slot = a * self.spec.num_obs() + y;
        let existing = self.nodes[node].children[slot];
        if existing != NO_CHILD {
            return existing;
        }
        let depth = self.nodes[node].depth + 1;
        let context = Context::After {
            obs: self.nodes[node].obs,
            action: a,
        };
        let id = self.new_node(depth, y, context);
        self.nodes[node].children[slot] = id;
        id
    }

    fn visit(&mut self, x: usize, node: usize, prob: f64) {
        let spec = self.spec;
        let depth = self.path.len();
        let y = self.nodes[node].obs;
        let term = spec.terminal_latent();
        for a in 0..spec.num_actions() {
            for x2 in 0..spec.num_latent() {
                let pt = spec.transition(x, a, x2);
                if pt == 0.0 {
                    continue;
                }
                for y2 in 0..spec.num_obs() {
                    let po = spec.observation(x2, y2);
                    if po == 0.0 {
                        continue;
                    }
                    let p = prob * pt * po;
                    let child = self.child(node, a, y2);
                    self.nodes[child].model_mass += p;
                    self.path.push(AtlasStep {
                        latent: x,
                        obs: y,
                        action: a,
                        next_obs: y2,
                        mean_reward: spec.reward_mean(y, a, y2),
                        node,
                    });
                    let len = depth + 1;
                    if x2 == term || len == spec.max_steps() {
                        let start = self.steps.len();
                        self.steps.extend_from_slice(&self.path);
                        self.entries.push(AtlasEntry {
                            model_prob: p,
                            start,
                            len,
                            next_latent: x2,
                            next_obs: y2,
                            terminated_naturally: x2 == term,
                        });
                    } else if len == self.horizon {
                        self.leaked += p;
                    } else {
                        self.visit(x2, child, p);
                    }
                    self.path.pop();
                }
            }
        }
    }
}

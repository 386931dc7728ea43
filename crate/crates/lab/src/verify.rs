//! Oracle-backed property checks exposed through `gtrpo verify`.

use std::fmt;
use std::str::FromStr;

use gtrpo_core::env::one_step_bandit;
use gtrpo_core::estimation::{divergence_report, empirical_kl, mc_policy_gradient_stats, Batch, KlEstimator};
use gtrpo_core::oracle::{
    discounted_prefix_kl, eta, fisher, grad_eta, improvement_under, kl, surrogate_l, ConditionalTables,
    ImprovementBounds, KlVariant, TrajectoryAtlas,
};
use gtrpo_core::policy::PolicyParams;
use gtrpo_core::pomdp::{PomdpSpec, SpecParts};
use gtrpo_core::random::{perturb_policy, random_policy, random_spec, RandomSpecConfig};
use gtrpo_core::update::ClipSchedule;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::json;

use crate::formats::read_spec;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Lemmas,
    Estimators,
    Clipping,
    All,
}

impl Suite {
    pub fn name(self) -> &'static str {
        match self {
            Suite::Lemmas => "lemmas",
            Suite::Estimators => "estimators",
            Suite::Clipping => "clipping",
            Suite::All => "all",
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Suite {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "lemmas" => Ok(Suite::Lemmas),
            "estimators" => Ok(Suite::Estimators),
            "clipping" => Ok(Suite::Clipping),
            "all" => Ok(Suite::All),
            _ => Err(format!("unknown suite `{s}` (lemmas | estimators | clipping | all)")),
        }
    }
}

/// How `measured` is compared with `tolerance`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Compare {
    AtMost,
    AtLeast,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub suite: &'static str,
    pub check: String,
    pub measured: f64,
    pub tolerance: f64,
    pub compare: Compare,
    pub passed: bool,
}

impl Check {
    fn new(suite: &'static str, check: impl Into<String>, measured: f64, tolerance: f64, compare: Compare) -> Self {
        let passed = match compare {
            Compare::AtMost => measured <= tolerance,
            Compare::AtLeast => measured >= tolerance,
        };
        Check {
            suite,
            check: check.into(),
            measured,
            tolerance,
            compare,
            passed,
        }
    }

    fn at_most(suite: &'static str, check: impl Into<String>, measured: f64, tolerance: f64) -> Self {
        Check::new(suite, check, measured, tolerance, Compare::AtMost)
    }

    /// One JSON object per line; non-finite measurements become `null`.
    pub fn to_json_line(&self) -> String {
        json!({
            "suite": self.suite,
            "check": self.check,
            "measured": self.measured,
            "tolerance": self.tolerance,
            "compare": match self.compare { Compare::AtMost => "<=", Compare::AtLeast => ">=" },
            "passed": self.passed,
        })
        .to_string()
    }
}

pub const SHIPPED_SPECS: [(&str, &str); 3] = [
    ("two_door", include_str!("../specs/two_door.spec")),
    ("noisy_chain", include_str!("../specs/noisy_chain.spec")),
    ("cliff_alive", include_str!("../specs/cliff_alive.spec")),
];

pub fn shipped_specs() -> Vec<(&'static str, PomdpSpec)> {
    SHIPPED_SPECS
        .iter()
        .map(|(name, text)| (*name, read_spec(text).expect("shipped spec parses")))
        .collect()
}

pub fn run(suite: Suite) -> Vec<Check> {
    match suite {
        Suite::Lemmas => lemmas(),
        Suite::Estimators => estimators(),
        Suite::Clipping => clipping(),
        Suite::All => {
            let mut v = lemmas();
            v.extend(estimators());
            v.extend(clipping());
            v
        }
    }
}

fn small_case(rng: &mut ChaCha8Rng, i: usize) -> (TrajectoryAtlas, PolicyParams) {
    let cfg = RandomSpecConfig::small(1 + i % 2, 1 + (i / 2) % 2, 2 + (i / 4) % 2, 2 + i % 3);
    let spec = random_spec(rng, &cfg);
    let atlas = TrajectoryAtlas::enumerate(&spec, spec.max_steps()).expect("small atlas");
    let pol = random_policy(rng, spec.num_obs(), spec.num_actions(), 1.0);
    (atlas, pol)
}

fn shipped_cases(rng: &mut ChaCha8Rng) -> Vec<(String, TrajectoryAtlas, PolicyParams)> {
    shipped_specs()
        .into_iter()
        .map(|(name, spec)| {
            let atlas = TrajectoryAtlas::enumerate(&spec, spec.max_steps()).expect("shipped atlas");
            let pol = random_policy(rng, spec.num_obs(), spec.num_actions(), 0.5);
            (name.to_string(), atlas, pol)
        })
        .collect()
}

fn unit(n: usize, i: usize, step: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = step;
    e
}

fn central_fd(pol: &PolicyParams, f: impl Fn(&PolicyParams) -> f64, step: f64) -> Vec<f64> {
    let n = pol.logits().len();
    (0..n)
        .map(|i| {
            let e = unit(n, i, step);
            (f(&pol.stepped(&e, 1.0)) - f(&pol.stepped(&e, -1.0))) / (2.0 * step)
        })
        .collect()
}

/// Largest entrywise gap between a four-point FD Hessian of `f` and `m`.
fn hessian_gap(pol: &PolicyParams, f: impl Fn(&PolicyParams) -> f64, m: impl Fn(usize, usize) -> f64) -> f64 {
    let n = pol.logits().len();
    let step = 1e-3;
    let mut worst: f64 = 0.0;
    for i in 0..n {
        for j in i..n {
            let at = |si: f64, sj: f64| {
                let mut d = vec![0.0; n];
                d[i] += si * step;
                d[j] += sj * step;
                f(&pol.stepped(&d, 1.0))
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * step * step);
            worst = worst.max((v - m(i, j)).abs());
        }
    }
    worst
}

fn rel_gap(exact: &[f64], fd: &[f64]) -> f64 {
    exact
        .iter()
        .zip(fd)
        .map(|(a, b)| (a - b).abs() / a.abs().max(1e-3))
        .fold(0.0, f64::max)
}

fn lemmas() -> Vec<Check> {
    const S: &str = "lemmas";
    let mut out = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0x1e55);
    let mut cases: Vec<(String, TrajectoryAtlas, PolicyParams)> = (0..10)
        .map(|i| {
            let (a, p) = small_case(&mut rng, i);
            (format!("random_{i}"), a, p)
        })
        .collect();
    cases.extend(shipped_cases(&mut rng));

    for (name, atlas, pol) in &cases {
        let f = fisher(atlas, pol, false).expect("fisher");
        let gap = hessian_gap(pol, |q| kl(atlas, pol, q, KlVariant::Trajectory).unwrap(), |i, j| f[(i, j)]);
        out.push(Check::at_most(S, format!("kl_hessian_equals_fisher/{name}"), gap, 1e-4));
        let fg = fisher(atlas, pol, true).expect("fisher");
        let gap = hessian_gap(pol, |q| discounted_prefix_kl(atlas, pol, q).unwrap(), |i, j| fg[(i, j)]);
        out.push(Check::at_most(S, format!("d_gamma_hessian_equals_discounted_fisher/{name}"), gap, 1e-4));
    }

    let mut worst_identity: f64 = 0.0;
    let mut worst_contact: f64 = 0.0;
    let mut worst_contact_grad: f64 = 0.0;
    let mut worst_grad: f64 = 0.0;
    for i in 0..20 {
        let (atlas, old) = small_case(&mut rng, i);
        let size = rng.random_range(0.1..2.0);
        let new = perturb_policy(&mut rng, &old, size);
        let tables = ConditionalTables::compute(&atlas, &old).unwrap();
        let lhs = eta(&atlas, &new).unwrap() - eta(&atlas, &old).unwrap();
        let rhs = improvement_under(&atlas, &tables, &new).unwrap();
        worst_identity = worst_identity.max((lhs - rhs).abs());

        let e = eta(&atlas, &old).unwrap();
        worst_contact = worst_contact.max((surrogate_l(&atlas, &tables, &old).unwrap() - e).abs());
        let g = grad_eta(&atlas, &old).unwrap();
        let fd_l = central_fd(&old, |q| surrogate_l(&atlas, &tables, q).unwrap(), 1e-5);
        worst_contact_grad = worst_contact_grad.max(rel_gap(g.as_slice(), &fd_l));
        let fd_eta = central_fd(&old, |q| eta(&atlas, q).unwrap(), 1e-5);
        worst_grad = worst_grad.max(rel_gap(g.as_slice(), &fd_eta));
    }
    out.push(Check::at_most(S, "improvement_identity", worst_identity, 1e-9));
    out.push(Check::at_most(S, "surrogate_equals_eta_at_contact", worst_contact, 1e-12));
    out.push(Check::at_most(S, "surrogate_gradient_equals_eta_gradient", worst_contact_grad, 1e-6));
    out.push(Check::at_most(S, "eta_gradient_matches_finite_differences", worst_grad, 1e-6));

    let mut worst = [0.0f64; 4];
    for i in 0..100 {
        let (atlas, old) = small_case(&mut rng, i);
        let size = rng.random_range(0.01..1.5);
        let new = perturb_policy(&mut rng, &old, size);
        let b = ImprovementBounds::compute(&atlas, &old, &new).unwrap();
        let pens = [b.tv_penalty(), b.kl_penalty(), b.d_gamma_penalty(), b.prefix_tv_penalty()];
        for (w, p) in worst.iter_mut().zip(pens) {
            *w = w.max(-b.slack(p));
        }
    }
    for (name, w) in ["tv", "kl", "d_gamma", "prefix_tv"].iter().zip(worst) {
        out.push(Check::at_most(S, format!("improvement_bound_violation/{name}"), w, 1e-9));
    }
    out
}

fn estimators() -> Vec<Check> {
    const S: &str = "estimators";
    let mut out = Vec::new();

    let bandit = one_step_bandit(&[1.0, 0.0]);
    let uniform = PolicyParams::uniform(2, 2);
    let batch = Batch::sample(&bandit, &uniform, 200_000, 0).unwrap();
    let est = mc_policy_gradient_stats(&batch).unwrap();
    let z = [0.25, -0.25]
        .iter()
        .enumerate()
        .map(|(a, want)| (est.mean.get(0, a) - want).abs() / est.std_error.get(0, a))
        .fold(0.0, f64::max);
    out.push(Check::at_most(S, "bandit_gradient_standard_errors", z, 3.0));

    let (_, spec) = shipped_specs().swap_remove(0);
    let atlas = TrajectoryAtlas::enumerate(&spec, spec.max_steps()).unwrap();
    let old = PolicyParams::uniform(spec.num_obs(), spec.num_actions());
    let new = PolicyParams::from_rows(3, 2, vec![0.6, -0.6, -0.4, 0.4, 0.0, 0.0]).unwrap();
    let exact = kl(&atlas, &old, &new, KlVariant::Trajectory).unwrap();
    let batch = Batch::sample(&spec, &old, 100_000, 77).unwrap();
    let rep = divergence_report(&batch, &new, spec.max_steps()).unwrap();
    out.push(Check::at_most(S, "episodic_kl_relative_error", (rep.kl_episodic - exact).abs() / exact, 0.05));
    out.push(Check::new(
        S,
        "per_step_kl_bias_on_mixed_lengths",
        (rep.kl_trpo - exact).abs() / exact,
        0.2,
        Compare::AtLeast,
    ));
    let exact_gamma = discounted_prefix_kl(&atlas, &old, &new).unwrap();
    out.push(Check::at_most(
        S,
        "gamma_kl_relative_error",
        (rep.d_gamma - exact_gamma).abs() / exact_gamma,
        0.05,
    ));

    // one live state that never terminates: every episode has the full length
    let steps = 5;
    let fixed = PomdpSpec::new(SpecParts {
        num_latent: 2,
        num_obs: 2,
        num_actions: 2,
        init: vec![1.0],
        transition: vec![1.0, 0.0, 1.0, 0.0, 0.0, 1.0, 0.0, 1.0],
        observation: vec![1.0, 0.0, 0.0, 1.0],
        reward_mean: vec![0.0; 8],
        reward_noise_std: 0.0,
        gamma: 0.9,
        max_steps: steps,
    })
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let p = random_policy(&mut rng, 2, 2, 1.0);
    let q = random_policy(&mut rng, 2, 2, 1.0);
    let batch = Batch::sample(&fixed, &p, 2000, 5).unwrap();
    let e = empirical_kl(&batch, &q, KlEstimator::Episodic).unwrap();
    let t = empirical_kl(&batch, &q, KlEstimator::Trpo).unwrap();
    out.push(Check::at_most(
        S,
        "episodic_equals_length_times_per_step",
        (e - steps as f64 * t).abs() / e.abs().max(1.0),
        1e-12,
    ));
    out
}

fn clipping() -> Vec<Check> {
    const S: &str = "clipping";
    let mut out = Vec::new();
    let exact = |name: &str, got: (f64, f64), want: (f64, f64), tol: f64| {
        Check::at_most(S, name, (got.0 - want.0).abs().max((got.1 - want.1).abs()), tol)
    };
    let c = ClipSchedule::Constant { delta: 0.1 };
    out.push(exact("constant_delta_0.1", c.bounds(4, 1).unwrap(), (0.9, 1.1), 0.0));
    let l = ClipSchedule::LengthDependent { alpha: 1.2 };
    out.push(exact(
        "length_dep_alpha_1.2_len_4",
        l.bounds(4, 1).unwrap(),
        (1.2f64.powf(-0.25), 1.2f64.powf(0.25)),
        4.0 * f64::EPSILON,
    ));
    let g = ClipSchedule::GammaDependent {
        alpha: 1.2,
        beta: 0.3,
        gamma: 0.5,
    };
    // exponent 1/(2·0.25) = 2: 1.2^-2 ≈ 0.694 is capped at 0.7, 1.44 at 1.3
    out.push(exact("gamma_dep_cap_len_2_h_2", g.bounds(2, 2).unwrap(), (0.7, 1.3), 0.0));

    let mut violations = 0usize;
    let mut prev = l.bounds(1, 1).unwrap();
    for len in 2..=100 {
        let b = l.bounds(len, 1).unwrap();
        if b.0 < prev.0 || b.1 > prev.1 || b.0 > 1.0 || b.1 < 1.0 {
            violations += 1;
        }
        prev = b;
    }
    out.push(Check::at_most(S, "length_dep_tightens_with_length", violations as f64, 0.0));

    let mut violations = 0usize;
    for (alpha, beta, gamma) in [(1.2, 0.3, 0.5), (1.05, 0.9, 0.97), (2.0, 0.1, 0.99)] {
        let s = ClipSchedule::GammaDependent { alpha, beta, gamma };
        for len in 1..=100 {
            let mut prev = (1.0, 1.0);
            for h in 1..=len.min(20) {
                let b = s.bounds(len, h).unwrap();
                // deeper steps get wider bounds, always inside the caps
                if b.0 > prev.0 || b.1 < prev.1 || b.0 < 1.0 - beta || b.1 > 1.0 + beta {
                    violations += 1;
                }
                if len > 1 && h < len {
                    let shorter = s.bounds(len - 1, h).unwrap();
                    if b.0 < shorter.0 || b.1 > shorter.1 {
                        violations += 1;
                    }
                }
                prev = b;
            }
        }
    }
    out.push(Check::at_most(S, "gamma_dep_monotone_in_length_and_depth", violations as f64, 0.0));
    out
}

#![allow(dead_code)]

use gtrpo_core::oracle::TrajectoryAtlas;
use gtrpo_core::policy::PolicyParams;
use gtrpo_core::pomdp::PomdpSpec;
use gtrpo_core::random::{random_policy, random_spec, RandomSpecConfig};
use rand_chacha::ChaCha8Rng;

/// Random spec with at most 3 latent states and 3 observations counting the
/// terminal, 2 or 3 actions and episodes of at most 4 steps.
pub fn small_case(rng: &mut ChaCha8Rng, i: usize) -> (TrajectoryAtlas, PolicyParams) {
    let cfg = RandomSpecConfig::small(1 + i % 2, 1 + (i / 2) % 2, 2 + (i / 4) % 2, 2 + i % 3);
    let spec = random_spec(rng, &cfg);
    let atlas = TrajectoryAtlas::enumerate(&spec, spec.max_steps()).unwrap();
    let pol = random_policy(rng, spec.num_obs(), spec.num_actions(), 1.0);
    (atlas, pol)
}

pub fn identity_case(rng: &mut ChaCha8Rng, live: usize, na: usize, steps: usize) -> PomdpSpec {
    let mut cfg = RandomSpecConfig::small(live, live, na, steps);
    cfg.identity_obs = true;
    random_spec(rng, &cfg)
}

pub fn unit(n: usize, i: usize, step: f64) -> Vec<f64> {
    let mut e = vec![0.0; n];
    e[i] = step;
    e
}

pub fn central_fd<F: Fn(&PolicyParams) -> f64>(pol: &PolicyParams, f: F, step: f64) -> Vec<f64> {
    let n = pol.logits().len();
    (0..n)
        .map(|i| {
            let e = unit(n, i, step);
            (f(&pol.stepped(&e, 1.0)) - f(&pol.stepped(&e, -1.0))) / (2.0 * step)
        })
        .collect()
}

/// Four-point second differences of `f` around `pol`.
pub fn fd_hessian<F: Fn(&PolicyParams) -> f64>(pol: &PolicyParams, f: F, step: f64) -> Vec<Vec<f64>> {
    let n = pol.logits().len();
    let mut h = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let at = |si: f64, sj: f64| {
                let mut d = vec![0.0; n];
                d[i] += si * step;
                d[j] += sj * step;
                f(&pol.stepped(&d, 1.0))
            };
            let v = (at(1.0, 1.0) - at(1.0, -1.0) - at(-1.0, 1.0) + at(-1.0, -1.0)) / (4.0 * step * step);
            h[i][j] = v;
            h[j][i] = v;
        }
    }
    h
}

/// Latent-state dynamic programming for identity-observation specs with the
/// episode cap. Returns `(v, q)` indexed `[h][x]` and `[h][x][a]`, h 0-based.
pub fn latent_values(spec: &PomdpSpec, pol: &PolicyParams) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let nx = spec.num_latent();
    let na = spec.num_actions();
    let term = spec.terminal_latent();
    let hmax = spec.max_steps();
    let mut v = vec![vec![0.0; nx]; hmax + 1];
    let mut q = vec![vec![vec![0.0; na]; nx]; hmax];
    for h in (0..hmax).rev() {
        for x in 0..term {
            let probs = pol.action_probs(x).unwrap();
            let mut vx = 0.0;
            for a in 0..na {
                let mut qa = 0.0;
                for x2 in 0..nx {
                    let p = spec.transition(x, a, x2);
                    let cont = if x2 == term { 0.0 } else { v[h + 1][x2] };
                    qa += p * (spec.reward_mean(x, a, x2) + spec.gamma() * cont);
                }
                q[h][x][a] = qa;
                vx += probs[a] * qa;
            }
            v[h][x] = vx;
        }
    }
    (v, q)
}

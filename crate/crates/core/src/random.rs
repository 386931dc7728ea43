//! Random small POMDPs for property tests and the verify suites.

use alloc::vec;
use alloc::vec::Vec;

use rand::Rng;
use rand_distr::{Distribution, Exp1};

use crate::policy::PolicyParams;
use crate::pomdp::{PomdpSpec, SpecParts};

/// Shape and dynamics knobs for [`random_spec`]. Counts exclude the terminal.
#[derive(Debug, Clone, PartialEq)]
pub struct RandomSpecConfig {
    pub live_latent: usize,
    pub live_obs: usize,
    pub num_actions: usize,
    /// Per-(x, a) termination probability is drawn uniformly from this range.
    pub term_prob: (f64, f64),
    /// Force O to the identity (requires `live_obs == live_latent`).
    pub identity_obs: bool,
    pub gamma: f64,
    pub max_steps: usize,
}

impl RandomSpecConfig {
    pub fn small(live_latent: usize, live_obs: usize, num_actions: usize, max_steps: usize) -> Self {
        Self {
            live_latent,
            live_obs,
            num_actions,
            term_prob: (0.2, 0.6),
            identity_obs: false,
            gamma: 0.9,
            max_steps,
        }
    }
}

fn dirichlet_ones<R: Rng + ?Sized>(rng: &mut R, n: usize) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| Exp1.sample(rng)).collect();
    let s: f64 = v.iter().sum();
    for p in &mut v {
        *p /= s;
    }
    // Renormalise against rounding so rows pass the 1e-12 check.
    let drift: f64 = 1.0 - v.iter().sum::<f64>();
    v[0] += drift;
    v
}

/// Draws a random spec: Dirichlet(1) rows, rewards uniform in [−1, 1].
pub fn random_spec<R: Rng + ?Sized>(rng: &mut R, cfg: &RandomSpecConfig) -> PomdpSpec {
    assert!(cfg.live_latent >= 1 && cfg.live_obs >= 1 && cfg.num_actions >= 1);
    assert!(!cfg.identity_obs || cfg.live_obs == cfg.live_latent);
    let nx = cfg.live_latent + 1;
    let ny = cfg.live_obs + 1;
    let na = cfg.num_actions;

    let init = dirichlet_ones(rng, cfg.live_latent);
    let mut transition = vec![0.0; nx * na * nx];
    for x in 0..nx {
        for a in 0..na {
            let row = &mut transition[(x * na + a) * nx..(x * na + a + 1) * nx];
            if x == nx - 1 {
                row[nx - 1] = 1.0;
                continue;
            }
            let (lo, hi) = cfg.term_prob;
            let p_term = if hi > lo { rng.random_range(lo..hi) } else { lo };
            let live = dirichlet_ones(rng, cfg.live_latent);
            for (dst, p) in row.iter_mut().zip(&live) {
                *dst = (1.0 - p_term) * p;
            }
            row[nx - 1] = p_term;
            let drift: f64 = 1.0 - row.iter().sum::<f64>();
            row[nx - 1] += drift;
        }
    }
    let mut observation = vec![0.0; nx * ny];
    for x in 0..nx - 1 {
        if cfg.identity_obs {
            observation[x * ny + x] = 1.0;
        } else {
            let row = dirichlet_ones(rng, cfg.live_obs);
            observation[x * ny..x * ny + cfg.live_obs].copy_from_slice(&row);
        }
    }
    observation[(nx - 1) * ny + ny - 1] = 1.0;
    let reward_mean = (0..ny * na * ny).map(|_| rng.random_range(-1.0..=1.0)).collect();

    PomdpSpec::new(SpecParts {
        num_latent: nx,
        num_obs: ny,
        num_actions: na,
        init,
        transition,
        observation,
        reward_mean,
        reward_noise_std: 0.0,
        gamma: cfg.gamma,
        max_steps: cfg.max_steps,
    })
    .expect("random spec is valid by construction")
}

/// Logits drawn uniformly from [−scale, scale].
pub fn random_policy<R: Rng + ?Sized>(rng: &mut R, num_obs: usize, num_actions: usize, scale: f64) -> PolicyParams {
    let data = (0..num_obs * num_actions)
        .map(|_| rng.random_range(-scale..=scale))
        .collect();
    PolicyParams::from_rows(num_obs, num_actions, data).expect("finite logits")
}

/// `policy` with every logit moved by an independent uniform draw in [−size, size].
pub fn perturb_policy<R: Rng + ?Sized>(rng: &mut R, policy: &PolicyParams, size: f64) -> PolicyParams {
    let dir: Vec<f64> = (0..policy.logits().len())
        .map(|_| rng.random_range(-size..=size))
        .collect();
    policy.stepped(&dir, 1.0)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn random_specs_are_valid() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for i in 0..50 {
            let mut cfg = RandomSpecConfig::small(1 + i % 3, 1 + (i / 3) % 3, 1 + i % 2, 4);
            cfg.identity_obs = cfg.live_obs == cfg.live_latent && i % 2 == 0;
            let spec = random_spec(&mut rng, &cfg);
            assert!(spec.terminal_reachable());
        }
    }
}

mod common;

use common::{identity_case, latent_values};
use gtrpo_core::estimation::{Batch, PositionAdvantages};
use gtrpo_core::oracle::{eta, AdvantageKind, ConditionalTables, TrajectoryAtlas};
use gtrpo_core::pomdp::Context;
use gtrpo_core::random::random_policy;
use gtrpo_core::update::{ppo_objective, ClipSchedule, ObjectiveMode};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[test]
fn three_observation_tables_reduce_to_latent_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(61);
    let mut checked = 0;
    for i in 0..12 {
        let spec = identity_case(&mut rng, 1 + i % 3, 2 + i % 2, 2 + i % 3);
        let atlas = TrajectoryAtlas::enumerate(&spec, spec.max_steps()).unwrap();
        let pol = random_policy(&mut rng, spec.num_obs(), spec.num_actions(), 1.0);
        let tables = ConditionalTables::compute(&atlas, &pol).unwrap();
        let (v, q) = latent_values(&spec, &pol);
        let v1: f64 = (0..spec.terminal_latent()).map(|x| spec.init(x) * v[0][x]).sum();
        assert!((eta(&atlas, &pol).unwrap() - v1).abs() < 1e-10);

        let (ny, na) = (spec.num_obs(), spec.num_actions());
        for h in 0..spec.max_steps() {
            for y in 0..spec.terminal_obs() {
                for c in 0..Context::count(ny, na) {
                    let ctx = Context::from_index(c, ny, na);
                    if !tables.v_defined(h, y, ctx) {
                        continue;
                    }
                    let vo = tables.v(h, y, ctx).unwrap();
                    assert!((vo - v[h][y]).abs() < 1e-10, "V h={h} y={y}: {vo} vs {}", v[h][y]);
                    for a in 0..na {
                        let mut marginal = 0.0;
                        for y2 in 0..ny {
                            let p = spec.transition(y, a, y2);
                            if p > 0.0 {
                                marginal += p * tables.advantage(h, y2, a, y, ctx).unwrap();
                            }
                        }
                        let want = q[h][y][a] - v[h][y];
                        assert!((marginal - want).abs() < 1e-10, "A h={h} y={y} a={a}: {marginal} vs {want}");
                        checked += 1;
                    }
                }
            }
        }
    }
    assert!(checked > 100);
}

#[test]
fn clipped_objective_modes_agree_on_identity_specs() {
    let mut rng = ChaCha8Rng::seed_from_u64(62);
    let scheds = [
        ClipSchedule::Constant { delta: 0.1 },
        ClipSchedule::LengthDependent { alpha: 1.2 },
        ClipSchedule::GammaDependent {
            alpha: 1.2,
            beta: 0.3,
            gamma: 0.9,
        },
    ];
    for i in 0..6 {
        let spec = identity_case(&mut rng, 2 + i % 2, 2, 3);
        let atlas = TrajectoryAtlas::enumerate(&spec, spec.max_steps()).unwrap();
        let (ny, na) = (spec.num_obs(), spec.num_actions());
        let old = random_policy(&mut rng, ny, na, 1.0);
        let new = random_policy(&mut rng, ny, na, 1.0);
        let tables = ConditionalTables::compute(&atlas, &old).unwrap();
        let batch = Batch::sample(&spec, &old, 500, 1000 * i as u64).unwrap();
        let three = PositionAdvantages::from_oracle(&batch, &tables, AdvantageKind::ThreeObservation).unwrap();
        let one = PositionAdvantages::from_oracle(&batch, &tables, AdvantageKind::OneObservation).unwrap();
        for s in &scheds {
            let p = ppo_objective(&batch, &new, &three, s, ObjectiveMode::Pomdp).unwrap();
            let m = ppo_objective(&batch, &new, &one, s, ObjectiveMode::Mdp).unwrap();
            assert!((p.value - m.value).abs() <= 1e-12, "{} vs {}", p.value, m.value);
            assert_eq!(p.skipped, 0);
        }
    }
}

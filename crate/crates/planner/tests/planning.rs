use std::f64::consts::PI;
use std::time::Instant;

use dlo_core::{ActionMode, DloState, GripperPair, OrientationKind, Pose, RepresentationConfig, StateKind, Vec3};
use dlo_neuro::{Architecture, ModelParams};
use dlo_planner::cem::ACTION_DIM;
use dlo_planner::{cem_optimize, plan, shape_cost, ActionVector, CemConfig};
use nalgebra::Rotation3;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn optimum(seed: u64) -> ActionVector {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    std::array::from_fn(|k| if k < 3 { rng.random_range(-0.05..0.05) } else { rng.random_range(-0.3..0.3) })
}

fn quadratic(target: ActionVector) -> impl FnMut(&[ActionVector]) -> Result<Vec<f64>, dlo_planner::PlanError> {
    move |xs| {
        Ok(xs
            .iter()
            .map(|x| x.iter().zip(&target).map(|(a, b)| (a - b).powi(2)).sum())
            .collect())
    }
}

/// Distance from the optimum after the search, relative to its distance
/// from the starting mean.
#[test]
fn quadratic_search_closes_in() {
    let cfg = CemConfig::default();
    let mut shrink = vec![];
    for seed in 0..100 {
        let star = optimum(seed + 1000);
        let out = cem_optimize(&cfg, seed, quadratic(star)).unwrap();
        assert!(out.iterations.len() <= cfg.max_iters);
        let err = out.best_action.iter().zip(&star).map(|(a, b)| (a - b).powi(2)).sum::<f64>().sqrt();
        shrink.push(err / star.iter().map(|x| x * x).sum::<f64>().sqrt());
    }
    shrink.sort_by(f64::total_cmp);
    eprintln!("median shrink {:.4}, p95 {:.4}", shrink[50], shrink[95]);
    assert!(shrink[95] < 0.2);
}

#[test]
fn elites_are_the_cheapest_samples() {
    let cfg = CemConfig::default();
    for seed in 0..100 {
        let out = cem_optimize(&cfg, seed, quadratic(optimum(seed))).unwrap();
        let mut prev = f64::INFINITY;
        for it in &out.iterations {
            let mut sorted = it.costs.clone();
            sorted.sort_by(f64::total_cmp);
            let mut chosen: Vec<f64> = it.elites.iter().map(|&i| it.costs[i]).collect();
            chosen.sort_by(f64::total_cmp);
            assert_eq!(chosen, sorted[..cfg.n_elites].to_vec());
            assert!(it.elite_mean_cost <= prev, "seed {seed}");
            assert!(out.best_cost <= it.elite_mean_cost);
            prev = it.elite_mean_cost;
        }
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn samples_respect_bounds(seed in any::<u64>(), shift in -1.0f64..1.0) {
        let cfg = CemConfig::default();
        let (lo, hi) = (cfg.lower, cfg.upper);
        // an optimum outside the box pulls the distribution onto the bounds
        let star: ActionVector = std::array::from_fn(|k| shift * 3.0 * hi[k]);
        let mut inside = true;
        let mut f = quadratic(star);
        cem_optimize(&cfg, seed, |xs| {
            inside &= xs.iter().all(|x| (0..ACTION_DIM).all(|k| x[k] >= lo[k] && x[k] <= hi[k]));
            f(xs)
        }).unwrap();
        prop_assert!(inside);
    }

    #[test]
    fn cost_matches_double_loop(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut pts = || (0..16).map(|_| Vec3::new(rng.random(), rng.random(), rng.random())).collect::<Vec<_>>();
        let a = pts();
        let b = pts();
        let mut sum = 0.0;
        for i in 0..16 {
            for c in 0..3 {
                sum += (a[i][c] - b[i][c]).abs();
            }
        }
        let got = shape_cost(&DloState::new(a).unwrap(), &DloState::new(b).unwrap()).unwrap();
        prop_assert!((got - sum / 48.0).abs() < 1e-14);
    }
}

fn scene() -> (DloState, GripperPair) {
    let pts = (0..16)
        .map(|i| {
            let s = i as f64 / 15.0;
            Vec3::new(0.35 * s, 0.0, -0.08 * (PI * s).sin())
        })
        .collect();
    let g = GripperPair::new(
        Pose::new(Vec3::new(0.35, 0.0, 0.0), Rotation3::from_axis_angle(&Vec3::z_axis(), PI)),
        Pose::identity(),
    );
    (DloState::new(pts).unwrap(), g)
}

fn mlp() -> ModelParams {
    let cfg = RepresentationConfig {
        state: StateKind::Points,
        orientation: OrientationKind::Quaternion,
        action: ActionMode::Difference,
        n_points: 16,
    };
    let mut p = ModelParams::init(Architecture::Mlp, cfg, 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for t in p.tensors.values_mut() {
        t.data.iter_mut().for_each(|x| *x += rng.random_range(-0.01..0.01));
    }
    p
}

#[test]
fn planning_is_fast_deterministic_and_beats_null() {
    let (s, g) = scene();
    let model = mlp();
    let cfg = CemConfig::default();
    let t = Instant::now();
    let a = plan(&model, &s, &g, &s, &cfg, 7, None, None).unwrap();
    let elapsed = t.elapsed().as_secs_f64();
    assert!(elapsed < 1.0, "planning took {elapsed} s");
    let b = plan(&model, &s, &g, &s, &cfg, 7, None, None).unwrap();
    assert_eq!(serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap());
    assert!(a.cost_csv().lines().count() <= cfg.max_iters + 1);
}

#[test]
fn null_respecting_model_keeps_a_reached_target() {
    let (s, g) = scene();
    // zero head: predicts no change for every action, the null move included
    let model = ModelParams::init(Architecture::Mlp, mlp().cfg, 2).unwrap();
    let null = dlo_core::Action::from_difference_vector(&[0.0; 9]);
    let stay = model.predict_next(&s, &g, &[null], None).unwrap();
    let p = plan(&model, &s, &g, &s, &CemConfig::default(), 3, None, None).unwrap();
    assert!(p.best_cost <= shape_cost(&stay[0], &s).unwrap());
}

#[test]
fn point_count_mismatch_rejected() {
    let (s, g) = scene();
    let short = DloState::new(s.points()[..10].to_vec()).unwrap();
    assert!(plan(&mlp(), &s, &g, &short, &CemConfig::default(), 0, None, None).is_err());
}

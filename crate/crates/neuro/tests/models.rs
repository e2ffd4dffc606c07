use std::f64::consts::PI;

use dlo_core::{
    assemble_input, make_action, ActionMode, DloState, GripperPair, OrientationKind, Pose, RepresentationConfig,
    StateKind, Vec3,
};
use dlo_neuro::train::{finite_difference_check, fit_normalization, train, Example, TrainConfig};
use dlo_neuro::{Architecture, ModelParams};
use nalgebra::{Rotation3, Unit};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_vec(rng: &mut ChaCha8Rng, r: f64) -> Vec3 {
    Vec3::new(rng.random_range(-r..r), rng.random_range(-r..r), rng.random_range(-r..r))
}

fn rand_rot(rng: &mut ChaCha8Rng, max: f64) -> Rotation3<f64> {
    let axis = Unit::new_normalize(rand_vec(rng, 1.0) + Vec3::new(1e-3, 0.0, 0.0));
    Rotation3::from_axis_angle(&axis, rng.random_range(0.0..max))
}

fn scene(rng: &mut ChaCha8Rng, n: usize) -> (DloState, GripperPair) {
    let right = Pose::new(rand_vec(rng, 0.2), rand_rot(rng, 0.3));
    let left_t = right.t + Vec3::new(0.35, 0.0, 0.0) + rand_vec(rng, 0.05);
    let left = Pose::new(left_t, Rotation3::from_axis_angle(&Vec3::z_axis(), PI) * rand_rot(rng, 0.3));
    let sag = rng.random_range(0.02..0.15);
    let wiggle = rand_vec(rng, 0.03);
    let pts = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            right.t + (left_t - right.t) * s - Vec3::z() * sag * (PI * s).sin() + wiggle * (2.0 * PI * s).sin()
        })
        .collect();
    (DloState::new(pts).unwrap(), GripperPair::new(left, right))
}

fn random_next(rng: &mut ChaCha8Rng, g: &GripperPair) -> GripperPair {
    let mut next = *g;
    next.left.t += rand_vec(rng, 0.05);
    next.left.r = rand_rot(rng, 0.4) * next.left.r;
    next.right.r = rand_rot(rng, 0.4) * next.right.r;
    next
}

fn examples(cfg: RepresentationConfig, n: usize, seed: u64) -> Vec<Example> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let (s, g) = scene(&mut rng, cfg.n_points);
            let next = random_next(&mut rng, &g);
            let bundle = assemble_input(&s, &g, &make_action(&g, &next, cfg.action), &cfg).unwrap();
            let target = (0..cfg.state_width()).map(|_| rng.random_range(-0.01..0.01)).collect();
            Example { bundle, target }
        })
        .collect()
}

fn cfg(state: StateKind, orientation: OrientationKind, action: ActionMode) -> RepresentationConfig {
    RepresentationConfig {
        state,
        orientation,
        action,
        n_points: 8,
    }
}

/// Fresh model with every tensor perturbed, so no gradient path is dead.
fn random_model(arch: Architecture, cfg: RepresentationConfig, data: &[Example], seed: u64) -> ModelParams {
    let mut p = ModelParams::init(arch, cfg, seed).unwrap();
    p.norm = fit_normalization(arch, &cfg, data);
    let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
    for (name, t) in p.tensors.iter_mut() {
        let r = if name.starts_with("head") { 0.1 } else { 0.05 };
        t.data.iter_mut().for_each(|x| *x += rng.random_range(-r..r));
    }
    p
}

#[test]
fn gradients_match_finite_differences() {
    let settings = [
        (Architecture::Mlp, cfg(StateKind::Points, OrientationKind::Quaternion, ActionMode::EndPose)),
        (Architecture::Transformer, cfg(StateKind::Edges, OrientationKind::Matrix, ActionMode::Difference)),
        (Architecture::JacMlp, cfg(StateKind::Edges, OrientationKind::AxisAngle, ActionMode::Difference)),
    ];
    for (k, (arch, c)) in settings.into_iter().enumerate() {
        let data = examples(c, 5, k as u64);
        let p = random_model(arch, c, &data, k as u64);
        let worst = finite_difference_check(&p, &data, 1e-5, 6, 3).unwrap();
        assert!(worst <= 1e-4, "{arch}: {worst}");
    }
}

#[test]
fn zero_head_predicts_no_change() {
    let c = cfg(StateKind::Edges, OrientationKind::Quaternion, ActionMode::Difference);
    let data = examples(c, 6, 1);
    let bundles: Vec<_> = data.iter().map(|e| e.bundle.clone()).collect();
    for arch in [Architecture::Mlp, Architecture::Transformer, Architecture::JacMlp] {
        let p = ModelParams::init(arch, c, 4).unwrap();
        for d in p.predict(&bundles).unwrap() {
            assert_eq!(d.len(), 21);
            assert!(d.iter().all(|&x| x == 0.0));
        }
    }
}

#[test]
fn output_width_follows_representation() {
    for state in [StateKind::Points, StateKind::Edges] {
        let c = cfg(state, OrientationKind::AxisAngle, ActionMode::Difference);
        let data = examples(c, 3, 2);
        let bundles: Vec<_> = data.iter().map(|e| e.bundle.clone()).collect();
        for arch in [Architecture::Mlp, Architecture::Transformer, Architecture::JacMlp] {
            let p = random_model(arch, c, &data, 5);
            let expected = match state {
                StateKind::Points => 8 * 3,
                StateKind::Edges => 7 * 3,
            };
            let out = p.predict(&bundles).unwrap();
            assert!(out.iter().all(|d| d.len() == expected));
            // reassembly yields all points, first one on the right TCP
            let mut rng = ChaCha8Rng::seed_from_u64(2);
            let (s, g) = scene(&mut rng, 8);
            let next = p.next_state(&s, &g, &out[0], None).unwrap();
            assert_eq!(next.len(), 8);
            if state == StateKind::Edges {
                assert!((next.points()[0] - g.right.t).norm() < 1e-12);
            }
        }
    }
}

#[test]
fn predictions_are_reproducible() {
    let c = cfg(StateKind::Points, OrientationKind::Matrix, ActionMode::EndPose);
    let data = examples(c, 4, 3);
    let mut bundles: Vec<_> = data.iter().map(|e| e.bundle.clone()).collect();
    bundles.push(bundles[0].clone());
    for arch in [Architecture::Mlp, Architecture::Transformer] {
        let p = random_model(arch, c, &data, 6);
        let a = p.predict(&bundles).unwrap();
        assert_eq!(a, p.predict(&bundles).unwrap());
        assert_eq!(a[0], a[4]);
    }
}

#[test]
fn transformer_sees_token_order() {
    let c = cfg(StateKind::Edges, OrientationKind::Quaternion, ActionMode::Difference);
    let data = examples(c, 1, 7);
    let p = random_model(Architecture::Transformer, c, &data, 7);
    let b = data[0].bundle.clone();
    let mut rev = b.clone();
    rev.state = b.state.chunks(3).rev().flatten().copied().collect();
    let out = p.predict(&[b, rev]).unwrap();
    assert_ne!(out[0], out[1]);
}

#[test]
fn null_dataset_teaches_no_motion() {
    let c = cfg(StateKind::Edges, OrientationKind::Quaternion, ActionMode::Difference);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let data: Vec<Example> = (0..320)
        .map(|_| {
            let (s, g) = scene(&mut rng, 8);
            let bundle = assemble_input(&s, &g, &make_action(&g, &g, c.action), &c).unwrap();
            Example {
                bundle,
                target: vec![0.0; 21],
            }
        })
        .collect();
    let hp = TrainConfig {
        epochs: 200,
        seed: 3,
        ..TrainConfig::default()
    };
    let bundles: Vec<_> = data.iter().map(|e| e.bundle.clone()).collect();
    let mean_norm = |p: &ModelParams| {
        p.predict(&bundles)
            .unwrap()
            .iter()
            .map(|d| d.iter().map(|x| x * x).sum::<f64>().sqrt())
            .sum::<f64>()
            / data.len() as f64
    };
    let (fresh, _) = train(Architecture::Mlp, c, &data, &[], &hp, None).unwrap();
    assert!(mean_norm(&fresh) < 1e-3, "fresh start: {}", mean_norm(&fresh));
    // from a start that predicts motion, training has to remove it
    let start = random_model(Architecture::Mlp, c, &data, 9);
    let (p, _) = train(Architecture::Mlp, c, &data, &[], &hp, Some(&start)).unwrap();
    assert!(mean_norm(&p) < 0.1 * mean_norm(&start), "{} -> {}", mean_norm(&start), mean_norm(&p));
}

fn jac_model(seed: u64) -> (ModelParams, Vec<Example>) {
    let c = cfg(StateKind::Edges, OrientationKind::AxisAngle, ActionMode::Difference);
    let data = examples(c, 2, seed);
    (random_model(Architecture::JacMlp, c, &data, seed), data)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn jacmlp_null_action_is_zero(seed in any::<u64>()) {
        let (p, data) = jac_model(seed);
        let mut b = data[0].bundle.clone();
        b.jacobian_action = [0.0; 9];
        let out = p.predict(&[b]).unwrap();
        prop_assert!(out[0].iter().all(|&x| x == 0.0));
    }

    #[test]
    fn jacmlp_is_linear_in_action(seed in any::<u64>(), alpha in -2.0f64..2.0, beta in -2.0f64..2.0) {
        let (p, data) = jac_model(seed);
        let base = data[0].bundle.clone();
        let with = |a: [f64; 9]| { let mut b = base.clone(); b.jacobian_action = a; b };
        let a = data[0].bundle.jacobian_action;
        let b = data[1].bundle.jacobian_action;
        let mix: [f64; 9] = std::array::from_fn(|i| alpha * a[i] + beta * b[i]);
        let out = p.predict(&[with(a), with(b), with(mix)]).unwrap();
        for i in 0..out[0].len() {
            let sup = alpha * out[0][i] + beta * out[1][i];
            prop_assert!((out[2][i] - sup).abs() <= 1e-12 * (1.0 + sup.abs()));
        }
    }
}

use std::f64::consts::PI;

use nalgebra::{Rotation3, Unit};
use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use super::rod::Clamps;
use super::{solve_equilibrium, RodConfiguration, RodModel, SimError};
use crate::spline::{fit_bspline, resample_equidistant, suppress_end_depth};
use crate::{DloState, GripperPair, Pose, Vec3};

/// Limits for one random move and for the reachable workspace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MoveBounds {
    /// Per-axis translation of the left gripper per move, meters.
    pub max_translation: f64,
    /// Rotation angle per gripper per move, radians.
    pub max_rotation: f64,
    /// Upper bound on gripper separation as a fraction of rod length.
    pub max_separation_ratio: f64,
    /// Lower bound on gripper separation as a fraction of rod length.
    pub min_separation_ratio: f64,
    /// Largest rotation of either gripper away from its neutral orientation.
    pub max_tilt: f64,
    /// Axis-aligned box for the left gripper position, relative to the right one.
    pub workspace_min: [f64; 3],
    pub workspace_max: [f64; 3],
    pub max_attempts: usize,
}

impl Default for MoveBounds {
    fn default() -> Self {
        Self {
            max_translation: 0.10,
            max_rotation: 30f64.to_radians(),
            max_separation_ratio: 0.95,
            min_separation_ratio: 0.3,
            max_tilt: 1.0,
            workspace_min: [0.0, -0.4, -0.3],
            workspace_max: [0.8, 0.4, 0.3],
            max_attempts: 1000,
        }
    }
}

/// Neutral orientations: right gripper identity, left gripper facing it.
fn neutral() -> (Rotation3<f64>, Rotation3<f64>) {
    (
        Rotation3::from_axis_angle(&Vec3::z_axis(), PI),
        Rotation3::identity(),
    )
}

impl MoveBounds {
    /// Checks a gripper pair against the separation, workspace and tilt
    /// limits plus the reach of the clamped interior of the rod.
    pub fn admits(&self, rod: &RodModel, g: &GripperPair) -> bool {
        let length = rod.length();
        let sep = g.separation();
        if sep > self.max_separation_ratio * length || sep < self.min_separation_ratio * length {
            return false;
        }
        let rel = g.left.t - g.right.t;
        if (0..3).any(|k| rel[k] < self.workspace_min[k] || rel[k] > self.workspace_max[k]) {
            return false;
        }
        let (nl, nr) = neutral();
        if (nl.inverse() * g.left.r).angle() > self.max_tilt
            || (nr.inverse() * g.right.r).angle() > self.max_tilt
        {
            return false;
        }
        let c = Clamps::new(rod, g);
        (c.vn1 - c.v1).norm() <= self.max_separation_ratio * (rod.n_seg - 2) as f64 * rod.rest_len
    }
}

fn random_rotation<R: Rng + ?Sized>(rng: &mut R, max_angle: f64) -> Option<Rotation3<f64>> {
    if max_angle <= 0.0 {
        return None;
    }
    let axis = loop {
        let v = Vec3::new(
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
            StandardNormal.sample(rng),
        );
        if v.norm() > 1e-9 {
            break Unit::new_normalize(v);
        }
    };
    Some(Rotation3::from_axis_angle(&axis, rng.random_range(0.0..=max_angle)))
}

/// Proposes the next gripper pair: the left gripper translates and rotates,
/// the right gripper only rotates. Rejection-samples until `bounds` admit it.
pub fn random_move<R: Rng + ?Sized>(
    rng: &mut R,
    current: &GripperPair,
    rod: &RodModel,
    bounds: &MoveBounds,
) -> Result<GripperPair, SimError> {
    for _ in 0..bounds.max_attempts {
        let mut next = *current;
        if bounds.max_translation > 0.0 {
            let m = bounds.max_translation;
            next.left.t += Vec3::new(
                rng.random_range(-m..=m),
                rng.random_range(-m..=m),
                rng.random_range(-m..=m),
            );
        }
        if let Some(dr) = random_rotation(rng, bounds.max_rotation) {
            next.left.r = dr * next.left.r;
        }
        if let Some(dr) = random_rotation(rng, bounds.max_rotation) {
            next.right.r = dr * next.right.r;
        }
        if bounds.admits(rod, &next) {
            return Ok(next);
        }
    }
    Err(SimError::BoundsTooTight(format!(
        "no admissible move after {} attempts",
        bounds.max_attempts
    )))
}

/// Starting placement: right gripper at the origin, left gripper roughly
/// facing it along +x at 55–85% of the rod length.
pub fn random_initial_pair<R: Rng + ?Sized>(
    rng: &mut R,
    rod: &RodModel,
    bounds: &MoveBounds,
) -> Result<GripperPair, SimError> {
    let (nl, nr) = neutral();
    let length = rod.length();
    for _ in 0..bounds.max_attempts {
        let sep = length * rng.random_range(0.55..0.85);
        let t = Vec3::new(
            sep,
            rng.random_range(-0.1..0.1) * length,
            rng.random_range(-0.1..0.1) * length,
        );
        let tilt = 0.5 * bounds.max_tilt;
        let left = random_rotation(rng, tilt).map_or(nl, |d| d * nl);
        let right = random_rotation(rng, tilt).map_or(nr, |d| d * nr);
        let g = GripperPair::new(Pose::new(t, left), Pose::new(Vec3::zeros(), right));
        if bounds.admits(rod, &g) {
            return Ok(g);
        }
    }
    Err(SimError::BoundsTooTight("no admissible initial placement".into()))
}

/// Synthetic sensing noise applied to the rod vertices before fitting.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ObservationNoise {
    /// Isotropic Gaussian noise, meters.
    pub sigma: f64,
    /// Depth suppression radius around each TCP; 0 disables it.
    pub end_radius: f64,
    /// Viewing direction of the simulated depth camera.
    pub depth_axis: [f64; 3],
}

impl Default for ObservationNoise {
    fn default() -> Self {
        Self {
            sigma: 0.0,
            end_radius: 0.0,
            depth_axis: [0.0, 0.0, 1.0],
        }
    }
}

/// Turns an equilibrium into an `n_points` state through the spline fit.
pub fn observe<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &RodConfiguration,
    n_points: usize,
    noise: &ObservationNoise,
) -> Result<DloState, SimError> {
    let v = &cfg.vertices;
    let (tcp_r, tcp_l) = (v[0], v[v.len() - 1]);
    let mut raw: Vec<Vec3> = v[1..v.len() - 1].to_vec();
    if noise.sigma > 0.0 {
        let normal = Normal::new(0.0, noise.sigma)
            .map_err(|e| SimError::Config(format!("noise sigma: {e}")))?;
        for p in raw.iter_mut() {
            *p += Vec3::new(normal.sample(rng), normal.sample(rng), normal.sample(rng));
        }
    }
    if noise.end_radius > 0.0 {
        raw = suppress_end_depth(&raw, tcp_r, tcp_l, noise.end_radius, Vec3::from(noise.depth_axis))?;
    }
    let fit = fit_bspline(&raw, tcp_r, tcp_l)?;
    Ok(resample_equidistant(&fit.curve, n_points)?)
}

/// Equilibria along `n_moves` random moves starting from `init`; every solve
/// is warm-started from the previous one.
pub fn generate_sequence<R: Rng + ?Sized>(
    rng: &mut R,
    rod: &RodModel,
    init: &GripperPair,
    n_moves: usize,
    n_points: usize,
    bounds: &MoveBounds,
    noise: &ObservationNoise,
) -> Result<Vec<(GripperPair, DloState)>, SimError> {
    let tag = |index: usize| move |e: SimError| SimError::Sequence {
        index,
        source: Box::new(e),
    };
    let mut out = Vec::with_capacity(n_moves + 1);
    let mut pair = *init;
    let mut eq = solve_equilibrium(rod, &pair, None).map_err(tag(0))?;
    out.push((pair, observe(rng, &eq.config, n_points, noise).map_err(tag(0))?));
    for index in 1..=n_moves {
        pair = random_move(rng, &pair, rod, bounds).map_err(tag(index))?;
        eq = solve_equilibrium(rod, &pair, Some(&eq.config)).map_err(tag(index))?;
        out.push((pair, observe(rng, &eq.config, n_points, noise).map_err(tag(index))?));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rod() -> RodModel {
        RodModel::preset("two-wire", 0.5).unwrap()
    }

    #[test]
    fn zero_bounds_keep_pose() {
        let r = rod();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let init = random_initial_pair(&mut rng, &r, &MoveBounds::default()).unwrap();
        let zero = MoveBounds {
            max_translation: 0.0,
            max_rotation: 0.0,
            ..MoveBounds::default()
        };
        assert_eq!(random_move(&mut rng, &init, &r, &zero).unwrap(), init);
    }

    #[test]
    fn separation_always_respected() {
        let r = rod();
        let b = MoveBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut g = random_initial_pair(&mut rng, &r, &b).unwrap();
        for _ in 0..10_000 {
            let next = random_move(&mut rng, &g, &r, &b).unwrap();
            assert!(next.separation() <= 0.95 * r.length());
            assert_eq!(next.right.t, g.right.t);
            for k in 0..3 {
                assert!((next.left.t[k] - g.left.t[k]).abs() <= b.max_translation);
            }
            assert!((next.left.r * g.left.r.inverse()).angle() <= b.max_rotation + 1e-12);
            assert!((next.right.r * g.right.r.inverse()).angle() <= b.max_rotation + 1e-12);
            g = next;
        }
    }

    #[test]
    fn seeded_moves_repeat() {
        let r = rod();
        let b = MoveBounds::default();
        let init = random_initial_pair(&mut ChaCha8Rng::seed_from_u64(3), &r, &b).unwrap();
        let a = random_move(&mut ChaCha8Rng::seed_from_u64(4), &init, &r, &b).unwrap();
        let c = random_move(&mut ChaCha8Rng::seed_from_u64(4), &init, &r, &b).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn impossible_bounds_fail() {
        let r = rod();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let b = MoveBounds {
            workspace_max: [-1.0, 0.0, 0.0],
            max_attempts: 20,
            ..MoveBounds::default()
        };
        assert!(matches!(
            random_initial_pair(&mut rng, &r, &b),
            Err(SimError::BoundsTooTight(_))
        ));
    }

    fn equidistant(s: &DloState) -> bool {
        let gaps: Vec<f64> = s.points().windows(2).map(|w| (w[1] - w[0]).norm()).collect();
        let mean = gaps.iter().sum::<f64>() / gaps.len() as f64;
        gaps.iter().all(|g| (g - mean).abs() <= 0.02 * mean)
    }

    #[test]
    fn sequence_lengths_and_spacing() {
        let r = rod();
        let b = MoveBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let init = random_initial_pair(&mut rng, &r, &b).unwrap();
        let noise = ObservationNoise::default();
        let single = generate_sequence(&mut rng, &r, &init, 0, 16, &b, &noise).unwrap();
        assert_eq!(single.len(), 1);
        assert_eq!(single[0].0, init);

        let seq = generate_sequence(&mut rng, &r, &init, 20, 16, &b, &noise).unwrap();
        assert_eq!(seq.len(), 21);
        for (g, s) in &seq {
            assert_eq!(s.len(), 16);
            assert!(equidistant(s));
            assert!((s.points()[0] - g.right.t).norm() < 1e-9);
            assert!((s.points()[15] - g.left.t).norm() < 1e-9);
        }
    }

    #[test]
    fn noisy_observation_stays_close() {
        let r = rod();
        let b = MoveBounds::default();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let init = random_initial_pair(&mut rng, &r, &b).unwrap();
        let eq = solve_equilibrium(&r, &init, None).unwrap();
        let clean = observe(&mut rng, &eq.config, 16, &ObservationNoise::default()).unwrap();
        let noise = ObservationNoise {
            sigma: 0.002,
            end_radius: 0.03,
            ..ObservationNoise::default()
        };
        let noisy = observe(&mut rng, &eq.config, 16, &noise).unwrap();
        let worst = clean
            .points()
            .iter()
            .zip(noisy.points())
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(worst < 0.01, "{worst}");
    }
}

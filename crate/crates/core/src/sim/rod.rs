use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use super::SimError;
use crate::{GripperPair, Mat3, Vec3};

pub const DEFAULT_SEGMENTS: usize = 32;

/// Discrete inextensible elastic rod.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RodModel {
    pub n_seg: usize,
    /// Segment length in meters.
    pub rest_len: f64,
    /// EI in N·m².
    pub bend_stiffness: f64,
    /// GJ in N·m².
    pub twist_stiffness: f64,
    /// kg/m
    pub lin_density: f64,
    /// m/s²
    pub gravity: [f64; 3],
}

/// Named material presets. Stiffness ordering: solar > two-wire > braided.
pub const PRESETS: [&str; 3] = ["two-wire", "solar", "braided"];

impl RodModel {
    pub fn preset(name: &str, length: f64) -> Result<Self, SimError> {
        let (bend, twist, density) = match name {
            "two-wire" => (6.0e-3, 4.5e-3, 0.05),
            "solar" => (1.2e-2, 9.6e-3, 0.06),
            "braided" => (2.0e-3, 1.0e-3, 0.045),
            other => return Err(SimError::Config(format!("unknown rod preset `{other}`"))),
        };
        let rod = Self {
            n_seg: DEFAULT_SEGMENTS,
            rest_len: length / DEFAULT_SEGMENTS as f64,
            bend_stiffness: bend,
            twist_stiffness: twist,
            lin_density: density,
            gravity: [0.0, 0.0, -9.81],
        };
        rod.validate()?;
        Ok(rod)
    }

    pub fn validate(&self) -> Result<(), SimError> {
        if self.n_seg < 4 {
            return Err(SimError::Config(format!("need at least 4 segments, got {}", self.n_seg)));
        }
        let positive = [
            ("rest_len", self.rest_len),
            ("bend_stiffness", self.bend_stiffness),
            ("twist_stiffness", self.twist_stiffness),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(SimError::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if !(self.lin_density >= 0.0) || !self.gravity.iter().all(|g| g.is_finite()) {
            return Err(SimError::Config("invalid density or gravity".into()));
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.n_seg as f64 * self.rest_len
    }

    pub fn gravity(&self) -> Vec3 {
        Vec3::from(self.gravity)
    }
}

/// Vertex positions plus the twist carried between the clamped ends.
#[derive(Debug, Clone, PartialEq)]
pub struct RodConfiguration {
    pub vertices: Vec<Vec3>,
    /// Total material twist angle (radians) from the right to the left end.
    pub twist: f64,
    /// Per-segment material frames, columns `(tangent, d1, d2)`.
    pub material_frames: Vec<Mat3>,
}

/// End conditions imposed by the grippers. The rod leaves the right gripper
/// along its local x-axis and enters the left gripper along the left local
/// −x-axis; material directors follow the local y-axes (negated on the left).
#[derive(Debug, Clone, Copy)]
pub(crate) struct Clamps {
    pub v0: Vec3,
    pub v1: Vec3,
    pub vn1: Vec3,
    pub vn: Vec3,
    pub t0: Vec3,
    pub u0: Vec3,
    pub t_end: Vec3,
    pub u_end: Vec3,
}

impl Clamps {
    pub fn new(rod: &RodModel, g: &GripperPair) -> Self {
        let t0 = g.right.r * Vec3::x();
        let u0 = g.right.r * Vec3::y();
        let t_end = -(g.left.r * Vec3::x());
        let u_end = -(g.left.r * Vec3::y());
        Self {
            v0: g.right.t,
            v1: g.right.t + t0 * rod.rest_len,
            vn1: g.left.t - t_end * rod.rest_len,
            vn: g.left.t,
            t0,
            u0,
            t_end,
            u_end,
        }
    }

    pub fn apply(&self, v: &mut [Vec3]) {
        let n = v.len() - 1;
        v[0] = self.v0;
        v[1] = self.v1;
        v[n - 1] = self.vn1;
        v[n] = self.vn;
    }
}

/// Rotates `u` by the minimal rotation taking unit `a` onto unit `b`.
pub(crate) fn transport(u: Vec3, a: &Vec3, b: &Vec3) -> Vec3 {
    let v = a.cross(b);
    let c = a.dot(b);
    if c <= -1.0 + 1e-12 {
        // antiparallel: any half-turn about an axis normal to a works
        return -u;
    }
    let vu = v.cross(&u);
    u + vu + v.cross(&vu) / (1.0 + c)
}

fn signed_angle(from: &Vec3, to: &Vec3, axis: &Vec3) -> f64 {
    from.cross(to).dot(axis).atan2(from.dot(to))
}

/// Angle between the director parallel-transported from the right end and
/// the left end director, taken on the branch closest to `reference`.
pub(crate) fn end_twist(v: &[Vec3], clamps: &Clamps, reference: f64) -> f64 {
    let mut u = clamps.u0;
    let mut t_prev = clamps.t0;
    for w in v.windows(2).skip(1) {
        let t = (w[1] - w[0]).normalize();
        u = transport(u, &t_prev, &t);
        u = (u - t * t.dot(&u)).normalize();
        t_prev = t;
    }
    let raw = signed_angle(&u, &clamps.u_end, &t_prev);
    let two_pi = std::f64::consts::TAU;
    raw + two_pi * ((reference - raw) / two_pi).round()
}

/// Energy contributions in joules.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyBreakdown {
    pub bending: f64,
    pub twist: f64,
    pub gravity: f64,
}

impl EnergyBreakdown {
    pub fn total(&self) -> f64 {
        self.bending + self.twist + self.gravity
    }
}

fn turning_angle(a: &Vec3, b: &Vec3) -> f64 {
    a.cross(b).norm().atan2(a.dot(b))
}

pub(crate) fn bending_energy(rod: &RodModel, v: &[Vec3]) -> f64 {
    let k = rod.bend_stiffness / (2.0 * rod.rest_len);
    v.windows(3)
        .map(|w| {
            let phi = turning_angle(&(w[1] - w[0]), &(w[2] - w[1]));
            k * phi * phi
        })
        .sum()
}

pub(crate) fn twist_energy(rod: &RodModel, twist: f64) -> f64 {
    rod.twist_stiffness * twist * twist / (2.0 * rod.length())
}

/// Gravity potential measured from the lowest position each vertex could
/// reach given the heights of the two ends, so it is never negative.
pub(crate) fn gravity_energy(rod: &RodModel, v: &[Vec3]) -> f64 {
    let g = rod.gravity();
    let gn = g.norm();
    if gn == 0.0 || rod.lin_density == 0.0 {
        return 0.0;
    }
    let up = -g / gn;
    let n = v.len() - 1;
    let (h0, hn) = (up.dot(&v[0]), up.dot(&v[n]));
    let l = rod.rest_len;
    v.iter()
        .enumerate()
        .map(|(i, p)| {
            let mass = if i == 0 || i == n { 0.5 } else { 1.0 } * rod.lin_density * l;
            let floor = (h0 - i as f64 * l).max(hn - (n - i) as f64 * l);
            mass * gn * (up.dot(p) - floor)
        })
        .sum()
}

/// Stored-energy breakdown of a configuration.
pub fn energy(rod: &RodModel, cfg: &RodConfiguration) -> EnergyBreakdown {
    EnergyBreakdown {
        bending: bending_energy(rod, &cfg.vertices),
        twist: twist_energy(rod, cfg.twist),
        gravity: gravity_energy(rod, &cfg.vertices),
    }
}

/// Total energy and twist of raw vertices under the given clamps.
pub(crate) fn energy_of(rod: &RodModel, v: &[Vec3], clamps: &Clamps, twist_ref: f64) -> (f64, f64) {
    let twist = end_twist(v, clamps, twist_ref);
    (
        bending_energy(rod, v) + twist_energy(rod, twist) + gravity_energy(rod, v),
        twist,
    )
}

/// Gradient of the total energy with respect to every vertex.
pub(crate) fn energy_gradient(
    rod: &RodModel,
    v: &[Vec3],
    clamps: &Clamps,
    twist_ref: f64,
) -> Vec<Vec3> {
    let n = v.len() - 1;
    let mut grad = vec![Vec3::zeros(); n + 1];
    let kb = rod.bend_stiffness / rod.rest_len;
    let twist = end_twist(v, clamps, twist_ref);
    let kt = rod.twist_stiffness * twist / rod.length();
    for i in 1..n {
        let a = v[i] - v[i - 1];
        let b = v[i + 1] - v[i];
        let (la, lb) = (a.norm(), b.norm());
        let (ah, bh) = (a / la, b / lb);
        let c = ah.dot(&bh);
        let s = ah.cross(&bh).norm();
        let phi = s.atan2(c);
        // φ/sin φ, finite as φ → 0
        let ratio = if s < 1e-8 { 1.0 + phi * phi / 6.0 } else { phi / s };
        let ga = -(bh - ah * c) * (kb * ratio / la);
        let gb = -(ah - bh * c) * (kb * ratio / lb);
        grad[i - 1] -= ga;
        grad[i] += ga - gb;
        grad[i + 1] += gb;

        // Holonomy gradient of the end twist.
        let kappa_b = a.cross(&b) * (2.0 / (la * lb + a.dot(&b)));
        let dm_prev = -kappa_b / (2.0 * la);
        let dm_next = kappa_b / (2.0 * lb);
        grad[i - 1] += dm_prev * kt;
        grad[i + 1] += dm_next * kt;
        grad[i] -= (dm_prev + dm_next) * kt;
    }
    let g = rod.gravity();
    if rod.lin_density > 0.0 {
        for (i, gi) in grad.iter_mut().enumerate() {
            let mass = if i == 0 || i == n { 0.5 } else { 1.0 } * rod.lin_density * rod.rest_len;
            *gi -= g * mass;
        }
    }
    grad
}

/// Material frames from parallel transport with the twist spread uniformly
/// over the segments.
pub(crate) fn material_frames(v: &[Vec3], clamps: &Clamps, twist: f64) -> Vec<Mat3> {
    let n = v.len() - 1;
    let mut frames = Vec::with_capacity(n);
    let mut u = clamps.u0;
    let mut t_prev = clamps.t0;
    for (k, w) in v.windows(2).enumerate() {
        let t = (w[1] - w[0]).normalize();
        u = transport(u, &t_prev, &t);
        u = (u - t * t.dot(&u)).normalize();
        t_prev = t;
        let theta = twist * k as f64 / (n - 1).max(1) as f64;
        let d1 = Rotation3::from_axis_angle(&nalgebra::Unit::new_unchecked(t), theta) * u;
        frames.push(Mat3::from_columns(&[t, d1, t.cross(&d1)]));
    }
    frames
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Pose;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::PI;

    fn rod() -> RodModel {
        RodModel::preset("two-wire", 0.5).unwrap()
    }

    #[test]
    fn preset_ordering() {
        let s = RodModel::preset("solar", 0.5).unwrap();
        let t = RodModel::preset("two-wire", 0.5).unwrap();
        let b = RodModel::preset("braided", 0.5).unwrap();
        assert!(s.bend_stiffness > t.bend_stiffness && t.bend_stiffness > b.bend_stiffness);
        assert!((t.length() - 0.5).abs() < 1e-15);
        assert!(RodModel::preset("hose", 0.5).is_err());
    }

    #[test]
    fn circle_bending_energy() {
        let mut r = rod();
        r.n_seg = 64;
        let radius = 0.08;
        let n = 64;
        let pts: Vec<Vec3> = (0..=n)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / n as f64;
                Vec3::new(radius * a.cos(), radius * a.sin(), 0.0)
            })
            .collect();
        // closed loop: include the turning angle at the seam too
        let mut closed = pts.clone();
        closed.push(pts[1]);
        r.rest_len = (pts[1] - pts[0]).norm();
        let e = bending_energy(&r, &closed);
        let l = 2.0 * PI * radius;
        let analytic = r.bend_stiffness * l / (2.0 * radius * radius);
        assert!((e - analytic).abs() / analytic < 0.05, "{e} vs {analytic}");

        let mut stiff = r;
        stiff.bend_stiffness *= 2.0;
        assert!((bending_energy(&stiff, &closed) - 2.0 * e).abs() <= 1e-12 * e);
    }

    fn random_clamped_config(rng: &mut ChaCha8Rng) -> (RodModel, Clamps, Vec<Vec3>) {
        let mut r = rod();
        r.n_seg = 10;
        let mut v: Vec<Vec3> = (0..=10)
            .map(|i| {
                Vec3::new(
                    0.05 * i as f64,
                    rng.random_range(-0.01..0.01),
                    rng.random_range(-0.01..0.01),
                )
            })
            .collect();
        let g = GripperPair::new(
            Pose::new(v[10], Rotation3::from_euler_angles(0.3, -0.2, PI + 0.1)),
            Pose::new(v[0], Rotation3::from_euler_angles(-0.2, 0.1, 0.2)),
        );
        let clamps = Clamps::new(&r, &g);
        clamps.apply(&mut v);
        (r, clamps, v)
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..5 {
            let (r, clamps, v) = random_clamped_config(&mut rng);
            let twist_ref = end_twist(&v, &clamps, 0.0);
            let grad = energy_gradient(&r, &v, &clamps, twist_ref);
            let h = 1e-6;
            for i in 2..v.len() - 2 {
                for k in 0..3 {
                    let mut p = v.clone();
                    p[i][k] += h;
                    let mut m = v.clone();
                    m[i][k] -= h;
                    let fd = (energy_of(&r, &p, &clamps, twist_ref).0
                        - energy_of(&r, &m, &clamps, twist_ref).0)
                        / (2.0 * h);
                    let an = grad[i][k];
                    assert!(
                        (fd - an).abs() <= 1e-6 * (1.0 + an.abs()),
                        "vertex {i} axis {k}: fd {fd} analytic {an}"
                    );
                }
            }
        }
    }

    #[test]
    fn straight_rod_has_no_energy() {
        let mut r = rod();
        r.gravity = [0.0; 3];
        let v: Vec<Vec3> = (0..=r.n_seg).map(|i| Vec3::new(r.rest_len * i as f64, 0.0, 0.0)).collect();
        let cfg = RodConfiguration {
            vertices: v,
            twist: 0.0,
            material_frames: vec![],
        };
        assert_eq!(energy(&r, &cfg).total(), 0.0);
    }

    #[test]
    fn gravity_term_is_nonnegative() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let r = rod();
        for _ in 0..50 {
            // random walk with unit-length segments
            let mut v = vec![Vec3::zeros()];
            for _ in 0..r.n_seg {
                let d = Vec3::new(rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
                v.push(v.last().unwrap() + d.normalize() * r.rest_len);
            }
            assert!(gravity_energy(&r, &v) >= -1e-15);
        }
    }
}

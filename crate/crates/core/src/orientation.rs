//! Orientation encodings. The rotation matrix is the hub: quaternions and
//! axis-angle vectors are always produced from, and turned back into, a
//! matrix.

use std::f64::consts::PI;

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::{Mat3, Vec3};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OrientationKind {
    Quaternion,
    Matrix,
    AxisAngle,
}

impl OrientationKind {
    /// Number of scalars one rotation occupies in this encoding.
    pub fn width(self) -> usize {
        match self {
            OrientationKind::Quaternion => 4,
            OrientationKind::Matrix => 9,
            OrientationKind::AxisAngle => 3,
        }
    }
}

impl std::str::FromStr for OrientationKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "quaternion" => Ok(Self::Quaternion),
            "matrix" => Ok(Self::Matrix),
            "axis-angle" => Ok(Self::AxisAngle),
            other => Err(format!("unknown orientation encoding `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OrientationRep {
    /// `(w, x, y, z)`, unit norm, `w ≥ 0`.
    Quaternion([f64; 4]),
    /// Row-major matrix entries.
    Matrix([f64; 9]),
    /// Rotation axis scaled by the angle in radians, angle in `[0, π]`.
    AxisAngle([f64; 3]),
}

impl OrientationRep {
    pub fn kind(&self) -> OrientationKind {
        match self {
            OrientationRep::Quaternion(_) => OrientationKind::Quaternion,
            OrientationRep::Matrix(_) => OrientationKind::Matrix,
            OrientationRep::AxisAngle(_) => OrientationKind::AxisAngle,
        }
    }

    pub fn as_slice(&self) -> &[f64] {
        match self {
            OrientationRep::Quaternion(q) => q,
            OrientationRep::Matrix(m) => m,
            OrientationRep::AxisAngle(a) => a,
        }
    }

    pub fn to_rotation(&self) -> Rotation3<f64> {
        match *self {
            OrientationRep::Quaternion(q) => quaternion_to_rotation(q),
            OrientationRep::Matrix(m) => Rotation3::from_matrix_unchecked(Mat3::from_row_slice(&m)),
            OrientationRep::AxisAngle(a) => axis_angle_to_rotation(Vec3::from(a)),
        }
    }
}

pub fn convert_orientation(r: &Rotation3<f64>, target: OrientationKind) -> OrientationRep {
    match target {
        OrientationKind::Quaternion => OrientationRep::Quaternion(rotation_to_quaternion(r)),
        OrientationKind::Matrix => {
            let m = r.matrix();
            let mut out = [0.0; 9];
            for i in 0..3 {
                for j in 0..3 {
                    out[3 * i + j] = m[(i, j)];
                }
            }
            OrientationRep::Matrix(out)
        }
        OrientationKind::AxisAngle => {
            OrientationRep::AxisAngle(rotation_to_axis_angle(r).into())
        }
    }
}

/// Shepperd's method followed by sign canonicalization.
pub fn rotation_to_quaternion(r: &Rotation3<f64>) -> [f64; 4] {
    let m = r.matrix();
    let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
    let q = if trace > m[(0, 0)].max(m[(1, 1)]).max(m[(2, 2)]) {
        let s = (1.0 + trace).sqrt() * 2.0;
        [
            0.25 * s,
            (m[(2, 1)] - m[(1, 2)]) / s,
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(1, 0)] - m[(0, 1)]) / s,
        ]
    } else if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
        let s = (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(2, 1)] - m[(1, 2)]) / s,
            0.25 * s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
        ]
    } else if m[(1, 1)] >= m[(2, 2)] {
        let s = (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt() * 2.0;
        [
            (m[(0, 2)] - m[(2, 0)]) / s,
            (m[(0, 1)] + m[(1, 0)]) / s,
            0.25 * s,
            (m[(1, 2)] + m[(2, 1)]) / s,
        ]
    } else {
        let s = (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt() * 2.0;
        [
            (m[(1, 0)] - m[(0, 1)]) / s,
            (m[(0, 2)] + m[(2, 0)]) / s,
            (m[(1, 2)] + m[(2, 1)]) / s,
            0.25 * s,
        ]
    };
    canonical_quaternion(q)
}

/// Normalizes and picks the sign with `w > 0`; when `w == 0` the
/// largest-magnitude vector component is made positive.
pub fn canonical_quaternion(q: [f64; 4]) -> [f64; 4] {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut q = q.map(|v| v / n);
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else {
        largest_component(&[q[1], q[2], q[3]]) < 0.0
    };
    if flip {
        q = q.map(|v| -v);
    }
    if q[0] == 0.0 {
        q[0] = 0.0; // drop a negative zero
    }
    q
}

fn largest_component(v: &[f64; 3]) -> f64 {
    let mut best = v[0];
    for &c in &v[1..] {
        if c.abs() > best.abs() {
            best = c;
        }
    }
    best
}

pub fn quaternion_to_rotation(q: [f64; 4]) -> Rotation3<f64> {
    let n = q.iter().map(|v| v * v).sum::<f64>().sqrt();
    let [w, x, y, z] = q.map(|v| v / n);
    let m = Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    );
    Rotation3::from_matrix_unchecked(m)
}

pub fn rotation_to_axis_angle(r: &Rotation3<f64>) -> Vec3 {
    let [w, x, y, z] = rotation_to_quaternion(r);
    let v = Vec3::new(x, y, z);
    let s = v.norm();
    if s == 0.0 {
        return Vec3::zeros();
    }
    if w.abs() <= 1e-12 * s {
        // half turn: ±axis describe the same rotation, pick the one whose
        // largest-magnitude component is positive
        let axis = v / s;
        let sign = if largest_component(&[axis.x, axis.y, axis.z]) < 0.0 { -1.0 } else { 1.0 };
        return axis * (sign * PI);
    }
    let angle = 2.0 * s.atan2(w);
    v * (angle / s)
}

pub fn axis_angle_to_rotation(a: Vec3) -> Rotation3<f64> {
    let angle = a.norm();
    if angle == 0.0 {
        return Rotation3::identity();
    }
    let half = 0.5 * angle;
    let v = a * (half.sin() / angle);
    quaternion_to_rotation([half.cos(), v.x, v.y, v.z])
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_rotation(rng: &mut impl Rng) -> Rotation3<f64> {
        // Uniform unit quaternion from a normalized Gaussian-free box draw.
        loop {
            let q: [f64; 4] = std::array::from_fn(|_| rng.random_range(-1.0..1.0));
            let n2: f64 = q.iter().map(|v| v * v).sum();
            if n2 > 1e-3 && n2 <= 1.0 {
                return quaternion_to_rotation(q);
            }
        }
    }

    fn frob(a: &Rotation3<f64>, b: &Rotation3<f64>) -> f64 {
        (a.matrix() - b.matrix()).norm()
    }

    #[test]
    fn identity_encodings() {
        let id = Rotation3::identity();
        assert_eq!(
            convert_orientation(&id, OrientationKind::Quaternion),
            OrientationRep::Quaternion([1.0, 0.0, 0.0, 0.0])
        );
        assert_eq!(
            convert_orientation(&id, OrientationKind::AxisAngle),
            OrientationRep::AxisAngle([0.0, 0.0, 0.0])
        );
    }

    #[test]
    fn quarter_turn_about_z() {
        let r = Rotation3::from_axis_angle(&Vec3::z_axis(), PI / 2.0);
        let OrientationRep::AxisAngle(a) = convert_orientation(&r, OrientationKind::AxisAngle)
        else {
            unreachable!()
        };
        assert!(a[0].abs() < 1e-15 && a[1].abs() < 1e-15);
        assert!((a[2] - PI / 2.0).abs() < 1e-14);
    }

    #[test]
    fn half_turn_tie_break() {
        for axis in [Vec3::x(), -Vec3::y(), Vec3::new(0.0, -0.6, 0.8)] {
            let r = Rotation3::from_axis_angle(&nalgebra::Unit::new_normalize(axis), PI);
            let a = rotation_to_axis_angle(&r);
            assert!((a.norm() - PI).abs() < 1e-9);
            assert!(largest_component(&[a.x, a.y, a.z]) > 0.0, "{a:?}");
            assert!(frob(&axis_angle_to_rotation(a), &r) < 1e-9);
        }
    }

    #[test]
    fn random_round_trips() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let r = random_rotation(&mut rng);
            for kind in [
                OrientationKind::Quaternion,
                OrientationKind::Matrix,
                OrientationKind::AxisAngle,
            ] {
                let rep = convert_orientation(&r, kind);
                let back = rep.to_rotation();
                assert!(frob(&back, &r) <= 1e-9, "{kind:?}");
                // rep → matrix → rep
                let again = convert_orientation(&back, kind);
                let diff = rep
                    .as_slice()
                    .iter()
                    .zip(again.as_slice())
                    .map(|(a, b)| (a - b).abs())
                    .fold(0.0, f64::max);
                assert!(diff <= 1e-9, "{kind:?}: {diff}");
            }
            let OrientationRep::Quaternion(q) = convert_orientation(&r, OrientationKind::Quaternion)
            else {
                unreachable!()
            };
            assert!(q[0] >= 0.0);
            assert!((q.iter().map(|v| v * v).sum::<f64>() - 1.0).abs() < 1e-9);
            let aa = rotation_to_axis_angle(&r);
            assert!(aa.norm() <= PI + 1e-12);
        }
    }
}

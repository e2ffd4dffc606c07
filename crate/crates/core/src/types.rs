use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::{Mat3, ReprError, Vec3};

/// Shape of the DLO as an ordered point sequence, right gripper end first.
/// Serialized as a list of `[x, y, z]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<[f64; 3]>", into = "Vec<[f64; 3]>")]
pub struct DloState {
    points: Vec<Vec3>,
}

impl DloState {
    pub fn new(points: Vec<Vec3>) -> Result<Self, ReprError> {
        if points.len() < 3 {
            return Err(ReprError::InvalidState(format!(
                "a state needs at least 3 points, got {}",
                points.len()
            )));
        }
        if points.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(ReprError::InvalidState("non-finite coordinate".into()));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Vec3] {
        &self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn into_points(self) -> Vec<Vec3> {
        self.points
    }

    pub fn translated(&self, v: &Vec3) -> Self {
        Self {
            points: self.points.iter().map(|p| p + v).collect(),
        }
    }

    /// Row-major `n × 3` coordinates.
    pub fn flat(&self) -> Vec<f64> {
        self.points.iter().flat_map(|p| [p.x, p.y, p.z]).collect()
    }

    pub fn from_flat(values: &[f64]) -> Result<Self, ReprError> {
        if values.len() % 3 != 0 {
            return Err(ReprError::InvalidState(format!(
                "flat coordinate count {} is not a multiple of 3",
                values.len()
            )));
        }
        Self::new(
            values
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect(),
        )
    }
}

/// Gripper TCP pose. The rotation is kept as a proper orthonormal matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub t: Vec3,
    pub r: Rotation3<f64>,
}

impl Pose {
    pub fn new(t: Vec3, r: Rotation3<f64>) -> Self {
        Self { t, r }
    }

    /// Builds a pose from a raw matrix, checking orthonormality and handedness.
    pub fn from_matrix(t: Vec3, m: Mat3) -> Result<Self, ReprError> {
        check_rotation(&m)?;
        Ok(Self {
            t,
            r: Rotation3::from_matrix_unchecked(m),
        })
    }

    pub fn identity() -> Self {
        Self {
            t: Vec3::zeros(),
            r: Rotation3::identity(),
        }
    }
}

pub(crate) fn check_rotation(m: &Mat3) -> Result<(), ReprError> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(ReprError::InvalidPose("non-finite rotation entry".into()));
    }
    let ortho = (m.transpose() * m - Mat3::identity()).abs().max();
    let det = m.determinant();
    if ortho > 1e-9 || (det - 1.0).abs() > 1e-9 {
        return Err(ReprError::InvalidPose(format!(
            "not a proper rotation (|RᵀR − I|max = {ortho:.3e}, det = {det:.12})"
        )));
    }
    Ok(())
}

/// Poses of both grippers holding the DLO.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "GripperPairRecord", into = "GripperPairRecord")]
pub struct GripperPair {
    pub left: Pose,
    pub right: Pose,
}

impl GripperPair {
    pub fn new(left: Pose, right: Pose) -> Self {
        Self { left, right }
    }

    pub fn separation(&self) -> f64 {
        (self.left.t - self.right.t).norm()
    }

    pub fn translated(&self, v: &Vec3) -> Self {
        Self {
            left: Pose::new(self.left.t + v, self.left.r),
            right: Pose::new(self.right.t + v, self.right.r),
        }
    }
}

impl From<DloState> for Vec<[f64; 3]> {
    fn from(s: DloState) -> Self {
        s.points.iter().map(|p| [p.x, p.y, p.z]).collect()
    }
}

impl TryFrom<Vec<[f64; 3]>> for DloState {
    type Error = ReprError;

    fn try_from(v: Vec<[f64; 3]>) -> Result<Self, ReprError> {
        DloState::new(v.into_iter().map(Vec3::from).collect())
    }
}

/// Serialized pose: position plus row-major rotation matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PoseRecord {
    pub t: [f64; 3],
    pub r: [f64; 9],
}

impl From<&Pose> for PoseRecord {
    fn from(p: &Pose) -> Self {
        let m = p.r.matrix();
        let mut r = [0.0; 9];
        for i in 0..3 {
            for j in 0..3 {
                r[3 * i + j] = m[(i, j)];
            }
        }
        Self {
            t: [p.t.x, p.t.y, p.t.z],
            r,
        }
    }
}

impl TryFrom<&PoseRecord> for Pose {
    type Error = ReprError;

    fn try_from(rec: &PoseRecord) -> Result<Self, ReprError> {
        Pose::from_matrix(Vec3::from(rec.t), Mat3::from_row_slice(&rec.r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GripperPairRecord {
    pub left: PoseRecord,
    pub right: PoseRecord,
}

impl From<&GripperPair> for GripperPairRecord {
    fn from(g: &GripperPair) -> Self {
        Self {
            left: (&g.left).into(),
            right: (&g.right).into(),
        }
    }
}

impl TryFrom<&GripperPairRecord> for GripperPair {
    type Error = ReprError;

    fn try_from(rec: &GripperPairRecord) -> Result<Self, ReprError> {
        Ok(GripperPair::new(
            Pose::try_from(&rec.left)?,
            Pose::try_from(&rec.right)?,
        ))
    }
}

impl From<GripperPair> for GripperPairRecord {
    fn from(g: GripperPair) -> Self {
        (&g).into()
    }
}

impl TryFrom<GripperPairRecord> for GripperPair {
    type Error = ReprError;

    fn try_from(rec: GripperPairRecord) -> Result<Self, ReprError> {
        GripperPair::try_from(&rec)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn state_rejects_short_and_nonfinite() {
        assert!(DloState::new(vec![Vec3::zeros(); 2]).is_err());
        let mut pts = vec![Vec3::zeros(); 4];
        pts[2].y = f64::NAN;
        assert!(DloState::new(pts).is_err());
    }

    #[test]
    fn pose_rejects_reflection() {
        let m = Mat3::from_diagonal(&Vec3::new(1.0, 1.0, -1.0));
        assert!(Pose::from_matrix(Vec3::zeros(), m).is_err());
    }

    #[test]
    fn pose_record_is_row_major() {
        let r = Rotation3::from_axis_angle(&Vec3::z_axis(), 0.3);
        let rec = PoseRecord::from(&Pose::new(Vec3::new(1.0, 2.0, 3.0), r));
        assert_eq!(rec.r[1], r.matrix()[(0, 1)]);
        assert_eq!(Pose::try_from(&rec).unwrap().r, r);
    }
}

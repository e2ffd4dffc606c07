//! Reference frames, state/action encodings and feature assembly.
//!
//! All positional quantities handed to a model are expressed in a frame
//! centred on the right TCP whose axes stay aligned with the world (base)
//! frame, so gravity keeps its direction. The right gripper never translates
//! within a move; an action carries the left translation and both rotations.

use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::orientation::{convert_orientation, rotation_to_axis_angle, OrientationKind};
use crate::{DloState, GripperPair, Pose, ReprError, Vec3};

/// Expresses the state in the right-gripper frame (pure translation).
pub fn to_gripper_frame(state: &DloState, grippers: &GripperPair) -> DloState {
    state.translated(&-grippers.right.t)
}

pub fn points_to_edges(points: &[Vec3]) -> Result<Vec<Vec3>, ReprError> {
    if points.len() < 2 {
        return Err(ReprError::InvalidState(format!(
            "need at least 2 points to form edges, got {}",
            points.len()
        )));
    }
    Ok(points.windows(2).map(|w| w[1] - w[0]).collect())
}

pub fn edges_to_points(edges: &[Vec3], anchor: Vec3) -> Vec<Vec3> {
    let mut out = Vec::with_capacity(edges.len() + 1);
    let mut p = anchor;
    out.push(p);
    for e in edges {
        p += e;
        out.push(p);
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum StateKind {
    Points,
    Edges,
}

impl std::str::FromStr for StateKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "points" => Ok(Self::Points),
            "edges" => Ok(Self::Edges),
            other => Err(format!("unknown state representation `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ActionMode {
    EndPose,
    Difference,
}

impl std::str::FromStr for ActionMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "end-pose" => Ok(Self::EndPose),
            "difference" => Ok(Self::Difference),
            other => Err(format!("unknown action mode `{other}`")),
        }
    }
}

/// A gripper move.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Action {
    /// Target left position and both target orientations.
    EndPose {
        left_t: Vec3,
        left_r: Rotation3<f64>,
        right_r: Rotation3<f64>,
    },
    /// `(t_next − t, R⁻¹ R_next)` for the left arm, `R⁻¹ R_next` for the right.
    Difference {
        left_dt: Vec3,
        left_dr: Rotation3<f64>,
        right_dr: Rotation3<f64>,
    },
}

impl Action {
    pub fn mode(&self) -> ActionMode {
        match self {
            Action::EndPose { .. } => ActionMode::EndPose,
            Action::Difference { .. } => ActionMode::Difference,
        }
    }

    /// Gripper poses after applying this action from `prev`.
    pub fn apply(&self, prev: &GripperPair) -> GripperPair {
        match *self {
            Action::EndPose {
                left_t,
                left_r,
                right_r,
            } => GripperPair::new(
                Pose::new(left_t, left_r),
                Pose::new(prev.right.t, right_r),
            ),
            Action::Difference {
                left_dt,
                left_dr,
                right_dr,
            } => GripperPair::new(
                Pose::new(prev.left.t + left_dt, prev.left.r * left_dr),
                Pose::new(prev.right.t, prev.right.r * right_dr),
            ),
        }
    }

    /// Builds a difference action from the 9-vector
    /// `(Δt^L, axis-angle^L, axis-angle^R)`.
    pub fn from_difference_vector(v: &[f64; 9]) -> Self {
        use crate::orientation::axis_angle_to_rotation;
        Action::Difference {
            left_dt: Vec3::new(v[0], v[1], v[2]),
            left_dr: axis_angle_to_rotation(Vec3::new(v[3], v[4], v[5])),
            right_dr: axis_angle_to_rotation(Vec3::new(v[6], v[7], v[8])),
        }
    }

    /// Inverse of [`Action::from_difference_vector`]; `None` for end poses.
    pub fn difference_vector(&self) -> Option<[f64; 9]> {
        use crate::orientation::rotation_to_axis_angle;
        match *self {
            Action::EndPose { .. } => None,
            Action::Difference {
                left_dt,
                left_dr,
                right_dr,
            } => {
                let (l, r) = (rotation_to_axis_angle(&left_dr), rotation_to_axis_angle(&right_dr));
                Some([left_dt.x, left_dt.y, left_dt.z, l.x, l.y, l.z, r.x, r.y, r.z])
            }
        }
    }
}

pub fn make_action(prev: &GripperPair, next: &GripperPair, mode: ActionMode) -> Action {
    match mode {
        ActionMode::EndPose => Action::EndPose {
            left_t: next.left.t,
            left_r: next.left.r,
            right_r: next.right.r,
        },
        ActionMode::Difference => Action::Difference {
            left_dt: next.left.t - prev.left.t,
            left_dr: relative(&prev.left.r, &next.left.r),
            right_dr: relative(&prev.right.r, &next.right.r),
        },
    }
}

/// `a⁻¹ b`, exactly the identity when the two rotations are equal.
fn relative(a: &Rotation3<f64>, b: &Rotation3<f64>) -> Rotation3<f64> {
    if a == b {
        Rotation3::identity()
    } else {
        a.inverse() * b
    }
}

/// Which encodings a model consumes, plus the point count it was built for.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RepresentationConfig {
    pub state: StateKind,
    pub orientation: OrientationKind,
    pub action: ActionMode,
    pub n_points: usize,
}

impl RepresentationConfig {
    /// Number of 3-vectors in the state part (points or edges).
    pub fn state_elements(&self) -> usize {
        match self.state {
            StateKind::Points => self.n_points,
            StateKind::Edges => self.n_points - 1,
        }
    }

    pub fn state_width(&self) -> usize {
        3 * self.state_elements()
    }

    /// Two current orientations plus two action orientations.
    pub fn rotation_width(&self) -> usize {
        4 * self.orientation.width()
    }

    pub const LEFT_WIDTH: usize = 6;
    pub const JACOBIAN_ACTION_WIDTH: usize = 9;
}

/// Model-ready flattening of `(state, grippers, action)`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureBundle {
    pub cfg: RepresentationConfig,
    /// Points or edges in the right-gripper frame, row-major.
    pub state: Vec<f64>,
    /// `t^L − t^R`.
    pub left_position: [f64; 3],
    /// End-pose: `t^L_next − t^R`; difference: `t^L_next − t^L`.
    pub left_motion: [f64; 3],
    /// `R^L`, `R^R` in the configured encoding.
    pub pose_rotations: Vec<f64>,
    /// End-pose: `R^L_next`, `R^R_next`; difference: the relative rotations.
    pub action_rotations: Vec<f64>,
    /// Difference-mode action as `(Δt^L, axis-angle^L, axis-angle^R)`,
    /// zero for a null move whatever `cfg` says.
    pub jacobian_action: [f64; 9],
}

impl FeatureBundle {
    /// `left_position ++ left_motion`.
    pub fn left_block(&self) -> [f64; 6] {
        let mut out = [0.0; 6];
        out[..3].copy_from_slice(&self.left_position);
        out[3..].copy_from_slice(&self.left_motion);
        out
    }

    /// `pose_rotations ++ action_rotations`.
    pub fn rotation_block(&self) -> Vec<f64> {
        let mut out = self.pose_rotations.clone();
        out.extend_from_slice(&self.action_rotations);
        out
    }

    /// Action part of the bundle as the model sees it.
    pub fn action_vector(&self) -> Vec<f64> {
        let mut out = self.left_motion.to_vec();
        out.extend_from_slice(&self.action_rotations);
        out
    }
}

/// Encodes a local-frame state in the configured state representation.
pub fn encode_state(local: &DloState, kind: StateKind) -> Vec<f64> {
    match kind {
        StateKind::Points => local.flat(),
        StateKind::Edges => local
            .points()
            .windows(2)
            .flat_map(|w| {
                let e = w[1] - w[0];
                [e.x, e.y, e.z]
            })
            .collect(),
    }
}

/// Applies a predicted change of the encoded state to a local-frame state.
/// Edge predictions are integrated from the right TCP, the frame origin.
pub fn apply_delta(
    prev_local: &DloState,
    delta: &[f64],
    kind: StateKind,
) -> Result<DloState, ReprError> {
    let encoded = encode_state(prev_local, kind);
    if encoded.len() != delta.len() {
        return Err(ReprError::Config(format!(
            "delta has {} entries, state encoding has {}",
            delta.len(),
            encoded.len()
        )));
    }
    let next: Vec<f64> = encoded.iter().zip(delta).map(|(a, d)| a + d).collect();
    match kind {
        StateKind::Points => DloState::from_flat(&next),
        StateKind::Edges => {
            let edges: Vec<Vec3> = next
                .chunks_exact(3)
                .map(|c| Vec3::new(c[0], c[1], c[2]))
                .collect();
            DloState::new(edges_to_points(&edges, Vec3::zeros()))
        }
    }
}

/// Training target: change of the encoded local-frame state.
pub fn encode_delta(
    prev_local: &DloState,
    next_local: &DloState,
    kind: StateKind,
) -> Vec<f64> {
    let a = encode_state(prev_local, kind);
    let b = encode_state(next_local, kind);
    b.iter().zip(&a).map(|(b, a)| b - a).collect()
}

fn push_rotation(out: &mut Vec<f64>, r: &Rotation3<f64>, kind: OrientationKind) {
    out.extend_from_slice(convert_orientation(r, kind).as_slice());
}

pub fn assemble_input(
    state: &DloState,
    grippers: &GripperPair,
    action: &Action,
    cfg: &RepresentationConfig,
) -> Result<FeatureBundle, ReprError> {
    if state.len() != cfg.n_points {
        return Err(ReprError::Config(format!(
            "state has {} points, representation expects {}",
            state.len(),
            cfg.n_points
        )));
    }
    if action.mode() != cfg.action {
        return Err(ReprError::Config(format!(
            "action is {:?}, representation expects {:?}",
            action.mode(),
            cfg.action
        )));
    }
    let local = to_gripper_frame(state, grippers);
    let origin = grippers.right.t;
    let next = action.apply(grippers);

    let left_position: [f64; 3] = (grippers.left.t - origin).into();
    let (left_motion, action_rots): ([f64; 3], [Rotation3<f64>; 2]) = match *action {
        Action::EndPose {
            left_t,
            left_r,
            right_r,
        } => ((left_t - origin).into(), [left_r, right_r]),
        Action::Difference {
            left_dt,
            left_dr,
            right_dr,
        } => (left_dt.into(), [left_dr, right_dr]),
    };

    let mut pose_rotations = Vec::with_capacity(2 * cfg.orientation.width());
    push_rotation(&mut pose_rotations, &grippers.left.r, cfg.orientation);
    push_rotation(&mut pose_rotations, &grippers.right.r, cfg.orientation);
    let mut action_rotations = Vec::with_capacity(2 * cfg.orientation.width());
    for r in &action_rots {
        push_rotation(&mut action_rotations, r, cfg.orientation);
    }

    let Action::Difference {
        left_dt,
        left_dr,
        right_dr,
    } = make_action(grippers, &next, ActionMode::Difference)
    else {
        unreachable!()
    };
    let mut jacobian_action = [0.0; 9];
    jacobian_action[..3].copy_from_slice(left_dt.as_slice());
    jacobian_action[3..6].copy_from_slice(rotation_to_axis_angle(&left_dr).as_slice());
    jacobian_action[6..].copy_from_slice(rotation_to_axis_angle(&right_dr).as_slice());

    Ok(FeatureBundle {
        cfg: *cfg,
        state: encode_state(&local, cfg.state),
        left_position,
        left_motion,
        pose_rotations,
        action_rotations,
        jacobian_action,
    })
}

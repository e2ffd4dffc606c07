//! Building blocks for learning quasi-static models of a deformable linear
//! object (DLO) held by two grippers.
//!
//! - [`types`], [`orientation`], [`repr`]: states, gripper poses, actions and
//!   the flattening of all of them into model-ready feature bundles.
//! - [`spline`]: B-spline fitting, arc-length resampling and the curve metric.
//! - [`sim`]: an elastic-rod equilibrium solver used as data source and
//!   ground truth.
//! - [`data`]: sample pairing, augmentation, length scaling and persistence.

pub mod data;
pub mod orientation;
pub mod repr;
pub mod sim;
pub mod spline;
pub mod types;

pub use orientation::{OrientationKind, OrientationRep};
pub use repr::{
    assemble_input, edges_to_points, make_action, points_to_edges, to_gripper_frame, Action,
    ActionMode, FeatureBundle, RepresentationConfig, StateKind,
};
pub use types::{DloState, GripperPair, Pose};

pub type Vec3 = nalgebra::Vector3<f64>;
pub type Mat3 = nalgebra::Matrix3<f64>;

/// Errors raised by the representation layer.
#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ReprError {
    #[error("invalid state: {0}")]
    InvalidState(String),
    #[error("invalid pose: {0}")]
    InvalidPose(String),
    #[error("configuration error: {0}")]
    Config(String),
}

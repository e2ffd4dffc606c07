//! Sampling-based shape control: a cross-entropy search over gripper moves
//! scored by a learned forward model, and a closed loop that executes the
//! chosen move on the rod simulator.

pub mod cem;
pub mod shaping;

pub use cem::{cem_optimize, cem_update, select_elites, ActionDistribution, ActionVector, CemConfig, CemOutcome};
pub use shaping::{execute_closed_loop, plan, shape_cost, ClosedLoopResult, PlanResult, Reach, Scene};

#[derive(Debug, thiserror::Error)]
pub enum PlanError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Model(#[from] dlo_neuro::NeuroError),
    #[error(transparent)]
    Sim(#[from] dlo_core::sim::SimError),
    #[error(transparent)]
    Spline(#[from] dlo_core::spline::SplineError),
    #[error("step {step} failed after {} completed steps: {source}", completed.len())]
    Step {
        step: usize,
        source: Box<PlanError>,
        completed: Vec<shaping::ClosedLoopStep>,
    },
}

//! Quasi-static elastic-rod oracle standing in for the physical rig.
//!
//! [`solve_equilibrium`] finds the minimal-energy shape of an inextensible rod
//! whose end positions and end tangents are clamped by the grippers;
//! [`random_move`] and [`generate_sequence`] follow the random-move
//! collection protocol.

mod moves;
mod rod;
mod solver;

pub use moves::{generate_sequence, observe, random_initial_pair, random_move, MoveBounds, ObservationNoise};
pub use rod::{energy, EnergyBreakdown, RodConfiguration, RodModel, DEFAULT_SEGMENTS, PRESETS};
pub use solver::{solve_equilibrium, Equilibrium, SolveStats, SolverOptions};

#[derive(Debug, thiserror::Error, Clone)]
pub enum SimError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("infeasible gripper placement: {0}")]
    Infeasible(String),
    #[error("solver did not converge after {iterations} iterations (projected gradient {residual:.3e})")]
    NonConvergence {
        iterations: usize,
        residual: f64,
        last: Box<RodConfiguration>,
    },
    #[error("move sampling failed: {0}")]
    BoundsTooTight(String),
    #[error("sequence entry {index}: {source}")]
    Sequence {
        index: usize,
        #[source]
        source: Box<SimError>,
    },
    #[error("resampling failed: {0}")]
    Spline(#[from] crate::spline::SplineError),
}

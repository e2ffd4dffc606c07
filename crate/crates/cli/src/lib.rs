//! Experiment driver behind the `dlo` binary. Every subcommand is a plain
//! function here so that tests can run the same pipeline in-process.

pub mod commands;
pub mod config;

pub use commands::{
    bench_models, evaluate_model, generate_dataset, plan_task, train_model, EvalFile, GenReport,
    PlanFile, TargetSpec, TaskFile, TrainOutcome,
};
pub use config::ExperimentConfig;

use dlo_core::data::DataError;
use dlo_core::sim::SimError;
use dlo_neuro::NeuroError;
use dlo_planner::PlanError;

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Data(_) => 3,
            CliError::Numerical(_) => 4,
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Data(e.to_string())
    }
}

impl From<DataError> for CliError {
    fn from(e: DataError) -> Self {
        match e {
            DataError::Config(_) => CliError::Config(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

impl From<SimError> for CliError {
    fn from(e: SimError) -> Self {
        match e {
            SimError::Config(_) | SimError::BoundsTooTight(_) => CliError::Config(e.to_string()),
            _ => CliError::Numerical(e.to_string()),
        }
    }
}

impl From<NeuroError> for CliError {
    fn from(e: NeuroError) -> Self {
        match e {
            NeuroError::NaN { .. } => CliError::Numerical(e.to_string()),
            NeuroError::Io(_) | NeuroError::Format(_) => CliError::Data(e.to_string()),
            NeuroError::Data(d) => d.into(),
            _ => CliError::Config(e.to_string()),
        }
    }
}

impl From<PlanError> for CliError {
    fn from(e: PlanError) -> Self {
        match e {
            PlanError::Config(m) => CliError::Config(m),
            PlanError::Model(m) => m.into(),
            PlanError::Sim(s) => s.into(),
            PlanError::Spline(s) => CliError::Numerical(s.to_string()),
            PlanError::Step { step, source, completed } => {
                let inner = CliError::from(*source);
                let msg = format!("step {step} (after {} completed): {inner}", completed.len());
                match inner {
                    CliError::Config(_) => CliError::Config(msg),
                    CliError::Data(_) => CliError::Data(msg),
                    CliError::Numerical(_) => CliError::Numerical(msg),
                }
            }
        }
    }
}

use std::path::Path;

use dlo_core::sim::{MoveBounds, ObservationNoise, RodModel};
use dlo_core::{ActionMode, OrientationKind, RepresentationConfig, StateKind};
use dlo_neuro::train::TrainConfig;
use dlo_neuro::Architecture;
use dlo_planner::CemConfig;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::CliError;

/// Environment variable naming the default config file.
pub const CONFIG_ENV: &str = "DLO_CONFIG";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RodSection {
    pub preset: String,
    pub length: f64,
}

impl Default for RodSection {
    fn default() -> Self {
        Self {
            preset: "two-wire".into(),
            length: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataSection {
    pub n_points: usize,
    pub sequences: usize,
    pub moves: usize,
    /// Train, val, test fractions of the sequences.
    pub split: [f64; 3],
    pub augment: bool,
    /// Largest fraction of failed sequences before gen-data gives up.
    pub max_failure_rate: f64,
    pub bounds: MoveBounds,
    pub noise: ObservationNoise,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            n_points: 16,
            sequences: 10,
            moves: 20,
            split: [0.7, 0.15, 0.15],
            augment: false,
            max_failure_rate: 0.05,
            bounds: MoveBounds::default(),
            noise: ObservationNoise::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RepresentationSection {
    pub state: StateKind,
    pub orientation: OrientationKind,
    pub action: ActionMode,
}

impl Default for RepresentationSection {
    fn default() -> Self {
        Self {
            state: StateKind::Edges,
            orientation: OrientationKind::Quaternion,
            action: ActionMode::Difference,
        }
    }
}

/// `hyper.seed` is ignored; training uses the top-level seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelSection {
    pub arch: Architecture,
    pub fraction: f64,
    pub hyper: TrainConfig,
}

impl Default for ModelSection {
    fn default() -> Self {
        Self {
            arch: Architecture::Mlp,
            fraction: 1.0,
            hyper: TrainConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct ScalingSection {
    pub l_train: Option<f64>,
    pub l_test: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanSection {
    pub steps: usize,
    pub cem: CemConfig,
}

impl Default for PlanSection {
    fn default() -> Self {
        Self {
            steps: 1,
            cem: CemConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BenchSection {
    pub batches: Vec<usize>,
    pub reps: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            batches: vec![1, 16, 64, 256],
            reps: 100,
            warmup: 10,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub rod: RodSection,
    pub data: DataSection,
    pub representation: RepresentationSection,
    pub model: ModelSection,
    pub scaling: ScalingSection,
    pub plan: PlanSection,
    pub bench: BenchSection,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            rod: RodSection::default(),
            data: DataSection::default(),
            representation: RepresentationSection::default(),
            model: ModelSection::default(),
            scaling: ScalingSection::default(),
            plan: PlanSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(format!("config: {e}")))
    }

    /// Reads `path`, else the file named by [`CONFIG_ENV`], else defaults.
    pub fn load(path: Option<&Path>) -> Result<Self, CliError> {
        let env = std::env::var_os(CONFIG_ENV);
        let chosen = path.map(Path::to_path_buf).or_else(|| env.map(Into::into));
        match chosen {
            None => Ok(Self::default()),
            Some(p) => {
                let text = std::fs::read_to_string(&p)
                    .map_err(|e| CliError::Config(format!("cannot read config {}: {e}", p.display())))?;
                Self::from_toml(&text)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// SHA-256 of the resolved configuration, hex encoded.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn rod(&self) -> Result<RodModel, CliError> {
        RodModel::preset(&self.rod.preset, self.rod.length).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn representation(&self, n_points: usize) -> RepresentationConfig {
        RepresentationConfig {
            state: self.representation.state,
            orientation: self.representation.orientation,
            action: self.representation.action,
            n_points,
        }
    }

    /// Training hyperparameters with the experiment seed.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            seed: self.seed,
            ..self.model.hyper.clone()
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.rod()?;
        if self.data.n_points < 3 {
            return Err(CliError::Config("data.n_points must be at least 3".into()));
        }
        if !(self.model.fraction > 0.0 && self.model.fraction <= 1.0) {
            return Err(CliError::Config("model.fraction must be in (0, 1]".into()));
        }
        self.plan.cem.validate().map_err(|e| CliError::Config(e.to_string()))?;
        Ok(())
    }
}

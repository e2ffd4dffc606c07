use std::path::{Path, PathBuf};

use dlo_core::data::{
    augment_no_motion, pair_samples, split_by_sequence, subsample_fraction, Dataset, DatasetHeader, Split,
    DATASET_VERSION,
};
use dlo_core::sim::{generate_sequence, random_initial_pair, random_move};
use dlo_core::{DloState, GripperPair};
use dlo_neuro::eval::{benchmark_inference, evaluate, BenchRow, ErrorReport, ErrorSummary};
use dlo_neuro::train::{encode_examples, train, History};
use dlo_neuro::ModelParams;
use dlo_planner::{execute_closed_loop, ActionVector, ClosedLoopResult, Scene};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::{CliError, ExperimentConfig};

pub const EVAL_FORMAT: &str = "dlo-eval";
pub const PLAN_FORMAT: &str = "dlo-plan";
pub const REPORT_VERSION: u32 = 1;

/// `path` with `suffix` appended to its file name.
pub fn sibling(path: &Path, suffix: &str) -> PathBuf {
    let mut name = path.file_name().unwrap_or_default().to_os_string();
    name.push(suffix);
    path.with_file_name(name)
}

/// Writes the resolved config next to an artifact.
pub fn write_config_sidecar(cfg: &ExperimentConfig, artifact: &Path) -> Result<PathBuf, CliError> {
    let path = sibling(artifact, ".config.toml");
    let text = format!("# config_hash = \"{}\"\n{}", cfg.hash(), cfg.to_toml());
    std::fs::write(&path, text)?;
    Ok(path)
}

fn sequence_rng(seed: u64, index: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index as u64);
    rng
}

pub struct GenReport {
    pub dataset: Dataset,
    /// Sequence index and error message of every failed sequence.
    pub failures: Vec<(usize, String)>,
    pub n_paired: usize,
}

/// Simulates `cfg.data.sequences` random-move sequences, pairs, splits and
/// optionally augments them. Each sequence has its own random stream, so the
/// result does not depend on `jobs`.
pub fn generate_dataset(cfg: &ExperimentConfig, jobs: usize) -> Result<GenReport, CliError> {
    cfg.validate()?;
    let rod = cfg.rod()?;
    let d = &cfg.data;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs.max(1))
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<Result<Vec<_>, String>> = pool.install(|| {
        (0..d.sequences)
            .into_par_iter()
            .map(|i| {
                let mut rng = sequence_rng(cfg.seed, i);
                let init = random_initial_pair(&mut rng, &rod, &d.bounds).map_err(|e| e.to_string())?;
                let seq = generate_sequence(&mut rng, &rod, &init, d.moves, d.n_points, &d.bounds, &d.noise)
                    .map_err(|e| e.to_string())?;
                Ok(pair_samples(&seq, i as u64))
            })
            .collect()
    });
    let mut samples = vec![];
    let mut failures = vec![];
    for (i, r) in results.into_iter().enumerate() {
        match r {
            Ok(s) => samples.extend(s),
            Err(e) => failures.push((i, e)),
        }
    }
    if failures.len() as f64 > d.max_failure_rate * d.sequences as f64 {
        let list: Vec<String> = failures.iter().map(|(i, e)| format!("sequence {i}: {e}")).collect();
        return Err(CliError::Numerical(format!(
            "{} of {} sequences failed\n{}",
            failures.len(),
            d.sequences,
            list.join("\n")
        )));
    }
    if samples.is_empty() {
        return Err(CliError::Data("no samples generated".into()));
    }
    split_by_sequence(&mut samples, d.split, cfg.seed)?;
    let n_paired = samples.len();
    let header = DatasetHeader {
        version: DATASET_VERSION,
        n_points: d.n_points,
        rod_preset: cfg.rod.preset.clone(),
        rod_length: cfg.rod.length,
        split_sizes: [0; 3],
        seed: cfg.seed,
        representation: cfg.representation(d.n_points),
        config_hash: cfg.hash(),
    };
    let mut dataset = Dataset::new(header, samples);
    if d.augment {
        dataset = augment_no_motion(&dataset);
    }
    Ok(GenReport {
        dataset,
        failures,
        n_paired,
    })
}

pub struct TrainOutcome {
    pub model: ModelParams,
    pub history: History,
    /// Training samples left after the fraction was applied.
    pub n_train: usize,
}

/// Trains `cfg.model.arch` on the train split of `data` (subsampled by
/// `cfg.model.fraction`) with early stopping on the val split.
pub fn train_model(cfg: &ExperimentConfig, data: &Dataset, init: Option<&ModelParams>) -> Result<TrainOutcome, CliError> {
    cfg.validate()?;
    let repr = cfg.representation(data.header.n_points);
    let mut train_set = data.only(Split::Train);
    if train_set.is_empty() {
        return Err(CliError::Data("dataset has no training samples".into()));
    }
    if cfg.model.fraction < 1.0 {
        train_set = subsample_fraction(&train_set, cfg.model.fraction, cfg.seed)?;
    }
    let train_ex = encode_examples(&train_set, None, &repr)?;
    let val_ex = encode_examples(data, Some(Split::Val), &repr)?;
    let (mut model, history) = train(cfg.model.arch, repr, &train_ex, &val_ex, &cfg.train_config(), init)?;
    model.meta.rod_preset = data.header.rod_preset.clone();
    model.meta.rod_length = data.header.rod_length;
    model.meta.config_hash = cfg.hash();
    Ok(TrainOutcome {
        model,
        history,
        n_train: train_ex.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalFile {
    pub format: String,
    pub version: u32,
    pub arch: String,
    pub model_config_hash: String,
    pub data_config_hash: String,
    /// `(l_train, l_test)` when inputs were rescaled.
    pub scale: Option<(f64, f64)>,
    pub summary: ErrorSummary,
}

/// Relative errors of `model` on one split of `data` (all samples for
/// `None`). `l_test` rescales from the model's training length.
pub fn evaluate_model(
    model: &ModelParams,
    data: &Dataset,
    split: Option<Split>,
    l_test: Option<f64>,
) -> Result<(ErrorReport, EvalFile), CliError> {
    if data.header.n_points != model.cfg.n_points {
        return Err(CliError::Data(format!(
            "model expects {} points per state, dataset has {}",
            model.cfg.n_points, data.header.n_points
        )));
    }
    let scale = match l_test {
        None => None,
        Some(l) if model.meta.rod_length > 0.0 && l > 0.0 => Some((model.meta.rod_length, l)),
        Some(l) => {
            return Err(CliError::Config(format!(
                "cannot scale from training length {} to {l}",
                model.meta.rod_length
            )))
        }
    };
    let samples: Vec<_> = data
        .samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .cloned()
        .collect();
    if samples.is_empty() {
        return Err(CliError::Data("no samples to evaluate".into()));
    }
    let report = evaluate(model, &samples, scale)?;
    let file = EvalFile {
        format: EVAL_FORMAT.into(),
        version: REPORT_VERSION,
        arch: model.arch.tag().into(),
        model_config_hash: model.meta.config_hash.clone(),
        data_config_hash: data.header.config_hash.clone(),
        scale,
        summary: report.summary.clone(),
    };
    Ok((report, file))
}

/// Start grippers and target shape for a planning task.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskFile {
    pub grippers: GripperPair,
    pub target: DloState,
}

pub enum TargetSpec {
    File(TaskFile),
    /// Random start and a target reached by one admissible random move.
    Random(u64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFile {
    pub format: String,
    pub version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub start_grippers: GripperPair,
    pub start: DloState,
    pub target: DloState,
    /// Gripper pair that produced the target, for random tasks.
    pub target_grippers: Option<GripperPair>,
    pub result: ClosedLoopResult,
}

impl PlanFile {
    pub fn cost_csv(&self) -> String {
        let mut out = String::from("step,iteration,elite_mean_cost,best_cost\n");
        for (k, s) in self.result.steps.iter().enumerate() {
            for r in &s.plan.iterations {
                out.push_str(&format!("{k},{},{},{}\n", r.iteration, r.elite_mean_cost, r.best_cost));
            }
        }
        out
    }

    /// Difference action that produced the target, for random tasks.
    pub fn target_action(&self) -> Option<ActionVector> {
        let g = self.target_grippers?;
        dlo_core::make_action(&self.start_grippers, &g, dlo_core::ActionMode::Difference).difference_vector()
    }
}

/// Builds the task and runs the closed loop on the simulator of `cfg.rod`.
pub fn plan_task(cfg: &ExperimentConfig, model: &ModelParams, target: &TargetSpec) -> Result<PlanFile, CliError> {
    cfg.validate()?;
    let rod = cfg.rod()?;
    if !model.meta.rod_preset.is_empty()
        && (model.meta.rod_preset != cfg.rod.preset || model.meta.rod_length != cfg.rod.length)
    {
        return Err(CliError::Config(format!(
            "model was trained on {} ({} m), planning rod is {} ({} m)",
            model.meta.rod_preset, model.meta.rod_length, cfg.rod.preset, cfg.rod.length
        )));
    }
    let n = model.cfg.n_points;
    let bounds = &cfg.data.bounds;
    let (start, goal, goal_grippers) = match target {
        TargetSpec::File(t) => (Scene::settle(&rod, t.grippers, None, n)?, t.target.clone(), None),
        TargetSpec::Random(seed) => {
            let mut rng = ChaCha8Rng::seed_from_u64(*seed);
            let init = random_initial_pair(&mut rng, &rod, bounds)?;
            let start = Scene::settle(&rod, init, None, n)?;
            let moved = random_move(&mut rng, &init, &rod, bounds)?;
            let goal = Scene::settle(&rod, moved, Some(&start.config), n)?;
            (start, goal.state, Some(moved))
        }
    };
    let result = execute_closed_loop(&rod, model, &start, &goal, &cfg.plan.cem, bounds, cfg.plan.steps, cfg.seed)?;
    Ok(PlanFile {
        format: PLAN_FORMAT.into(),
        version: REPORT_VERSION,
        config_hash: cfg.hash(),
        config: cfg.clone(),
        start_grippers: start.grippers,
        start: start.state,
        target: goal,
        target_grippers: goal_grippers,
        result,
    })
}

pub fn bench_models(models: &[ModelParams], batches: &[usize], warmup: usize, reps: usize) -> Result<Vec<BenchRow>, CliError> {
    let mut rows = vec![];
    for m in models {
        rows.extend(benchmark_inference(m, batches, warmup, reps)?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        let mut c = ExperimentConfig::default();
        c.data.sequences = 2;
        c.data.moves = 3;
        c
    }

    #[test]
    fn sibling_appends_to_name() {
        assert_eq!(sibling(Path::new("a/b.json"), ".csv"), PathBuf::from("a/b.json.csv"));
    }

    #[test]
    fn generation_ignores_job_count() {
        let a = generate_dataset(&small(), 1).unwrap();
        let b = generate_dataset(&small(), 2).unwrap();
        assert_eq!(a.dataset, b.dataset);
        assert_eq!(a.n_paired, 2 * 4 * 3);
        assert!(a.failures.is_empty());
    }

    #[test]
    fn eval_refuses_other_point_count() {
        let data = generate_dataset(&small(), 1).unwrap().dataset;
        let cfg = small().representation(12);
        let model = ModelParams::init(dlo_neuro::Architecture::Mlp, cfg, 0).unwrap();
        assert!(matches!(evaluate_model(&model, &data, None, None), Err(CliError::Data(_))));
    }
}

use std::collections::BTreeMap;

use dlo_core::data::{Dataset, Split};
use dlo_core::{FeatureBundle, RepresentationConfig};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::Graph;
use crate::model::{forward, input_groups, Batch, FeatureStats, ParamVars};
use crate::{Architecture, ModelParams, NeuroError, Normalization};

/// A model input and its encoded state-change target.
#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub bundle: FeatureBundle,
    pub target: Vec<f64>,
}

/// Encodes every sample of `split` (all samples when `None`).
pub fn encode_examples(
    dataset: &Dataset,
    split: Option<Split>,
    cfg: &RepresentationConfig,
) -> Result<Vec<Example>, NeuroError> {
    dataset
        .samples
        .iter()
        .filter(|s| split.is_none_or(|sp| s.split == sp))
        .map(|s| {
            let (bundle, target) = s.encode(cfg)?;
            Ok(Example { bundle, target })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    /// Epochs without validation improvement before the rate is halved.
    pub plateau: usize,
    /// Epochs without validation improvement before stopping.
    pub patience: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 500,
            batch_size: 64,
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            plateau: 10,
            patience: 30,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct History {
    pub epochs: Vec<EpochRecord>,
    /// Epoch whose parameters were returned, `None` if no epoch ran.
    pub best_epoch: Option<usize>,
    pub n_train: usize,
    pub n_val: usize,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,train_loss,val_loss,lr\n");
        for r in &self.epochs {
            out.push_str(&format!("{},{},{},{}\n", r.epoch, r.train_loss, r.val_loss, r.lr));
        }
        out
    }
}

/// Fits input and target statistics on the training examples.
pub fn fit_normalization(arch: Architecture, cfg: &RepresentationConfig, examples: &[Example]) -> Normalization {
    let groups = input_groups(arch, cfg);
    let values: Vec<Vec<Vec<f64>>> = examples
        .iter()
        .map(|e| crate::model::group_values(arch, &e.bundle))
        .collect();
    let inputs = groups
        .iter()
        .enumerate()
        .map(|(g, (name, width))| {
            // the jacobian's action must keep zero at zero
            let centered = *name != "action";
            FeatureStats::fit(values.iter().map(|v| v[g].as_slice()), *width, centered)
        })
        .collect();
    let target = FeatureStats::fit(
        examples.iter().map(|e| e.target.as_slice()),
        cfg.state_width(),
        arch != Architecture::JacMlp,
    );
    Normalization { inputs, target }
}

fn check_examples(p: &ModelParams, examples: &[Example]) -> Result<(), NeuroError> {
    for (i, e) in examples.iter().enumerate() {
        if e.bundle.cfg != p.cfg {
            return Err(NeuroError::Config(format!(
                "example {i} uses representation {:?}, the model {:?}",
                e.bundle.cfg, p.cfg
            )));
        }
        if e.target.len() != p.cfg.state_width() {
            return Err(NeuroError::Config(format!(
                "example {i} target has {} entries, expected {}",
                e.target.len(),
                p.cfg.state_width()
            )));
        }
    }
    Ok(())
}

fn normalized_targets(p: &ModelParams, examples: &[&Example]) -> Vec<f64> {
    let mut out = Vec::with_capacity(examples.len() * p.cfg.state_width());
    for e in examples {
        p.norm.target.apply(&e.target, &mut out);
    }
    out
}

/// Mean squared error in normalized target units, and its gradient with
/// respect to every parameter tensor.
pub fn loss_and_gradients(
    p: &ModelParams,
    examples: &[&Example],
) -> Result<(f64, BTreeMap<String, Vec<f64>>), NeuroError> {
    let bundles: Vec<FeatureBundle> = examples.iter().map(|e| e.bundle.clone()).collect();
    let batch = Batch::from_bundles(p, &bundles)?;
    let mut g = Graph::new();
    let vars = ParamVars::bind(&mut g, p);
    let out = forward(&mut g, p, &vars, &batch);
    let loss = g.mse(out, normalized_targets(p, examples));
    let grads = g.backward(loss);
    let named = vars
        .vars
        .iter()
        .map(|(name, v)| {
            let grad = grads.get(*v).map_or_else(|| vec![0.0; p.tensors[name].len()], <[f64]>::to_vec);
            (name.clone(), grad)
        })
        .collect();
    Ok((g.value(loss)[0], named))
}

/// Loss only, batched to bound memory.
pub fn loss(p: &ModelParams, examples: &[Example]) -> Result<f64, NeuroError> {
    if examples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut total = 0.0;
    for chunk in examples.chunks(256) {
        let bundles: Vec<FeatureBundle> = chunk.iter().map(|e| e.bundle.clone()).collect();
        let batch = Batch::from_bundles(p, &bundles)?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, p);
        let out = forward(&mut g, p, &vars, &batch);
        let refs: Vec<&Example> = chunk.iter().collect();
        let l = g.mse(out, normalized_targets(p, &refs));
        total += g.value(l)[0] * chunk.len() as f64;
    }
    Ok(total / examples.len() as f64)
}

/// Largest relative gap between the tape gradient of [`loss`] and central
/// differences with step `h`, over up to `per_tensor` randomly chosen entries
/// of every parameter tensor (all entries of smaller tensors).
pub fn finite_difference_check(
    p: &ModelParams,
    examples: &[Example],
    h: f64,
    per_tensor: usize,
    seed: u64,
) -> Result<f64, NeuroError> {
    use rand::Rng;
    let refs: Vec<&Example> = examples.iter().collect();
    let (_, grads) = loss_and_gradients(p, &refs)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut probe = p.clone();
    let mut worst = 0.0f64;
    for (name, g) in &grads {
        let n = g.len();
        let picks: Vec<usize> = if n <= per_tensor {
            (0..n).collect()
        } else {
            (0..per_tensor).map(|_| rng.random_range(0..n)).collect()
        };
        for i in picks {
            let orig = p.tensors[name].data[i];
            probe.tensors.get_mut(name).expect("tensor").data[i] = orig + h;
            let up = loss(&probe, examples)?;
            probe.tensors.get_mut(name).expect("tensor").data[i] = orig - h;
            let down = loss(&probe, examples)?;
            probe.tensors.get_mut(name).expect("tensor").data[i] = orig;
            let fd = (up - down) / (2.0 * h);
            let rel = (fd - g[i]).abs() / fd.abs().max(g[i].abs()).max(1e-6);
            worst = worst.max(rel);
        }
    }
    Ok(worst)
}

struct Adam {
    m: BTreeMap<String, Vec<f64>>,
    v: BTreeMap<String, Vec<f64>>,
    t: i32,
}

impl Adam {
    fn new(p: &ModelParams) -> Self {
        let zeros: BTreeMap<String, Vec<f64>> =
            p.tensors.iter().map(|(n, t)| (n.clone(), vec![0.0; t.len()])).collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    fn step(&mut self, p: &mut ModelParams, grads: &BTreeMap<String, Vec<f64>>, hp: &TrainConfig, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - hp.beta1.powi(self.t);
        let c2 = 1.0 - hp.beta2.powi(self.t);
        for (name, g) in grads {
            let w = &mut p.tensors.get_mut(name).expect("gradient for a known tensor").data;
            let m = self.m.get_mut(name).expect("moment");
            let v = self.v.get_mut(name).expect("moment");
            for i in 0..g.len() {
                m[i] = hp.beta1 * m[i] + (1.0 - hp.beta1) * g[i];
                v[i] = hp.beta2 * v[i] + (1.0 - hp.beta2) * g[i] * g[i];
                w[i] -= lr * (m[i] / c1) / ((v[i] / c2).sqrt() + hp.adam_eps);
            }
        }
    }
}

/// Trains a model and returns the parameters of the best validation epoch
/// (best training epoch when `val` is empty).
///
/// With `init` the architecture, representation and normalization of the
/// checkpoint are kept; otherwise a fresh model is seeded from `hp.seed` and
/// normalized on `train`.
pub fn train(
    arch: Architecture,
    cfg: RepresentationConfig,
    train: &[Example],
    val: &[Example],
    hp: &TrainConfig,
    init: Option<&ModelParams>,
) -> Result<(ModelParams, History), NeuroError> {
    if hp.batch_size == 0 || !(hp.lr > 0.0) {
        return Err(NeuroError::Config("batch size and learning rate must be positive".into()));
    }
    let mut params = match init {
        Some(p) => {
            if p.arch != arch || p.cfg != cfg {
                return Err(NeuroError::Config(format!(
                    "checkpoint is {} with {:?}, requested {arch} with {cfg:?}",
                    p.arch, p.cfg
                )));
            }
            p.validate()?;
            p.clone()
        }
        None => {
            let mut p = ModelParams::init(arch, cfg, hp.seed)?;
            check_examples(&p, train)?;
            p.norm = fit_normalization(arch, &cfg, train);
            p
        }
    };
    check_examples(&params, train)?;
    check_examples(&params, val)?;
    let mut history = History {
        n_train: train.len(),
        n_val: val.len(),
        ..History::default()
    };
    if hp.epochs == 0 || train.is_empty() {
        return Ok((params, history));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(hp.seed ^ 0x5eed_7a11);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut adam = Adam::new(&params);
    let mut lr = hp.lr;
    let mut best = (f64::INFINITY, params.clone());
    let (mut since_best, mut since_change) = (0usize, 0usize);

    for epoch in 0..hp.epochs {
        order.shuffle(&mut rng);
        let mut sum = 0.0;
        for (bi, idx) in order.chunks(hp.batch_size).enumerate() {
            let batch: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
            let (l, grads) = loss_and_gradients(&params, &batch)?;
            if !l.is_finite() || grads.values().flatten().any(|g| !g.is_finite()) {
                return Err(NeuroError::NaN { epoch, batch: bi });
            }
            adam.step(&mut params, &grads, hp, lr);
            sum += l * batch.len() as f64;
        }
        let train_loss = sum / train.len() as f64;
        let val_loss = if val.is_empty() { train_loss } else { loss(&params, val)? };
        if !val_loss.is_finite() {
            return Err(NeuroError::NaN { epoch, batch: 0 });
        }
        history.epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
        });
        if val_loss < best.0 {
            best = (val_loss, params.clone());
            history.best_epoch = Some(epoch);
            since_best = 0;
            since_change = 0;
        } else {
            since_best += 1;
            since_change += 1;
            if since_best >= hp.patience {
                break;
            }
            if since_change >= hp.plateau {
                lr *= 0.5;
                since_change = 0;
            }
        }
    }
    let mut out = best.1;
    out.meta.seed = hp.seed;
    out.meta.epochs = history.epochs.len();
    Ok((out, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlo_core::{ActionMode, OrientationKind, StateKind};

    pub(crate) fn toy_examples(cfg: RepresentationConfig, n: usize, seed: u64) -> Vec<Example> {
        use rand::Rng;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| {
                let w = cfg.orientation.width();
                let mut r = |k: usize| -> Vec<f64> { (0..k).map(|_| rng.random_range(-0.2..0.2)).collect() };
                let state = r(cfg.state_width());
                let left = r(6);
                let mut jac: [f64; 9] = r(9).try_into().unwrap();
                jac[..3].copy_from_slice(&left[3..]);
                let bundle = FeatureBundle {
                    cfg,
                    state,
                    left_position: [left[0], left[1], left[2]],
                    left_motion: [left[3], left[4], left[5]],
                    pose_rotations: r(2 * w),
                    action_rotations: r(2 * w),
                    jacobian_action: jac,
                };
                let s: f64 = bundle.left_motion.iter().sum();
                let target = (0..cfg.state_width()).map(|i| s * (i as f64 * 0.3).sin()).collect();
                Example { bundle, target }
            })
            .collect()
    }

    fn cfg() -> RepresentationConfig {
        RepresentationConfig {
            state: StateKind::Edges,
            orientation: OrientationKind::AxisAngle,
            action: ActionMode::Difference,
            n_points: 6,
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let data = toy_examples(cfg(), 40, 3);
        let hp = TrainConfig {
            epochs: 3,
            batch_size: 16,
            seed: 11,
            ..TrainConfig::default()
        };
        let (a, ha) = train(Architecture::Mlp, cfg(), &data[..30], &data[30..], &hp, None).unwrap();
        let (b, hb) = train(Architecture::Mlp, cfg(), &data[..30], &data[30..], &hp, None).unwrap();
        assert_eq!(a, b);
        assert_eq!(ha, hb);
        assert_eq!(ha.epochs.len(), 3);
    }

    #[test]
    fn zero_epochs_returns_init() {
        let data = toy_examples(cfg(), 20, 4);
        let hp = TrainConfig {
            epochs: 2,
            batch_size: 8,
            ..TrainConfig::default()
        };
        let (p, _) = train(Architecture::JacMlp, cfg(), &data, &[], &hp, None).unwrap();
        let zero = TrainConfig { epochs: 0, ..hp };
        let (q, h) = train(Architecture::JacMlp, cfg(), &data, &[], &zero, Some(&p)).unwrap();
        assert_eq!(p, q);
        assert!(h.epochs.is_empty());
    }

    #[test]
    fn training_reduces_loss() {
        let data = toy_examples(cfg(), 64, 5);
        let hp = TrainConfig {
            epochs: 30,
            batch_size: 16,
            seed: 2,
            ..TrainConfig::default()
        };
        for arch in [Architecture::Mlp, Architecture::JacMlp, Architecture::Transformer] {
            let (_, h) = train(arch, cfg(), &data, &[], &hp, None).unwrap();
            let first = h.epochs[0].train_loss;
            let last = h.epochs.last().unwrap().train_loss;
            assert!(last < 0.5 * first, "{arch}: {first} -> {last}");
        }
    }

    #[test]
    fn mismatched_points_rejected() {
        let data = toy_examples(cfg(), 4, 6);
        let other = RepresentationConfig { n_points: 7, ..cfg() };
        let err = train(Architecture::Mlp, other, &data, &[], &TrainConfig::default(), None).unwrap_err();
        assert!(matches!(err, NeuroError::Config(_)));
    }

    #[test]
    fn history_csv_has_header_and_rows() {
        let h = History {
            epochs: vec![
                EpochRecord { epoch: 0, train_loss: 1.0, val_loss: 2.0, lr: 1e-3 },
                EpochRecord { epoch: 1, train_loss: 0.5, val_loss: 1.5, lr: 1e-3 },
            ],
            ..History::default()
        };
        assert_eq!(h.to_csv().lines().count(), 3);
    }
}

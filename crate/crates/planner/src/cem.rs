use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::PlanError;

/// Left translation (3), left axis-angle (3), right axis-angle (3).
pub const ACTION_DIM: usize = 9;
pub type ActionVector = [f64; ACTION_DIM];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CemConfig {
    pub n_samples: usize,
    pub n_elites: usize,
    pub max_iters: usize,
    pub init_std: ActionVector,
    /// Stop once the std vector's norm falls below this.
    pub converge_eps: f64,
    pub std_floor: f64,
    pub lower: ActionVector,
    pub upper: ActionVector,
}

impl Default for CemConfig {
    fn default() -> Self {
        let rot = 30f64.to_radians();
        Self {
            n_samples: 64,
            n_elites: 8,
            max_iters: 10,
            init_std: [0.05, 0.05, 0.05, 0.2, 0.2, 0.2, 0.2, 0.2, 0.2],
            converge_eps: 1e-3,
            std_floor: 1e-4,
            lower: [-0.1, -0.1, -0.1, -rot, -rot, -rot, -rot, -rot, -rot],
            upper: [0.1, 0.1, 0.1, rot, rot, rot, rot, rot, rot],
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<(), PlanError> {
        if self.n_samples == 0 || self.n_elites < 2 || self.n_elites > self.n_samples {
            return Err(PlanError::Config(format!(
                "need 2 ≤ n_elites ≤ n_samples, got {} elites of {}",
                self.n_elites, self.n_samples
            )));
        }
        if self.init_std.iter().any(|s| !(*s > 0.0)) || !(self.std_floor > 0.0) {
            return Err(PlanError::Config("standard deviations must be positive".into()));
        }
        if self.lower.iter().zip(&self.upper).any(|(l, u)| !(l <= u)) {
            return Err(PlanError::Config("action bounds must satisfy lower ≤ upper".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionDistribution {
    pub mean: ActionVector,
    pub std: ActionVector,
}

impl ActionDistribution {
    pub fn std_norm(&self) -> f64 {
        self.std.iter().map(|s| s * s).sum::<f64>().sqrt()
    }
}

/// Refits the distribution to the elites: elementwise mean and population
/// standard deviation, floored at `floor`.
pub fn cem_update(elites: &[ActionVector], floor: f64) -> Result<ActionDistribution, PlanError> {
    if elites.len() < 2 {
        return Err(PlanError::Config(format!("need at least 2 elites, got {}", elites.len())));
    }
    let n = elites.len() as f64;
    let mut mean = [0.0; ACTION_DIM];
    let mut std = [0.0; ACTION_DIM];
    for k in 0..ACTION_DIM {
        mean[k] = elites.iter().map(|e| e[k]).sum::<f64>() / n;
        let var = elites.iter().map(|e| (e[k] - mean[k]).powi(2)).sum::<f64>() / n;
        std[k] = var.sqrt().max(floor);
    }
    Ok(ActionDistribution { mean, std })
}

/// Indices of the `k` lowest costs, ties broken by index.
pub fn select_elites(costs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..costs.len()).collect();
    idx.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub costs: Vec<f64>,
    pub elites: Vec<usize>,
    pub elite_mean_cost: f64,
    /// Lowest cost seen up to and including this iteration.
    pub best_cost: f64,
    pub std_norm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CemOutcome {
    pub best_action: ActionVector,
    pub best_cost: f64,
    pub iterations: Vec<IterationRecord>,
    pub final_distribution: ActionDistribution,
}

/// Minimizes `cost` over clamped Gaussian samples. `cost` receives a whole
/// population and returns one cost per action.
pub fn cem_optimize<F>(cfg: &CemConfig, seed: u64, mut cost: F) -> Result<CemOutcome, PlanError>
where
    F: FnMut(&[ActionVector]) -> Result<Vec<f64>, PlanError>,
{
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut dist = ActionDistribution {
        mean: [0.0; ACTION_DIM],
        std: cfg.init_std,
    };
    let mut best = ([0.0; ACTION_DIM], f64::INFINITY);
    let mut iterations = Vec::with_capacity(cfg.max_iters);
    for iteration in 0..cfg.max_iters {
        let samples: Vec<ActionVector> = (0..cfg.n_samples)
            .map(|_| {
                std::array::from_fn(|k| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    (dist.mean[k] + dist.std[k] * z).clamp(cfg.lower[k], cfg.upper[k])
                })
            })
            .collect();
        let costs = cost(&samples)?;
        if costs.len() != samples.len() {
            return Err(PlanError::Config("cost function returned the wrong count".into()));
        }
        let elites = select_elites(&costs, cfg.n_elites);
        if costs[elites[0]] < best.1 {
            best = (samples[elites[0]], costs[elites[0]]);
        }
        let elite_actions: Vec<ActionVector> = elites.iter().map(|&i| samples[i]).collect();

        let elite_mean_cost = elites.iter().map(|&i| costs[i]).sum::<f64>() / elites.len() as f64;
        dist = cem_update(&elite_actions, cfg.std_floor)?;
        iterations.push(IterationRecord {
            iteration,
            costs,
            elites,
            elite_mean_cost,
            best_cost: best.1,
            std_norm: dist.std_norm(),
        });
        if dist.std_norm() < cfg.converge_eps {
            break;
        }
    }
    Ok(CemOutcome {
        best_action: best.0,
        best_cost: best.1,
        iterations,
        final_distribution: dist,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn identical_elites_hit_the_floor() {
        let a = [0.3; ACTION_DIM];
        let d = cem_update(&[a, a, a], 1e-4).unwrap();
        assert_eq!(d.mean, a);
        assert_eq!(d.std, [1e-4; ACTION_DIM]);
        assert!(cem_update(&[a], 1e-4).is_err());
    }

    #[test]
    fn symmetric_elites_average_to_centre() {
        let m = [0.1, -0.2, 0.0, 0.4, 0.0, 0.0, -0.1, 0.2, 0.3];
        let off = [0.05; ACTION_DIM];
        let a = std::array::from_fn(|k| m[k] + off[k]);
        let b = std::array::from_fn(|k| m[k] - off[k]);
        let d = cem_update(&[a, b], 1e-4).unwrap();
        for k in 0..ACTION_DIM {
            assert!((d.mean[k] - m[k]).abs() < 1e-15);
            assert!((d.std[k] - 0.05).abs() < 1e-15);
        }
    }

    #[test]
    fn update_matches_direct_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let elites: Vec<ActionVector> = (0..8)
            .map(|_| std::array::from_fn(|_| rng.random_range(-1.0..1.0)))
            .collect();
        let d = cem_update(&elites, 1e-4).unwrap();
        for k in 0..ACTION_DIM {
            let mut s = 0.0;
            for e in &elites {
                s += e[k];
            }
            let m = s / 8.0;
            let mut v = 0.0;
            for e in &elites {
                v += (e[k] - m) * (e[k] - m);
            }
            assert!((d.mean[k] - m).abs() < 1e-14);
            assert!((d.std[k] - (v / 8.0).sqrt()).abs() < 1e-14);
        }
    }

    #[test]
    fn elites_break_ties_by_index() {
        assert_eq!(select_elites(&[2.0, 1.0, 1.0, 0.5], 3), vec![3, 1, 2]);
    }

    #[test]
    fn rejects_bad_config() {
        let cfg = CemConfig {
            n_elites: 80,
            ..CemConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = CemConfig {
            init_std: [0.0; ACTION_DIM],
            ..CemConfig::default()
        };
        assert!(cfg.validate().is_err());
    }
}

use dlo_core::sim::{observe, solve_equilibrium, MoveBounds, ObservationNoise, RodConfiguration, RodModel};
use dlo_core::spline::curve_distance_l3;
use dlo_core::{Action, DloState, GripperPair};
use dlo_neuro::ModelParams;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cem::{cem_optimize, ActionVector, CemConfig, IterationRecord};
use crate::PlanError;

/// Mean absolute coordinate difference: `Σ_i ‖pred_i − target_i‖₁ / (3 n)`.
pub fn shape_cost(pred: &DloState, target: &DloState) -> Result<f64, PlanError> {
    if pred.len() != target.len() {
        return Err(PlanError::Config(format!(
            "predicted state has {} points, target {}",
            pred.len(),
            target.len()
        )));
    }
    let sum: f64 = pred
        .points()
        .iter()
        .zip(target.points())
        .map(|(p, t)| (p - t).abs().sum())
        .sum();
    Ok(sum / (3 * pred.len()) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub action: ActionVector,
    pub best_cost: f64,
    pub grippers_before: GripperPair,
    pub grippers_after: GripperPair,
    pub predicted: DloState,
    pub target: DloState,
    pub iterations: Vec<IterationRecord>,
}

impl PlanResult {
    pub fn cost_csv(&self) -> String {
        let mut out = String::from("iteration,elite_mean_cost,best_cost\n");
        for r in &self.iterations {
            out.push_str(&format!("{},{},{}\n", r.iteration, r.elite_mean_cost, r.best_cost));
        }
        out
    }
}

/// Optional limits on where the grippers may go; candidates outside get an
/// infinite cost.
pub struct Reach<'a> {
    pub rod: &'a RodModel,
    pub bounds: &'a MoveBounds,
}

/// One CEM search for the move that brings the model's prediction closest to
/// `target`. `scale = (l_train, l_test)` runs the model on a rod of another
/// length.
#[allow(clippy::too_many_arguments)]
pub fn plan(
    model: &ModelParams,
    state: &DloState,
    grippers: &GripperPair,
    target: &DloState,
    cfg: &CemConfig,
    seed: u64,
    reach: Option<&Reach>,
    scale: Option<(f64, f64)>,
) -> Result<PlanResult, PlanError> {
    if state.len() != model.cfg.n_points || target.len() != model.cfg.n_points {
        return Err(PlanError::Config(format!(
            "model expects {} points, state has {} and target {}",
            model.cfg.n_points,
            state.len(),
            target.len()
        )));
    }
    let outcome = cem_optimize(cfg, seed, |samples| {
        let actions: Vec<Action> = samples.iter().map(Action::from_difference_vector).collect();
        let predicted = model.predict_next(state, grippers, &actions, scale)?;
        actions
            .iter()
            .zip(&predicted)
            .map(|(a, p)| {
                if let Some(r) = reach {
                    if !r.bounds.admits(r.rod, &a.apply(grippers)) {
                        return Ok(f64::INFINITY);
                    }
                }
                shape_cost(p, target)
            })
            .collect()
    })?;
    let action = Action::from_difference_vector(&outcome.best_action);
    let predicted = model
        .predict_next(state, grippers, &[action], scale)?
        .pop()
        .expect("one prediction");
    Ok(PlanResult {
        action: outcome.best_action,
        best_cost: outcome.best_cost,
        grippers_before: *grippers,
        grippers_after: action.apply(grippers),
        predicted,
        target: target.clone(),
        iterations: outcome.iterations,
    })
}

/// Simulated rod with its grippers and observed state.
#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub grippers: GripperPair,
    pub config: RodConfiguration,
    pub state: DloState,
}

impl Scene {
    /// Equilibrium of `rod` at `grippers`, observed with `n_points` points.
    pub fn settle(
        rod: &RodModel,
        grippers: GripperPair,
        warm: Option<&RodConfiguration>,
        n_points: usize,
    ) -> Result<Self, PlanError> {
        let eq = solve_equilibrium(rod, &grippers, warm)?;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let state = observe(&mut rng, &eq.config, n_points, &ObservationNoise::default())?;
        Ok(Self {
            grippers,
            config: eq.config,
            state,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopStep {
    pub plan: PlanResult,
    pub reached: DloState,
    pub l3_to_target: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClosedLoopResult {
    pub initial_l3: f64,
    pub final_l3: f64,
    pub steps: Vec<ClosedLoopStep>,
}

/// Plan, execute on the simulator, observe; `n_steps` times.
///
/// A simulator failure returns [`PlanError::Step`] with the steps completed
/// so far.
#[allow(clippy::too_many_arguments)]
pub fn execute_closed_loop(
    rod: &RodModel,
    model: &ModelParams,
    start: &Scene,
    target: &DloState,
    cfg: &CemConfig,
    bounds: &MoveBounds,
    n_steps: usize,
    seed: u64,
) -> Result<ClosedLoopResult, PlanError> {
    let initial_l3 = curve_distance_l3(&start.state, target)?;
    let mut scene = start.clone();
    let mut steps: Vec<ClosedLoopStep> = Vec::with_capacity(n_steps);
    let reach = Reach { rod, bounds };
    for step in 0..n_steps {
        let p = plan(
            model,
            &scene.state,
            &scene.grippers,
            target,
            cfg,
            seed.wrapping_add(step as u64),
            Some(&reach),
            None,
        )?;
        let next = match Scene::settle(rod, p.grippers_after, Some(&scene.config), model.cfg.n_points) {
            Ok(s) => s,
            Err(e) => {
                return Err(PlanError::Step {
                    step,
                    source: Box::new(e),
                    completed: steps,
                })
            }
        };
        let l3 = curve_distance_l3(&next.state, target)?;
        steps.push(ClosedLoopStep {
            plan: p,
            reached: next.state.clone(),
            l3_to_target: l3,
        });
        scene = next;
    }
    let final_l3 = steps.last().map_or(initial_l3, |s| s.l3_to_target);
    Ok(ClosedLoopResult {
        initial_l3,
        final_l3,
        steps,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use dlo_core::Vec3;

    fn line(n: usize, dx: f64) -> DloState {
        DloState::new((0..n).map(|i| Vec3::new(i as f64 * 0.1 + dx, 0.0, 0.0)).collect()).unwrap()
    }

    #[test]
    fn cost_of_identical_and_offset_states() {
        let a = line(16, 0.0);
        assert_eq!(shape_cost(&a, &a).unwrap(), 0.0);
        let b = line(16, 0.01);
        assert!((shape_cost(&b, &a).unwrap() - 0.01 / 3.0).abs() < 1e-15);
        assert!(shape_cost(&a, &line(15, 0.0)).is_err());
    }
}

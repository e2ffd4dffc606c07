//! Equilibrium solver: Newton steps on the inextensibility manifold with a
//! monotone backtracking line search and re-projection after every step.
//!
//! Free variables are the vertices `2..=n-2`; vertices `0, 1, n-1, n` are
//! fixed by the clamped end positions and tangents. Constraints are the
//! lengths of edges `1..=n-2`, written as `(|e|² − ℓ²) / 2ℓ`.

use nalgebra::{DMatrix, DVector};

use super::rod::{end_twist, energy, energy_gradient, energy_of, material_frames, Clamps};
use super::{EnergyBreakdown, RodConfiguration, RodModel, SimError};
use crate::{GripperPair, Vec3};

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub max_iters: usize,
    /// Required projected-gradient norm (N) for a successful solve.
    pub grad_tol: f64,
    /// Iteration stops early once the projected gradient drops below this.
    pub fine_tol: f64,
    /// Edge-length violation (m) tolerated after each projection.
    pub constraint_tol: f64,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self {
            max_iters: 5000,
            grad_tol: 1e-6,
            fine_tol: 1e-11,
            constraint_tol: 1e-12,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolveStats {
    pub iterations: usize,
    /// Energy of every accepted iterate, starting with the initial one.
    pub energy_trace: Vec<f64>,
    pub projected_gradient: f64,
    /// Largest `| |e| − ℓ |` over all edges.
    pub constraint_residual: f64,
}

#[derive(Debug, Clone)]
pub struct Equilibrium {
    pub config: RodConfiguration,
    pub energy: EnergyBreakdown,
    pub stats: SolveStats,
}

pub fn solve_equilibrium(
    rod: &RodModel,
    grippers: &GripperPair,
    warm_start: Option<&RodConfiguration>,
) -> Result<Equilibrium, SimError> {
    Solver::new(rod, grippers, SolverOptions::default())?.run(warm_start)
}

impl Equilibrium {
    pub fn solve_with(
        rod: &RodModel,
        grippers: &GripperPair,
        warm_start: Option<&RodConfiguration>,
        options: SolverOptions,
    ) -> Result<Self, SimError> {
        Solver::new(rod, grippers, options)?.run(warm_start)
    }
}

struct Solver<'a> {
    rod: &'a RodModel,
    clamps: Clamps,
    opts: SolverOptions,
    n: usize,
}

impl<'a> Solver<'a> {
    fn new(rod: &'a RodModel, grippers: &GripperPair, opts: SolverOptions) -> Result<Self, SimError> {
        rod.validate()?;
        let total = rod.length();
        let sep = grippers.separation();
        if !(sep <= total) {
            return Err(SimError::Infeasible(format!(
                "gripper separation {sep:.6} m exceeds rod length {total:.6} m"
            )));
        }
        let clamps = Clamps::new(rod, grippers);
        let n = rod.n_seg;
        let span = (clamps.vn1 - clamps.v1).norm();
        let reach = (n - 2) as f64 * rod.rest_len;
        if span > reach * (1.0 + 1e-12) {
            return Err(SimError::Infeasible(format!(
                "clamped ends are {span:.6} m apart, free rod spans at most {reach:.6} m"
            )));
        }
        Ok(Self {
            rod,
            clamps,
            opts,
            n,
        })
    }

    fn n_free(&self) -> usize {
        3 * (self.n - 3)
    }

    fn n_cons(&self) -> usize {
        self.n - 2
    }

    fn free_of(&self, grad: &[Vec3]) -> DVector<f64> {
        DVector::from_iterator(
            self.n_free(),
            grad[2..self.n - 1].iter().flat_map(|g| [g.x, g.y, g.z]),
        )
    }

    fn step(&self, v: &[Vec3], dx: &DVector<f64>, alpha: f64) -> Vec<Vec3> {
        let mut out = v.to_vec();
        for (f, p) in out[2..self.n - 1].iter_mut().enumerate() {
            for k in 0..3 {
                p[k] += alpha * dx[3 * f + k];
            }
        }
        out
    }

    fn constraints(&self, v: &[Vec3]) -> DVector<f64> {
        let l = self.rod.rest_len;
        DVector::from_iterator(
            self.n_cons(),
            (1..=self.n - 2).map(|j| ((v[j + 1] - v[j]).norm_squared() - l * l) / (2.0 * l)),
        )
    }

    fn jacobian(&self, v: &[Vec3]) -> DMatrix<f64> {
        let l = self.rod.rest_len;
        let mut a = DMatrix::zeros(self.n_cons(), self.n_free());
        for j in 1..=self.n - 2 {
            let e = (v[j + 1] - v[j]) / l;
            let row = j - 1;
            if j >= 2 {
                let f = j - 2;
                for k in 0..3 {
                    a[(row, 3 * f + k)] = -e[k];
                }
            }
            if j + 1 <= self.n - 2 {
                let f = j + 1 - 2;
                for k in 0..3 {
                    a[(row, 3 * f + k)] = e[k];
                }
            }
        }
        a
    }

    /// Solves `(A Aᵀ) y = r` with a tiny ridge for rank-deficient (taut) cases.
    fn normal_solve(a: &DMatrix<f64>, r: &DVector<f64>) -> Option<DVector<f64>> {
        let mut aat = a * a.transpose();
        let ridge = 1e-14 * aat.diagonal().max().max(1e-300);
        for i in 0..aat.nrows() {
            aat[(i, i)] += ridge;
        }
        aat.cholesky().map(|c| c.solve(r))
    }

    /// Gauss–Newton projection onto the constraint manifold. Iterates until
    /// the violation stops shrinking, so the result is as tight as rounding
    /// allows; fails if that is still above `constraint_tol`.
    fn project(&self, v: &[Vec3]) -> Option<Vec<Vec3>> {
        let mut v = v.to_vec();
        let mut c = self.constraints(&v);
        let mut viol = c.amax();
        for _ in 0..60 {
            if viol == 0.0 {
                break;
            }
            let a = self.jacobian(&v);
            let y = Self::normal_solve(&a, &c)?;
            let dx = a.transpose() * y;
            let trial = self.step(&v, &dx, -1.0);
            let tc = self.constraints(&trial);
            let tv = tc.amax();
            if !(tv < viol) {
                break;
            }
            v = trial;
            c = tc;
            viol = tv;
        }
        (viol <= self.opts.constraint_tol).then_some(v)
    }

    /// Circular arc of equal chords from `v1` to `v_{n-1}`, bulging along
    /// gravity (or along the mean end tangent when gravity is off).
    fn arc_start(&self) -> Vec<Vec3> {
        let c = &self.clamps;
        let m = self.n - 2;
        let l = self.rod.rest_len;
        let chord = c.vn1 - c.v1;
        let d = chord.norm();
        let dir = if d > 0.0 {
            chord / d
        } else {
            c.t0
        };
        let perp = |w: Vec3| w - dir * dir.dot(&w);
        let mut bulge = perp(self.rod.gravity());
        if bulge.norm() < 1e-9 {
            bulge = perp(c.t0 - c.t_end);
        }
        if bulge.norm() < 1e-9 {
            let axis = if dir.x.abs() < 0.9 { Vec3::x() } else { Vec3::y() };
            bulge = perp(axis);
        }
        let bulge = bulge.normalize();

        let mut v = vec![Vec3::zeros(); self.n + 1];
        let target = d / l;
        if target >= m as f64 * (1.0 - 1e-12) {
            for (k, p) in v[1..self.n].iter_mut().enumerate() {
                *p = c.v1 + chord * (k as f64 / m as f64);
            }
        } else {
            // sin(mβ)/sin(β) decreases from m to 0 on (0, π/m)
            let f = |beta: f64| (m as f64 * beta).sin() / beta.sin();
            let (mut lo, mut hi) = (1e-12, std::f64::consts::PI / m as f64);
            for _ in 0..200 {
                let mid = 0.5 * (lo + hi);
                if f(mid) > target {
                    lo = mid;
                } else {
                    hi = mid;
                }
            }
            let beta = 0.5 * (lo + hi);
            let radius = l / (2.0 * beta.sin());
            let half = m as f64 * beta;
            let mid = 0.5 * (c.v1 + c.vn1);
            let center = mid - bulge * (radius * half.cos());
            for (k, p) in v[1..self.n].iter_mut().enumerate() {
                let theta = -half + 2.0 * beta * k as f64;
                *p = center + (dir * theta.sin() + bulge * theta.cos()) * radius;
            }
        }
        c.apply(&mut v);
        v
    }

    fn initial(&self, warm: Option<&RodConfiguration>) -> Result<(Vec<Vec3>, f64), SimError> {
        if let Some(w) = warm {
            if w.vertices.len() != self.n + 1 {
                return Err(SimError::Config(format!(
                    "warm start has {} vertices, rod has {}",
                    w.vertices.len(),
                    self.n + 1
                )));
            }
            let mut v = w.vertices.clone();
            self.clamps.apply(&mut v);
            if let Some(p) = self.project(&v) {
                let twist = end_twist(&p, &self.clamps, w.twist);
                return Ok((p, twist));
            }
        }
        let v = self
            .project(&self.arc_start())
            .ok_or_else(|| SimError::Infeasible("could not build a feasible start".into()))?;
        let twist = end_twist(&v, &self.clamps, 0.0);
        Ok((v, twist))
    }

    fn gradient(&self, v: &[Vec3], twist_ref: f64) -> DVector<f64> {
        self.free_of(&energy_gradient(self.rod, v, &self.clamps, twist_ref))
    }

    fn hessian(&self, v: &[Vec3], twist_ref: f64) -> DMatrix<f64> {
        let nf = self.n_free();
        let h = 1e-6;
        let mut hess = DMatrix::zeros(nf, nf);
        let mut unit = DVector::zeros(nf);
        for k in 0..nf {
            unit[k] = 1.0;
            let gp = self.gradient(&self.step(v, &unit, h), twist_ref);
            let gm = self.gradient(&self.step(v, &unit, -h), twist_ref);
            unit[k] = 0.0;
            hess.set_column(k, &((gp - gm) / (2.0 * h)));
        }
        0.5 * (&hess + hess.transpose())
    }

    fn run(&self, warm: Option<&RodConfiguration>) -> Result<Equilibrium, SimError> {
        let (mut v, mut twist) = self.initial(warm)?;
        let (mut e, _) = energy_of(self.rod, &v, &self.clamps, twist);
        let mut trace = vec![e];
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        let mut stalled = 0;
        let l = self.rod.rest_len;

        while iterations < self.opts.max_iters {
            let g = self.gradient(&v, twist);
            let a = self.jacobian(&v);
            let Some(lambda) = Self::normal_solve(&a, &(&a * &g)) else {
                break;
            };
            let gp = &g - a.transpose() * &lambda;
            residual = gp.norm();
            if residual <= self.opts.fine_tol {
                break;
            }

            let mut hl = self.hessian(&v, twist);
            // −Σ λ_j ∇²c_j, with ∇²c_j = (1/ℓ)[[I, −I], [−I, I]] on edge j
            for j in 1..=self.n - 2 {
                let w = lambda[j - 1] / l;
                let lo = (j >= 2).then(|| 3 * (j - 2));
                let hi = (j + 1 <= self.n - 2).then(|| 3 * (j - 1));
                for k in 0..3 {
                    if let Some(p) = lo {
                        hl[(p + k, p + k)] -= w;
                    }
                    if let Some(q) = hi {
                        hl[(q + k, q + k)] -= w;
                    }
                    if let (Some(p), Some(q)) = (lo, hi) {
                        hl[(p + k, q + k)] += w;
                        hl[(q + k, p + k)] += w;
                    }
                }
            }

            let c = self.constraints(&v);
            let dx = self.newton_direction(&hl, &a, &g, &c).unwrap_or_else(|| -&gp);
            let accepted = self
                .line_search(&v, twist, e, &g, &dx)
                .or_else(|| {
                    let sd = -&gp;
                    self.line_search(&v, twist, e, &g, &sd)
                });
            let Some((nv, ne, nt)) = accepted else {
                break;
            };
            // rounding-level progress once the tolerance is met: stop
            if residual <= self.opts.grad_tol && e - ne <= 1e-15 * e.abs().max(1e-300) {
                stalled += 1;
                if stalled >= 5 {
                    break;
                }
            } else {
                stalled = 0;
            }
            v = nv;
            e = ne;
            twist = nt;
            trace.push(e);
            iterations += 1;
        }

        if residual.is_finite() && residual > self.opts.fine_tol {
            // refresh after the last accepted step
            let g = self.gradient(&v, twist);
            let a = self.jacobian(&v);
            if let Some(lambda) = Self::normal_solve(&a, &(&a * &g)) {
                residual = (&g - a.transpose() * &lambda).norm();
            }
        }

        let constraint_residual = v
            .windows(2)
            .map(|w| ((w[1] - w[0]).norm() - l).abs())
            .fold(0.0, f64::max);
        let config = RodConfiguration {
            material_frames: material_frames(&v, &self.clamps, twist),
            vertices: v,
            twist,
        };
        if !(residual <= self.opts.grad_tol) {
            return Err(SimError::NonConvergence {
                iterations,
                residual,
                last: Box::new(config),
            });
        }
        Ok(Equilibrium {
            energy: energy(self.rod, &config),
            config,
            stats: SolveStats {
                iterations,
                energy_trace: trace,
                projected_gradient: residual,
                constraint_residual,
            },
        })
    }

    fn newton_direction(
        &self,
        hl: &DMatrix<f64>,
        a: &DMatrix<f64>,
        g: &DVector<f64>,
        c: &DVector<f64>,
    ) -> Option<DVector<f64>> {
        let (nf, nc) = (self.n_free(), self.n_cons());
        let scale = hl.diagonal().amax().max(1e-12);
        let mut mu = 0.0;
        for _ in 0..10 {
            let mut k = DMatrix::zeros(nf + nc, nf + nc);
            k.view_mut((0, 0), (nf, nf)).copy_from(hl);
            for i in 0..nf {
                k[(i, i)] += mu;
            }
            k.view_mut((0, nf), (nf, nc)).copy_from(&a.transpose());
            k.view_mut((nf, 0), (nc, nf)).copy_from(a);
            let mut rhs = DVector::zeros(nf + nc);
            rhs.rows_mut(0, nf).copy_from(&(-g));
            rhs.rows_mut(nf, nc).copy_from(&(-c));
            if let Some(sol) = k.lu().solve(&rhs) {
                let dx = sol.rows(0, nf).into_owned();
                let curvature = dx.dot(&(hl * &dx)) + mu * dx.norm_squared();
                if dx.iter().all(|x| x.is_finite()) && curvature > 0.0 && g.dot(&dx) < 0.0 {
                    return Some(dx);
                }
            }
            mu = if mu == 0.0 { 1e-8 * scale } else { mu * 100.0 };
        }
        None
    }

    /// Backtracking on the projected path `P(x + α d)`; accepts only
    /// non-increasing energy with sufficient decrease.
    fn line_search(
        &self,
        v: &[Vec3],
        twist: f64,
        e: f64,
        g: &DVector<f64>,
        dx: &DVector<f64>,
    ) -> Option<(Vec<Vec3>, f64, f64)> {
        let slope = g.dot(dx);
        if !(slope < 0.0) {
            return None;
        }
        // cap the largest vertex displacement at one segment length
        let max_move = dx.amax();
        let mut alpha: f64 = if max_move > self.rod.rest_len {
            self.rod.rest_len / max_move
        } else {
            1.0
        };
        for _ in 0..40 {
            if let Some(trial) = self.project(&self.step(v, dx, alpha)) {
                let (te, tt) = energy_of(self.rod, &trial, &self.clamps, twist);
                if te <= e + 1e-4 * alpha * slope {
                    return Some((trial, te, tt));
                }
            }
            alpha *= 0.5;
        }
        None
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Pose;
    use nalgebra::Rotation3;
    use std::f64::consts::PI;

    fn facing(sep: Vec3) -> GripperPair {
        GripperPair::new(
            Pose::new(sep, Rotation3::from_axis_angle(&Vec3::z_axis(), PI)),
            Pose::new(Vec3::zeros(), Rotation3::identity()),
        )
    }

    #[test]
    fn taut_rod_is_straight() {
        let mut rod = RodModel::preset("two-wire", 0.5).unwrap();
        rod.gravity = [0.0; 3];
        let eq = solve_equilibrium(&rod, &facing(Vec3::new(0.5, 0.0, 0.0)), None).unwrap();
        assert!(eq.energy.total().abs() <= 1e-9);
        for (i, p) in eq.config.vertices.iter().enumerate() {
            assert!((p - Vec3::new(rod.rest_len * i as f64, 0.0, 0.0)).norm() < 1e-9);
        }
    }

    #[test]
    fn infeasible_separation() {
        let rod = RodModel::preset("two-wire", 0.5).unwrap();
        assert!(matches!(
            solve_equilibrium(&rod, &facing(Vec3::new(0.6, 0.0, 0.0)), None),
            Err(SimError::Infeasible(_))
        ));
    }

    #[test]
    fn sagging_rod_converges_monotonically() {
        let rod = RodModel::preset("two-wire", 0.5).unwrap();
        let g = facing(Vec3::new(0.35, 0.05, 0.02));
        let eq = solve_equilibrium(&rod, &g, None).unwrap();
        assert!(eq.stats.projected_gradient <= 1e-6);
        assert!(eq.stats.constraint_residual <= 1e-6);
        assert!(eq.stats.energy_trace.windows(2).all(|w| w[1] <= w[0]));
        // the middle hangs below the ends
        assert!(eq.config.vertices[16].z < -0.01);

        // warm start from itself stays put
        let again = solve_equilibrium(&rod, &g, Some(&eq.config)).unwrap();
        let drift = again
            .config
            .vertices
            .iter()
            .zip(&eq.config.vertices)
            .map(|(a, b)| (a - b).norm())
            .fold(0.0, f64::max);
        assert!(drift < 1e-6, "{drift}");
        assert!(again.energy.total() <= eq.stats.energy_trace[0] + 1e-15);
    }

    #[test]
    fn twisted_gripper_changes_shape() {
        let rod = RodModel::preset("two-wire", 0.5).unwrap();
        let mut g = facing(Vec3::new(0.4, 0.0, 0.0));
        let plain = solve_equilibrium(&rod, &g, None).unwrap();
        g.left.r = g.left.r * Rotation3::from_axis_angle(&Vec3::x_axis(), 0.5);
        let twisted = solve_equilibrium(&rod, &g, Some(&plain.config)).unwrap();
        assert!(twisted.config.twist.abs() > 0.1);
        assert!(twisted.energy.twist > 0.0);
    }

    #[test]
    fn deterministic() {
        let rod = RodModel::preset("braided", 0.5).unwrap();
        let g = facing(Vec3::new(0.3, -0.1, 0.1));
        let a = solve_equilibrium(&rod, &g, None).unwrap();
        let b = solve_equilibrium(&rod, &g, None).unwrap();
        assert_eq!(a.config, b.config);
    }
}

//! Clamped B-spline fitting anchored at the gripper TCPs, arc-length
//! resampling, end-depth suppression and the curve distance used for every
//! reported error.

use nalgebra::{DMatrix, DVector};

use crate::{DloState, Vec3};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum SplineError {
    #[error("too few points to fit a curve: {0}")]
    TooFewPoints(usize),
    #[error("degenerate input: {0}")]
    Degenerate(String),
}

pub const DEFAULT_DEGREE: usize = 3;
/// Dense sample count behind [`curve_distance_l3`].
pub const L3_SAMPLES: usize = 512;
pub const DEFAULT_END_RADIUS: f64 = 0.03;
pub const DEFAULT_POINTS: usize = 16;

/// Gauss–Legendre nodes and weights on `[-1, 1]`, 5 points.
const GL5: [(f64, f64); 5] = [
    (0.0, 0.568_888_888_888_888_9),
    (-0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (0.538_469_310_105_683_1, 0.478_628_670_499_366_5),
    (-0.906_179_845_938_664, 0.236_926_885_056_189_1),
    (0.906_179_845_938_664, 0.236_926_885_056_189_1),
];

/// Panels per knot span for the composite quadrature.
const PANELS_PER_SPAN: usize = 4;

#[derive(Debug, Clone, PartialEq)]
pub struct BSplineCurve {
    degree: usize,
    knots: Vec<f64>,
    control_points: Vec<Vec3>,
}

impl BSplineCurve {
    pub fn new(degree: usize, knots: Vec<f64>, control_points: Vec<Vec3>) -> Result<Self, SplineError> {
        if control_points.len() < degree + 1 {
            return Err(SplineError::TooFewPoints(control_points.len()));
        }
        if degree > MAX_DEGREE {
            return Err(SplineError::Degenerate(format!("degree {degree} exceeds {MAX_DEGREE}")));
        }
        if knots.len() != control_points.len() + degree + 1 {
            return Err(SplineError::Degenerate(format!(
                "{} knots for {} control points of degree {degree}",
                knots.len(),
                control_points.len()
            )));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(SplineError::Degenerate("knots must be nondecreasing".into()));
        }
        Ok(Self {
            degree,
            knots,
            control_points,
        })
    }

    pub fn degree(&self) -> usize {
        self.degree
    }

    pub fn knots(&self) -> &[f64] {
        &self.knots
    }

    pub fn control_points(&self) -> &[Vec3] {
        &self.control_points
    }

    fn domain(&self) -> (f64, f64) {
        (
            self.knots[self.degree],
            self.knots[self.control_points.len()],
        )
    }

    fn find_span(&self, u: f64) -> usize {
        let n = self.control_points.len() - 1;
        let p = self.degree;
        if u >= self.knots[n + 1] {
            // last non-empty span
            let mut k = n;
            while k > p && self.knots[k] == self.knots[k + 1] {
                k -= 1;
            }
            return k;
        }
        if u <= self.knots[p] {
            return p;
        }
        let (mut lo, mut hi) = (p, n + 1);
        while hi - lo > 1 {
            let mid = (lo + hi) / 2;
            if u < self.knots[mid] {
                hi = mid;
            } else {
                lo = mid;
            }
        }
        lo
    }

    /// Point (`order = 0`) or derivative of order ≤ 1 at `u`.
    fn eval_order(&self, u: f64, order: usize) -> Vec3 {
        let span = self.find_span(u);
        let ders = basis_derivatives(&self.knots, self.degree, span, u, order);
        let mut out = Vec3::zeros();
        for (j, b) in ders[order][..=self.degree].iter().enumerate() {
            out += self.control_points[span - self.degree + j] * *b;
        }
        out
    }

    pub fn point(&self, u: f64) -> Vec3 {
        self.eval_order(u, 0)
    }

    pub fn derivative(&self, u: f64) -> Vec3 {
        self.eval_order(u, 1)
    }

    /// Distinct span boundaries across the domain.
    fn breakpoints(&self) -> Vec<f64> {
        let (a, b) = self.domain();
        let mut out: Vec<f64> = self
            .knots
            .iter()
            .copied()
            .filter(|k| *k >= a && *k <= b)
            .collect();
        out.dedup();
        out
    }
}

/// Largest supported degree.
pub const MAX_DEGREE: usize = 7;

type BasisRow = [f64; MAX_DEGREE + 1];

/// Basis function values and first derivatives for the non-zero functions on
/// `span` (Piegl & Tiller, A2.3). Entries past `p` are zero.
fn basis_derivatives(knots: &[f64], p: usize, span: usize, u: f64, order: usize) -> [BasisRow; 2] {
    let mut ndu = [[0.0; MAX_DEGREE + 1]; MAX_DEGREE + 1];
    let mut left = [0.0; MAX_DEGREE + 1];
    let mut right = [0.0; MAX_DEGREE + 1];
    ndu[0][0] = 1.0;
    for j in 1..=p {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = 0.0;
        for r in 0..j {
            ndu[j][r] = right[r + 1] + left[j - r];
            let temp = ndu[r][j - 1] / ndu[j][r];
            ndu[r][j] = saved + right[r + 1] * temp;
            saved = left[j - r] * temp;
        }
        ndu[j][j] = saved;
    }
    let mut ders = [[0.0; MAX_DEGREE + 1]; 2];
    for j in 0..=p {
        ders[0][j] = ndu[j][p];
    }
    if order >= 1 && p >= 1 {
        for r in 0..=p {
            let mut d = 0.0;
            if r >= 1 {
                d += ndu[r - 1][p - 1] / ndu[p][r - 1];
            }
            if r < p {
                d -= ndu[r][p - 1] / ndu[p][r];
            }
            ders[1][r] = d * p as f64;
        }
    }
    ders
}

/// Result of a least-squares fit.
#[derive(Debug, Clone)]
pub struct SplineFit {
    pub curve: BSplineCurve,
    /// RMS distance between interior data points and the curve at their
    /// parameters.
    pub rms_residual: f64,
}

/// Number of control points used for `n_raw` observed points.
pub fn control_count(n_raw: usize) -> usize {
    8usize.max(n_raw.div_ceil(4))
}

/// Fits a clamped B-spline through `tcp_right`, the ordered `raw_points`, and
/// `tcp_left`. Both TCPs are interpolated exactly; interior points are
/// approximated in the least-squares sense with chord-length parameters.
pub fn fit_bspline(raw_points: &[Vec3], tcp_right: Vec3, tcp_left: Vec3) -> Result<SplineFit, SplineError> {
    let mut pts = Vec::with_capacity(raw_points.len() + 2);
    pts.push(tcp_right);
    pts.extend_from_slice(raw_points);
    pts.push(tcp_left);
    if pts.iter().any(|p| !p.iter().all(|c| c.is_finite())) {
        return Err(SplineError::Degenerate("non-finite input point".into()));
    }
    // Consecutive duplicates break chord parameterization; drop them but keep
    // the TCPs as the end points.
    let mut q: Vec<Vec3> = Vec::with_capacity(pts.len());
    for (i, p) in pts.iter().enumerate() {
        let is_last = i + 1 == pts.len();
        match q.last() {
            Some(prev) if (p - prev).norm() == 0.0 => {
                if is_last && q.len() > 1 {
                    *q.last_mut().unwrap() = *p;
                }
            }
            _ => q.push(*p),
        }
    }
    if q.len() < 2 {
        return Err(SplineError::TooFewPoints(q.len()));
    }
    let chords: Vec<f64> = q.windows(2).map(|w| (w[1] - w[0]).norm()).collect();
    let total: f64 = chords.iter().sum();
    if total <= 0.0 || !total.is_finite() {
        return Err(SplineError::Degenerate("zero total chord length".into()));
    }
    let mut params = Vec::with_capacity(q.len());
    let mut acc = 0.0;
    params.push(0.0);
    for c in &chords[..chords.len() - 1] {
        acc += c;
        params.push(acc / total);
    }
    params.push(1.0);
    if params.windows(2).any(|w| w[1] <= w[0]) {
        return Err(SplineError::Degenerate("non-monotone chord parameterization".into()));
    }

    let m = q.len();
    let n_ctrl = control_count(raw_points.len()).min(m);
    let p = DEFAULT_DEGREE.min(n_ctrl - 1);
    let knots = if n_ctrl == m {
        interpolation_knots(&params, p)
    } else {
        approximation_knots(&params, n_ctrl, p)
    };

    let mut ctrl = vec![Vec3::zeros(); n_ctrl];
    ctrl[0] = q[0];
    ctrl[n_ctrl - 1] = q[m - 1];
    let unknowns = n_ctrl - 2;
    if unknowns > 0 {
        // Rows: interior data points. Columns: interior control points.
        let rows = m - 2;
        let mut basis = DMatrix::<f64>::zeros(rows, n_ctrl);
        let probe = BSplineCurve::new(p, knots.clone(), vec![Vec3::zeros(); n_ctrl])?;
        for (r, &u) in params[1..m - 1].iter().enumerate() {
            let span = probe.find_span(u);
            let b = basis_derivatives(&knots, p, span, u, 0);
            for (j, v) in b[0][..=p].iter().enumerate() {
                basis[(r, span - p + j)] = *v;
            }
        }
        let inner = basis.columns(1, unknowns).into_owned();
        let normal = inner.transpose() * &inner;
        let chol = normal
            .cholesky()
            .ok_or_else(|| SplineError::Degenerate("singular least-squares system".into()))?;
        for axis in 0..3 {
            let rhs = DVector::from_iterator(
                rows,
                (0..rows).map(|r| {
                    q[r + 1][axis]
                        - basis[(r, 0)] * q[0][axis]
                        - basis[(r, n_ctrl - 1)] * q[m - 1][axis]
                }),
            );
            let sol = chol.solve(&(inner.transpose() * rhs));
            for j in 0..unknowns {
                ctrl[j + 1][axis] = sol[j];
            }
        }
    }
    let curve = BSplineCurve::new(p, knots, ctrl)?;
    let rms_residual = if m > 2 {
        let ss: f64 = params[1..m - 1]
            .iter()
            .zip(&q[1..m - 1])
            .map(|(u, x)| (curve.point(*u) - x).norm_squared())
            .sum();
        (ss / (m - 2) as f64).sqrt()
    } else {
        0.0
    };
    Ok(SplineFit {
        curve,
        rms_residual,
    })
}

fn clamped(p: usize, interior: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut knots = vec![0.0; p + 1];
    knots.extend(interior);
    knots.extend(std::iter::repeat_n(1.0, p + 1));
    knots
}

fn interpolation_knots(params: &[f64], p: usize) -> Vec<f64> {
    let n = params.len();
    clamped(
        p,
        (1..n - p).map(|j| params[j..j + p].iter().sum::<f64>() / p as f64),
    )
}

/// Knot placement guaranteeing every span holds data (Piegl & Tiller, 9.69).
fn approximation_knots(params: &[f64], n_ctrl: usize, p: usize) -> Vec<f64> {
    let m = params.len();
    let d = m as f64 / (n_ctrl - p) as f64;
    clamped(
        p,
        (1..n_ctrl - p).map(|j| {
            let jd = j as f64 * d;
            let i = jd.floor() as usize;
            let alpha = jd - i as f64;
            (1.0 - alpha) * params[i - 1] + alpha * params[i]
        }),
    )
}

/// Cumulative arc-length table over quadrature panels.
pub struct ArcLength<'a> {
    curve: &'a BSplineCurve,
    panels: Vec<f64>,
    cumulative: Vec<f64>,
}

impl<'a> ArcLength<'a> {
    pub fn new(curve: &'a BSplineCurve) -> Self {
        let breaks = curve.breakpoints();
        let mut panels = vec![breaks[0]];
        for w in breaks.windows(2) {
            for k in 1..=PANELS_PER_SPAN {
                let t = k as f64 / PANELS_PER_SPAN as f64;
                panels.push(w[0] + (w[1] - w[0]) * t);
            }
        }
        *panels.last_mut().unwrap() = *breaks.last().unwrap();
        let mut cumulative = vec![0.0];
        for w in panels.windows(2) {
            let s = cumulative.last().unwrap() + gauss_length(curve, w[0], w[1]);
            cumulative.push(s);
        }
        Self {
            curve,
            panels,
            cumulative,
        }
    }

    pub fn total(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    /// Arc length from the start of the curve to `u`.
    pub fn length_to(&self, u: f64) -> f64 {
        let k = self.panel_of(u);
        self.cumulative[k] + gauss_length(self.curve, self.panels[k], u)
    }

    fn panel_of(&self, u: f64) -> usize {
        let idx = self.panels.partition_point(|x| *x <= u);
        idx.saturating_sub(1).min(self.panels.len() - 2)
    }

    /// Parameter at which the arc length equals `s`, found by safeguarded
    /// Newton iteration inside the bracketing panel.
    pub fn parameter_at(&self, s: f64) -> f64 {
        if s <= 0.0 {
            return self.panels[0];
        }
        if s >= self.total() {
            return *self.panels.last().unwrap();
        }
        let k = self.cumulative.partition_point(|c| *c <= s).saturating_sub(1);
        let k = k.min(self.panels.len() - 2);
        let (mut lo, mut hi) = (self.panels[k], self.panels[k + 1]);
        let base = self.cumulative[k];
        let seg = self.cumulative[k + 1] - base;
        let mut u = if seg > 0.0 {
            lo + (hi - lo) * (s - base) / seg
        } else {
            lo
        };
        for _ in 0..100 {
            let f = base + gauss_length(self.curve, self.panels[k], u) - s;
            if f > 0.0 {
                hi = u;
            } else {
                lo = u;
            }
            let speed = self.curve.derivative(u).norm();
            let mut next = if speed > 0.0 { u - f / speed } else { f64::NAN };
            if !(next > lo && next < hi) {
                next = 0.5 * (lo + hi);
            }
            if (next - u).abs() <= 1e-14 || hi - lo <= 1e-14 {
                return next;
            }
            u = next;
        }
        u
    }
}

fn gauss_length(curve: &BSplineCurve, a: f64, b: f64) -> f64 {
    if b <= a {
        return 0.0;
    }
    let half = 0.5 * (b - a);
    let mid = 0.5 * (a + b);
    GL5.iter()
        .map(|(x, w)| w * curve.derivative(mid + half * x).norm())
        .sum::<f64>()
        * half
}

/// `n` points equally spaced along the curve by arc length.
pub fn resample_equidistant(curve: &BSplineCurve, n: usize) -> Result<DloState, SplineError> {
    if n < 3 {
        return Err(SplineError::TooFewPoints(n));
    }
    let table = ArcLength::new(curve);
    let total = table.total();
    if !(total > 0.0) {
        return Err(SplineError::Degenerate("zero-length curve".into()));
    }
    let (a, b) = curve.domain();
    let mut pts = Vec::with_capacity(n);
    pts.push(curve.point(a));
    for j in 1..n - 1 {
        let s = total * j as f64 / (n - 1) as f64;
        pts.push(curve.point(table.parameter_at(s)));
    }
    pts.push(curve.point(b));
    DloState::new(pts).map_err(|e| SplineError::Degenerate(e.to_string()))
}

/// Fits a spline through a state (first/last points as anchors) and returns
/// `n` arc-length-uniform samples.
pub fn densify(state: &DloState, n: usize) -> Result<DloState, SplineError> {
    let pts = state.points();
    let last = pts.len() - 1;
    let fit = fit_bspline(&pts[1..last], pts[0], pts[last])?;
    resample_equidistant(&fit.curve, n)
}

/// Replaces the depth coordinate (component along `depth_axis`) of points
/// whose lateral distance to either TCP is below `radius` by the depth of a
/// spline fitted to the remaining points.
pub fn suppress_end_depth(
    raw_points: &[Vec3],
    tcp_right: Vec3,
    tcp_left: Vec3,
    radius: f64,
    depth_axis: Vec3,
) -> Result<Vec<Vec3>, SplineError> {
    if !(radius > 0.0) {
        return Ok(raw_points.to_vec());
    }
    let axis = depth_axis.normalize();
    let lateral = |v: Vec3| v - axis * axis.dot(&v);
    let near = |p: &Vec3| {
        lateral(p - tcp_right).norm() < radius || lateral(p - tcp_left).norm() < radius
    };
    let suppressed: Vec<bool> = raw_points.iter().map(near).collect();
    if !suppressed.iter().any(|&s| s) {
        return Ok(raw_points.to_vec());
    }
    if suppressed.iter().all(|&s| s) {
        return Err(SplineError::Degenerate(
            "every point lies within the suppression radius".into(),
        ));
    }
    let kept: Vec<Vec3> = raw_points
        .iter()
        .zip(&suppressed)
        .filter(|(_, s)| !**s)
        .map(|(p, _)| *p)
        .collect();
    let fit = fit_bspline(&kept, tcp_right, tcp_left)?;
    let curve = &fit.curve;
    const SCAN: usize = 400;
    let samples: Vec<(f64, Vec3)> = (0..=SCAN)
        .map(|i| {
            let u = i as f64 / SCAN as f64;
            (u, lateral(curve.point(u)))
        })
        .collect();
    let mut out = raw_points.to_vec();
    for (p, _) in out.iter_mut().zip(&suppressed).filter(|(_, s)| **s) {
        let target = lateral(*p);
        let (mut best_u, mut best_d) = (0.0, f64::INFINITY);
        for (u, q) in &samples {
            let d = (q - target).norm_squared();
            if d < best_d {
                best_d = d;
                best_u = *u;
            }
        }
        // golden-section refinement on the neighbouring scan cells
        let (mut lo, mut hi) = (
            (best_u - 1.0 / SCAN as f64).max(0.0),
            (best_u + 1.0 / SCAN as f64).min(1.0),
        );
        let dist = |u: f64| (lateral(curve.point(u)) - target).norm_squared();
        let g = 0.5 * (5f64.sqrt() - 1.0);
        for _ in 0..60 {
            let a = hi - g * (hi - lo);
            let b = lo + g * (hi - lo);
            if dist(a) < dist(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let depth = axis.dot(&curve.point(0.5 * (lo + hi)));
        *p = target + axis * depth;
    }
    Ok(out)
}

/// Mean over `from` of the distance to the nearest point of `to`, with `to`
/// sorted along x for pruning.
fn mean_nearest(from: &[Vec3], to_sorted: &[Vec3]) -> f64 {
    let sum: f64 = from
        .iter()
        .map(|p| {
            let start = to_sorted.partition_point(|q| q.x < p.x);
            let mut best = f64::INFINITY;
            for q in &to_sorted[start..] {
                let dx = q.x - p.x;
                if dx * dx >= best {
                    break;
                }
                best = best.min((q - p).norm_squared());
            }
            for q in to_sorted[..start].iter().rev() {
                let dx = p.x - q.x;
                if dx * dx >= best {
                    break;
                }
                best = best.min((q - p).norm_squared());
            }
            best.sqrt()
        })
        .sum();
    sum / from.len() as f64
}

/// Symmetrized mean nearest-sample distance between two dense
/// arc-length-uniform resamplings.
pub fn dense_distance(a: &[Vec3], b: &[Vec3]) -> f64 {
    let sorted = |v: &[Vec3]| {
        let mut s = v.to_vec();
        s.sort_by(|p, q| p.x.total_cmp(&q.x));
        s
    };
    let (sa, sb) = (sorted(a), sorted(b));
    0.5 * (mean_nearest(a, &sb) + mean_nearest(b, &sa))
}

/// Curve-to-curve distance between two states in meters.
pub fn curve_distance_l3(a: &DloState, b: &DloState) -> Result<f64, SplineError> {
    if a == b {
        return Ok(0.0);
    }
    let da = densify(a, L3_SAMPLES)?;
    let db = densify(b, L3_SAMPLES)?;
    Ok(dense_distance(da.points(), db.points()))
}

/// `L3(pred, truth) / L3(initial, truth)`; `None` when the ground truth did
/// not move, so the sample carries no signal.
pub fn relative_error(
    pred: &DloState,
    truth_next: &DloState,
    initial: &DloState,
) -> Result<Option<f64>, SplineError> {
    let denom = curve_distance_l3(initial, truth_next)?;
    if denom <= 1e-12 {
        return Ok(None);
    }
    Ok(Some(curve_distance_l3(pred, truth_next)? / denom))
}

/// Memoizes [`densify`] for states scored many times, as in an evaluation
/// where every observed state appears in many pairs.
#[derive(Debug, Default)]
pub struct DenseCache {
    map: std::collections::HashMap<Vec<u64>, DloState>,
}

impl DenseCache {
    pub fn new() -> Self {
        Self::default()
    }

    fn key(s: &DloState) -> Vec<u64> {
        s.points().iter().flat_map(|p| p.iter().map(|c| c.to_bits())).collect()
    }

    fn ensure(&mut self, s: &DloState) -> Result<Vec<u64>, SplineError> {
        let key = Self::key(s);
        if !self.map.contains_key(&key) {
            self.map.insert(key.clone(), densify(s, L3_SAMPLES)?);
        }
        Ok(key)
    }

    /// Same value as [`curve_distance_l3`].
    pub fn distance(&mut self, a: &DloState, b: &DloState) -> Result<f64, SplineError> {
        if a == b {
            return Ok(0.0);
        }
        let (ka, kb) = (self.ensure(a)?, self.ensure(b)?);
        Ok(dense_distance(self.map[&ka].points(), self.map[&kb].points()))
    }

    /// Same value as [`relative_error`].
    pub fn relative_error(
        &mut self,
        pred: &DloState,
        truth_next: &DloState,
        initial: &DloState,
    ) -> Result<Option<f64>, SplineError> {
        let denom = self.distance(initial, truth_next)?;
        if denom <= 1e-12 {
            return Ok(None);
        }
        // predictions are rarely repeated; only the ground truth is cached
        let num = if pred == truth_next {
            0.0
        } else {
            let k = self.ensure(truth_next)?;
            dense_distance(densify(pred, L3_SAMPLES)?.points(), self.map[&k].points())
        };
        Ok(Some(num / denom))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

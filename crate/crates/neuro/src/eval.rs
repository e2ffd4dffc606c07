use std::f64::consts::PI;
use std::time::Instant;

use dlo_core::data::{scale_for_length, Sample};
use dlo_core::spline::DenseCache;
use dlo_core::{assemble_input, make_action, DloState, GripperPair, Pose, Vec3};
use nalgebra::Rotation3;
use serde::{Deserialize, Serialize};

use crate::{ModelParams, NeuroError};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorRecord {
    /// Position of the sample in the evaluated slice.
    pub index: usize,
    pub sequence_id: u64,
    /// `None` when the ground truth did not move.
    pub relative_error: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorSummary {
    pub mean: f64,
    pub median: f64,
    pub p5: f64,
    pub p50: f64,
    pub p95: f64,
    pub n_evaluated: usize,
    pub n_excluded: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReport {
    pub summary: ErrorSummary,
    pub records: Vec<ErrorRecord>,
}

impl ErrorReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("sample,sequence_id,relative_error\n");
        for r in &self.records {
            let e = r.relative_error.map_or(String::new(), |e| e.to_string());
            out.push_str(&format!("{},{},{}\n", r.index, r.sequence_id, e));
        }
        out
    }
}

/// Percentile `q ∈ [0, 100]` of ascending `sorted` with linear interpolation
/// between closest ranks. NaN for an empty slice.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    match sorted.len() {
        0 => f64::NAN,
        1 => sorted[0],
        n => {
            let pos = q.clamp(0.0, 100.0) / 100.0 * (n - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(n - 1);
            sorted[lo] + (pos - lo as f64) * (sorted[hi] - sorted[lo])
        }
    }
}

/// Scores predicted next states against the samples' ground truth.
pub fn score_predictions(samples: &[Sample], predicted: &[DloState]) -> Result<ErrorReport, NeuroError> {
    if samples.len() != predicted.len() {
        return Err(NeuroError::Shape(format!(
            "{} predictions for {} samples",
            predicted.len(),
            samples.len()
        )));
    }
    let mut records = Vec::with_capacity(samples.len());
    let mut cache = DenseCache::new();
    for (index, (s, p)) in samples.iter().zip(predicted).enumerate() {
        let e = cache
            .relative_error(p, &s.s_next, &s.s_prev).map_err(|e| NeuroError::Config(e.to_string()))?;
        records.push(ErrorRecord {
            index,
            sequence_id: s.sequence_id,
            relative_error: e,
        });
    }
    let mut values: Vec<f64> = records.iter().filter_map(|r| r.relative_error).collect();
    values.sort_by(f64::total_cmp);
    let mean = if values.is_empty() {
        f64::NAN
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    };
    let summary = ErrorSummary {
        mean,
        median: percentile(&values, 50.0),
        p5: percentile(&values, 5.0),
        p50: percentile(&values, 50.0),
        p95: percentile(&values, 95.0),
        n_evaluated: values.len(),
        n_excluded: records.len() - values.len(),
    };
    Ok(ErrorReport { summary, records })
}

/// Relative prediction errors of a model. `scale = (l_train, l_test)`
/// rescales inputs into training units and predictions back.
pub fn evaluate(params: &ModelParams, samples: &[Sample], scale: Option<(f64, f64)>) -> Result<ErrorReport, NeuroError> {
    let mut predicted = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(256) {
        let mut bundles = Vec::with_capacity(chunk.len());
        for s in chunk {
            let (mut b, _) = s.encode(&params.cfg)?;
            if let Some((l_train, l_test)) = scale {
                b = scale_for_length(&b, l_train, l_test)?;
            }
            bundles.push(b);
        }
        for (s, d) in chunk.iter().zip(params.predict(&bundles)?) {
            predicted.push(params.next_state(&s.s_prev, &s.p_prev, &d, scale)?);
        }
    }
    score_predictions(samples, &predicted)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub arch: String,
    pub batch: usize,
    pub median_us: f64,
    pub p95_us: f64,
    pub reps: usize,
}

pub fn bench_csv(rows: &[BenchRow]) -> String {
    let mut out = String::from("arch,batch,median_us,p95_us,reps\n");
    for r in rows {
        out.push_str(&format!("{},{},{:.3},{:.3},{}\n", r.arch, r.batch, r.median_us, r.p95_us, r.reps));
    }
    out
}

/// A sagging rod between two grippers, with a small action, for timing.
fn bench_input(params: &ModelParams) -> Result<dlo_core::FeatureBundle, NeuroError> {
    let n = params.cfg.n_points;
    let pts = (0..n)
        .map(|i| {
            let s = i as f64 / (n - 1) as f64;
            Vec3::new(0.35 * s, 0.0, -0.1 * (PI * s).sin())
        })
        .collect();
    let state = DloState::new(pts)?;
    let g = GripperPair::new(
        Pose::new(Vec3::new(0.35, 0.0, 0.0), Rotation3::from_axis_angle(&Vec3::z_axis(), PI)),
        Pose::identity(),
    );
    let mut next = g;
    next.left.t += Vec3::new(0.01, 0.02, -0.01);
    let action = make_action(&g, &next, params.cfg.action);
    Ok(assemble_input(&state, &g, &action, &params.cfg)?)
}

/// Wall time of one batched forward pass per batch size, after `warmup`
/// untimed runs.
pub fn benchmark_inference(
    params: &ModelParams,
    batch_sizes: &[usize],
    warmup: usize,
    reps: usize,
) -> Result<Vec<BenchRow>, NeuroError> {
    let input = bench_input(params)?;
    let mut rows = vec![];
    for &batch in batch_sizes {
        let bundles = vec![input.clone(); batch.max(1)];
        for _ in 0..warmup {
            std::hint::black_box(params.predict(&bundles)?);
        }
        let mut times = Vec::with_capacity(reps);
        for _ in 0..reps.max(1) {
            let t = Instant::now();
            std::hint::black_box(params.predict(&bundles)?);
            times.push(t.elapsed().as_secs_f64() * 1e6);
        }
        times.sort_by(f64::total_cmp);
        rows.push(BenchRow {
            arch: params.arch.tag().into(),
            batch,
            median_us: percentile(&times, 50.0),
            p95_us: percentile(&times, 95.0),
            reps: times.len(),
        });
    }
    Ok(rows)
}

//! Paired-transition datasets: construction from simulated sequences,
//! no-motion augmentation, length scaling, subsampling and JSON-lines files.

use std::collections::{BTreeSet, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::repr::{encode_delta, make_action};
use crate::types::GripperPairRecord;
use crate::{
    assemble_input, to_gripper_frame, DloState, FeatureBundle, GripperPair, ReprError,
    RepresentationConfig,
};

pub const DATASET_VERSION: u32 = 1;
pub const DATASET_EXTENSION: &str = "dlods.jsonl";

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("line {line}: {message}")]
    Validation { line: usize, message: String },
    #[error("dataset version {found} is not supported (expected {DATASET_VERSION})")]
    Version { found: u32 },
    #[error("configuration error: {0}")]
    Config(String),
    #[error("dataset is empty")]
    Empty,
    #[error(transparent)]
    Repr(#[from] ReprError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];
}

/// One transition `(s_prev, p_prev) → (s_next, p_next)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub s_prev: DloState,
    pub p_prev: GripperPair,
    pub s_next: DloState,
    pub p_next: GripperPair,
    pub sequence_id: u64,
    pub is_augmented: bool,
    pub split: Split,
}

impl Sample {
    /// Model input and regression target (change of the local-frame state).
    pub fn encode(&self, cfg: &RepresentationConfig) -> Result<(FeatureBundle, Vec<f64>), ReprError> {
        let action = make_action(&self.p_prev, &self.p_next, cfg.action);
        let bundle = assemble_input(&self.s_prev, &self.p_prev, &action, cfg)?;
        let target = encode_delta(
            &to_gripper_frame(&self.s_prev, &self.p_prev),
            &to_gripper_frame(&self.s_next, &self.p_prev),
            cfg.state,
        );
        Ok((bundle, target))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub version: u32,
    pub n_points: usize,
    pub rod_preset: String,
    pub rod_length: f64,
    /// Sample counts for train, val, test.
    pub split_sizes: [usize; 3],
    pub seed: u64,
    pub representation: RepresentationConfig,
    /// Hash of the experiment configuration that produced the file.
    #[serde(default)]
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub header: DatasetHeader,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(mut header: DatasetHeader, samples: Vec<Sample>) -> Self {
        header.split_sizes = split_sizes(&samples);
        Self { header, samples }
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &Sample> {
        self.samples.iter().filter(move |s| s.split == split)
    }

    /// Copy restricted to one split.
    pub fn only(&self, split: Split) -> Dataset {
        Dataset::new(self.header.clone(), self.split(split).cloned().collect())
    }

    pub fn mean_motion(&self) -> f64 {
        let mut total = 0.0;
        let mut count = 0usize;
        for s in &self.samples {
            for (a, b) in s.s_prev.points().iter().zip(s.s_next.points()) {
                total += (b - a).norm();
                count += 1;
            }
        }
        if count == 0 {
            0.0
        } else {
            total / count as f64
        }
    }
}

fn split_sizes(samples: &[Sample]) -> [usize; 3] {
    let mut sizes = [0; 3];
    for s in samples {
        sizes[s.split as usize] += 1;
    }
    sizes
}

/// All ordered pairs `(i, j)`, `i ≠ j`, of one sequence.
pub fn pair_samples(seq: &[(GripperPair, DloState)], sequence_id: u64) -> Vec<Sample> {
    let mut out = Vec::with_capacity(seq.len() * seq.len().saturating_sub(1));
    for (i, (pi, si)) in seq.iter().enumerate() {
        for (j, (pj, sj)) in seq.iter().enumerate() {
            if i != j {
                out.push(Sample {
                    s_prev: si.clone(),
                    p_prev: *pi,
                    s_next: sj.clone(),
                    p_next: *pj,
                    sequence_id,
                    is_augmented: false,
                    split: Split::Train,
                });
            }
        }
    }
    out
}

/// Assigns whole sequences to splits. Sequence ids are shuffled with `seed`;
/// validation and test each get `round(fraction · count)` sequences, training
/// gets the rest.
pub fn split_by_sequence(samples: &mut [Sample], fractions: [f64; 3], seed: u64) -> Result<(), DataError> {
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(DataError::Config(format!("split fractions {fractions:?} must be ≥ 0 and sum to 1")));
    }
    let mut ids: Vec<u64> = samples
        .iter()
        .map(|s| s.sequence_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n = ids.len();
    let n_val = (fractions[1] * n as f64).round() as usize;
    let n_test = ((fractions[2] * n as f64).round() as usize).min(n - n_val.min(n));
    let n_val = n_val.min(n);
    let n_train = n - n_val - n_test;
    let assign = |id: u64| {
        let pos = ids.iter().position(|&x| x == id).unwrap_or(0);
        if pos < n_train {
            Split::Train
        } else if pos < n_train + n_val {
            Split::Val
        } else {
            Split::Test
        }
    };
    for s in samples.iter_mut() {
        s.split = assign(s.sequence_id);
    }
    Ok(())
}

fn config_key(s: &DloState, p: &GripperPair) -> Vec<u64> {
    let mut key: Vec<u64> = s.flat().iter().map(|x| x.to_bits()).collect();
    for pose in [&p.left, &p.right] {
        key.extend(pose.t.iter().map(|x| x.to_bits()));
        key.extend(pose.r.matrix().transpose().iter().map(|x| x.to_bits()));
    }
    key
}

/// Appends one null-motion sample for every distinct configuration in the
/// dataset that does not have one yet. Original samples are left in place.
pub fn augment_no_motion(dataset: &Dataset) -> Dataset {
    let mut seen: HashSet<Vec<u64>> = dataset
        .samples
        .iter()
        .filter(|s| s.is_augmented)
        .map(|s| config_key(&s.s_prev, &s.p_prev))
        .collect();
    let mut samples = dataset.samples.clone();
    for s in &dataset.samples {
        for (state, pose) in [(&s.s_prev, &s.p_prev), (&s.s_next, &s.p_next)] {
            if seen.insert(config_key(state, pose)) {
                samples.push(Sample {
                    s_prev: state.clone(),
                    p_prev: *pose,
                    s_next: state.clone(),
                    p_next: *pose,
                    sequence_id: s.sequence_id,
                    is_augmented: true,
                    split: s.split,
                });
            }
        }
    }
    Dataset::new(dataset.header.clone(), samples)
}

/// Rescales positional features of a bundle built on a rod of length
/// `l_test` so a model trained on length `l_train` can consume it.
pub fn scale_for_length(bundle: &FeatureBundle, l_train: f64, l_test: f64) -> Result<FeatureBundle, DataError> {
    if !(l_train > 0.0 && l_test > 0.0) {
        return Err(DataError::Config(format!(
            "lengths must be positive, got {l_train} and {l_test}"
        )));
    }
    let mut out = bundle.clone();
    if l_train == l_test {
        return Ok(out);
    }
    let k = l_train / l_test;
    out.state.iter_mut().for_each(|x| *x *= k);
    out.left_position.iter_mut().for_each(|x| *x *= k);
    out.left_motion.iter_mut().for_each(|x| *x *= k);
    out.jacobian_action[..3].iter_mut().for_each(|x| *x *= k);
    Ok(out)
}

/// Uniform subset without replacement of `max(1, ⌊fraction·n⌋)` samples,
/// kept in original order.
pub fn subsample_fraction(dataset: &Dataset, fraction: f64, seed: u64) -> Result<Dataset, DataError> {
    if dataset.is_empty() {
        return Err(DataError::Empty);
    }
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(DataError::Config(format!("fraction must be in (0, 1], got {fraction}")));
    }
    let n = dataset.len();
    let k = ((fraction * n as f64).floor() as usize).clamp(1, n);
    if k == n {
        return Ok(dataset.clone());
    }
    let mut picked = index::sample(&mut ChaCha8Rng::seed_from_u64(seed), n, k).into_vec();
    picked.sort_unstable();
    let samples = picked.into_iter().map(|i| dataset.samples[i].clone()).collect();
    Ok(Dataset::new(dataset.header.clone(), samples))
}

#[derive(Serialize, Deserialize)]
struct HeaderLine {
    format: String,
    #[serde(flatten)]
    header: DatasetHeader,
}

#[derive(Serialize, Deserialize)]
struct SampleLine {
    sequence_id: u64,
    split: Split,
    is_augmented: bool,
    s_prev: Vec<f64>,
    p_prev: GripperPairRecord,
    s_next: Vec<f64>,
    p_next: GripperPairRecord,
}

const FORMAT_TAG: &str = "dlods";

pub fn write_dataset(dataset: &Dataset, path: &Path) -> Result<(), DataError> {
    let mut w = BufWriter::new(File::create(path)?);
    let header = HeaderLine {
        format: FORMAT_TAG.into(),
        header: DatasetHeader {
            version: DATASET_VERSION,
            split_sizes: split_sizes(&dataset.samples),
            ..dataset.header.clone()
        },
    };
    let to_io = |e: serde_json::Error| DataError::Io(e.into());
    serde_json::to_writer(&mut w, &header).map_err(to_io)?;
    w.write_all(b"\n")?;
    for s in &dataset.samples {
        let line = SampleLine {
            sequence_id: s.sequence_id,
            split: s.split,
            is_augmented: s.is_augmented,
            s_prev: s.s_prev.flat(),
            p_prev: (&s.p_prev).into(),
            s_next: s.s_next.flat(),
            p_next: (&s.p_next).into(),
        };
        serde_json::to_writer(&mut w, &line).map_err(to_io)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Dataset, DataError> {
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines().enumerate();
    let parse = |line: usize, e: serde_json::Error| DataError::Parse {
        line,
        message: e.to_string(),
    };
    let invalid = |line: usize, message: String| DataError::Validation { line, message };

    let (_, first) = lines.next().ok_or(DataError::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let first = first?;
    let version: serde_json::Value = serde_json::from_str(&first).map_err(|e| parse(1, e))?;
    if version.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
        return Err(invalid(1, "not a dataset header".into()));
    }
    match version.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == DATASET_VERSION as u64 => {}
        Some(v) => return Err(DataError::Version { found: v as u32 }),
        None => return Err(invalid(1, "header has no version".into())),
    }
    let header: HeaderLine = serde_json::from_value(version).map_err(|e| parse(1, e))?;
    let header = header.header;
    let n = header.n_points;

    let mut samples = Vec::new();
    for (idx, line) in lines {
        let lineno = idx + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine = serde_json::from_str(&line).map_err(|e| parse(lineno, e))?;
        let state = |flat: &[f64]| -> Result<DloState, DataError> {
            if flat.len() != 3 * n {
                return Err(invalid(
                    lineno,
                    format!("state has {} values, header says {} points", flat.len(), n),
                ));
            }
            DloState::from_flat(flat).map_err(|e| invalid(lineno, e.to_string()))
        };
        let pair = |r: GripperPairRecord| -> Result<GripperPair, DataError> {
            GripperPair::try_from(&r).map_err(|e| invalid(lineno, e.to_string()))
        };
        let sample = Sample {
            s_prev: state(&rec.s_prev)?,
            p_prev: pair(rec.p_prev)?,
            s_next: state(&rec.s_next)?,
            p_next: pair(rec.p_next)?,
            sequence_id: rec.sequence_id,
            is_augmented: rec.is_augmented,
            split: rec.split,
        };
        if sample.is_augmented && (sample.s_prev != sample.s_next || sample.p_prev != sample.p_next) {
            return Err(invalid(lineno, "augmented sample with motion".into()));
        }
        samples.push(sample);
    }
    if split_sizes(&samples) != header.split_sizes {
        return Err(invalid(
            1,
            format!(
                "header split sizes {:?} disagree with records {:?}",
                header.split_sizes,
                split_sizes(&samples)
            ),
        ));
    }
    let mut seen: std::collections::HashMap<u64, Split> = Default::default();
    for s in &samples {
        if *seen.entry(s.sequence_id).or_insert(s.split) != s.split {
            return Err(invalid(1, format!("sequence {} spans several splits", s.sequence_id)));
        }
    }
    Ok(Dataset { header, samples })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::{ActionMode, OrientationKind, Pose, StateKind, Vec3};
    use nalgebra::Rotation3;
    use rand::Rng;

    pub(crate) fn fake_sequence(rng: &mut ChaCha8Rng, n: usize) -> Vec<(GripperPair, DloState)> {
        (0..n)
            .map(|_| {
                let left = Pose::new(
                    Vec3::new(0.4 + rng.random_range(-0.05..0.05), rng.random_range(-0.05..0.05), 0.0),
                    Rotation3::from_euler_angles(rng.random_range(-0.3..0.3), 0.1, 3.0),
                );
                let right = Pose::new(Vec3::zeros(), Rotation3::from_euler_angles(0.0, rng.random_range(-0.3..0.3), 0.0));
                let pts: Vec<Vec3> = (0..16)
                    .map(|i| {
                        let s = i as f64 / 15.0;
                        left.t * s + Vec3::new(0.0, 0.0, -0.1 * (std::f64::consts::PI * s).sin() + rng.random_range(-1e-3..1e-3))
                    })
                    .collect();
                (GripperPair::new(left, right), DloState::new(pts).unwrap())
            })
            .collect()
    }

    fn header() -> DatasetHeader {
        DatasetHeader {
            version: DATASET_VERSION,
            n_points: 16,
            rod_preset: "two-wire".into(),
            rod_length: 0.5,
            split_sizes: [0; 3],
            seed: 11,
            representation: RepresentationConfig {
                state: StateKind::Points,
                orientation: OrientationKind::Quaternion,
                action: ActionMode::Difference,
                n_points: 16,
            },
            config_hash: String::new(),
        }
    }

    fn dataset(n_seq: usize, len: usize) -> Dataset {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut samples = Vec::new();
        for id in 0..n_seq {
            samples.extend(pair_samples(&fake_sequence(&mut rng, len), id as u64));
        }
        split_by_sequence(&mut samples, [0.7, 0.15, 0.15], 5).unwrap();
        Dataset::new(header(), samples)
    }

    #[test]
    fn pair_counts() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let seq = fake_sequence(&mut rng, 21);
        let pairs = pair_samples(&seq, 9);
        assert_eq!(pairs.len(), 420);
        assert!(pairs.iter().all(|s| s.sequence_id == 9 && !s.is_augmented));
        let two = pair_samples(&seq[..2], 0);
        assert_eq!(two.len(), 2);
        assert_eq!(two[0].s_prev, two[1].s_next);
    }

    #[test]
    fn augmentation_adds_one_per_configuration() {
        let d = dataset(1, 21);
        assert_eq!(d.len(), 420);
        let a = augment_no_motion(&d);
        assert_eq!(a.len(), 441);
        assert_eq!(&a.samples[..420], &d.samples[..]);
        assert_eq!(augment_no_motion(&a), a);

        let cfg = header().representation;
        for s in a.samples.iter().filter(|s| s.is_augmented) {
            let (bundle, target) = s.encode(&cfg).unwrap();
            assert!(target.iter().all(|&x| x == 0.0));
            assert_eq!(bundle.jacobian_action, [0.0; 9]);
            assert_eq!(bundle.left_motion, [0.0; 3]);
            let ident = crate::orientation::convert_orientation(&Rotation3::identity(), cfg.orientation);
            assert_eq!(&bundle.action_rotations[..4], ident.as_slice());
            assert_eq!(&bundle.action_rotations[4..], ident.as_slice());
        }
    }

    #[test]
    fn splits_keep_sequences_together() {
        let d = dataset(20, 5);
        let mut owner = std::collections::HashMap::new();
        for s in &d.samples {
            assert_eq!(*owner.entry(s.sequence_id).or_insert(s.split), s.split);
        }
        assert_eq!(d.header.split_sizes.iter().sum::<usize>(), d.len());
        // 20 sequences: 3 val, 3 test, 14 train
        assert_eq!(d.header.split_sizes, [14 * 20, 3 * 20, 3 * 20]);
    }

    #[test]
    fn length_scaling() {
        let d = dataset(1, 3);
        let cfg = RepresentationConfig {
            orientation: OrientationKind::Matrix,
            ..header().representation
        };
        let (b, _) = d.samples[0].encode(&cfg).unwrap();
        assert_eq!(scale_for_length(&b, 0.5, 0.5).unwrap(), b);
        let s = scale_for_length(&b, 0.5, 0.4).unwrap();
        for (x, y) in s.state.iter().zip(&b.state) {
            assert_eq!(*x, y * 1.25);
        }
        for k in 0..3 {
            assert_eq!(s.left_position[k], b.left_position[k] * 1.25);
            assert_eq!(s.left_motion[k], b.left_motion[k] * 1.25);
        }
        assert_eq!(s.rotation_block(), b.rotation_block());
        assert_eq!(s.jacobian_action[3..], b.jacobian_action[3..]);
        assert!(scale_for_length(&b, 0.0, 0.4).is_err());
        assert!(scale_for_length(&b, 0.5, -1.0).is_err());
    }

    #[test]
    fn subsampling() {
        let d = dataset(3, 5);
        assert_eq!(subsample_fraction(&d, 1.0, 0).unwrap(), d);
        let a = subsample_fraction(&d, 0.25, 7).unwrap();
        assert_eq!(a.len(), 15);
        assert_eq!(a, subsample_fraction(&d, 0.25, 7).unwrap());
        assert_eq!(subsample_fraction(&d, 1e-6, 7).unwrap().len(), 1);
        assert_eq!(a.header.split_sizes.iter().sum::<usize>(), 15);
        assert!(subsample_fraction(&d, 0.0, 7).is_err());
        assert!(subsample_fraction(&d, 1.5, 7).is_err());
        let empty = Dataset::new(header(), vec![]);
        assert!(matches!(subsample_fraction(&empty, 0.5, 1), Err(DataError::Empty)));
    }

    #[test]
    fn floor_of_tiny_fraction() {
        let mut samples = pair_samples(&fake_sequence(&mut ChaCha8Rng::seed_from_u64(2), 59), 0);
        samples.truncate(3378);
        let d = Dataset::new(header(), samples);
        assert_eq!(d.len(), 3378);
        assert_eq!(subsample_fraction(&d, 0.001, 1).unwrap().len(), 3);
    }

    #[test]
    fn file_round_trip() {
        let d = augment_no_motion(&dataset(1, 21));
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("set.dlods.jsonl");
        write_dataset(&d, &path).unwrap();
        let back = read_dataset(&path).unwrap();
        assert_eq!(back, d);
        for (a, b) in back.samples.iter().zip(&d.samples) {
            let bits = |s: &DloState| s.flat().iter().map(|x| x.to_bits()).collect::<Vec<_>>();
            assert_eq!(bits(&a.s_prev), bits(&b.s_prev));
        }
    }

    #[test]
    fn truncated_file_names_line() {
        let d = dataset(1, 4);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.dlods.jsonl");
        write_dataset(&d, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        let last = lines[5];
        let mut cut = lines[..5].join("\n");
        cut.push('\n');
        cut.push_str(&last[..last.len() / 2]);
        std::fs::write(&path, cut).unwrap();
        match read_dataset(&path) {
            Err(DataError::Parse { line, .. }) => assert_eq!(line, 6),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn point_count_mismatch_rejected() {
        let mut d = dataset(1, 3);
        d.header.n_points = 12;
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.dlods.jsonl");
        write_dataset(&d, &path).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::Validation { line: 2, .. })));
    }

    #[test]
    fn version_mismatch_rejected() {
        let d = dataset(1, 3);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.dlods.jsonl");
        write_dataset(&d, &path).unwrap();
        let text = std::fs::read_to_string(&path).unwrap().replacen("\"version\":1", "\"version\":7", 1);
        std::fs::write(&path, text).unwrap();
        assert!(matches!(read_dataset(&path), Err(DataError::Version { found: 7 })));
    }
}

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use dlo_core::repr::{apply_delta, make_action, ActionMode};
use dlo_core::{
    assemble_input, to_gripper_frame, Action, DloState, FeatureBundle, GripperPair,
    RepresentationConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::graph::{Graph, Var};
use crate::{NeuroError, Tensor};

pub const MLP_BRANCH: usize = 128;
pub const MLP_TRUNK: usize = 256;
pub const MLP_TRUNK_LAYERS: usize = 3;
pub const D_MODEL: usize = 64;
pub const HEADS: usize = 4;
pub const BLOCKS: usize = 2;
pub const FF_WIDTH: usize = 128;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    Mlp,
    Transformer,
    JacMlp,
}

impl Architecture {
    pub fn tag(&self) -> &'static str {
        match self {
            Architecture::Mlp => "mlp",
            Architecture::Transformer => "transformer",
            Architecture::JacMlp => "jacmlp",
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

impl FromStr for Architecture {
    type Err = NeuroError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mlp" => Ok(Architecture::Mlp),
            "transformer" => Ok(Architecture::Transformer),
            "jacmlp" => Ok(Architecture::JacMlp),
            other => Err(NeuroError::UnknownArch(other.into())),
        }
    }
}

/// Per-feature affine normalization `(x − mean) / std`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

impl FeatureStats {
    pub fn identity(width: usize) -> Self {
        Self {
            mean: vec![0.0; width],
            std: vec![1.0; width],
        }
    }

    /// Column statistics of `rows`; near-constant columns get unit scale.
    /// With `centered == false` the mean is fixed at zero and the scale is the
    /// root mean square, so zero maps to zero.
    pub fn fit<'r>(rows: impl Iterator<Item = &'r [f64]>, width: usize, centered: bool) -> Self {
        let mut sum = vec![0.0; width];
        let mut sq = vec![0.0; width];
        let mut n = 0usize;
        for r in rows {
            for j in 0..width {
                sum[j] += r[j];
                sq[j] += r[j] * r[j];
            }
            n += 1;
        }
        if n == 0 {
            return Self::identity(width);
        }
        let nf = n as f64;
        let mut mean = vec![0.0; width];
        let mut std = vec![1.0; width];
        for j in 0..width {
            let m = if centered { sum[j] / nf } else { 0.0 };
            let var = (sq[j] / nf - m * m).max(0.0);
            mean[j] = m;
            let s = var.sqrt();
            std[j] = if s > 1e-8 { s } else { 1.0 };
        }
        Self { mean, std }
    }

    pub fn apply(&self, x: &[f64], out: &mut Vec<f64>) {
        out.extend(x.iter().zip(&self.mean).zip(&self.std).map(|((x, m), s)| (x - m) / s));
    }

    pub fn invert(&self, y: &[f64]) -> Vec<f64> {
        y.iter().zip(&self.mean).zip(&self.std).map(|((y, m), s)| y * s + m).collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Normalization {
    /// One entry per input group, in [`input_groups`] order.
    pub inputs: Vec<FeatureStats>,
    pub target: FeatureStats,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainingMeta {
    pub seed: u64,
    pub epochs: usize,
    pub rod_preset: String,
    pub rod_length: f64,
    pub config_hash: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams {
    pub arch: Architecture,
    pub cfg: RepresentationConfig,
    pub tensors: BTreeMap<String, Tensor>,
    pub norm: Normalization,
    pub meta: TrainingMeta,
}

/// Input groups fed to each architecture and their widths.
pub fn input_groups(arch: Architecture, cfg: &RepresentationConfig) -> Vec<(&'static str, usize)> {
    let w = cfg.orientation.width();
    match arch {
        Architecture::Mlp => vec![
            ("state", cfg.state_width()),
            ("left", RepresentationConfig::LEFT_WIDTH),
            ("rot", cfg.rotation_width()),
        ],
        Architecture::Transformer => vec![
            ("state", cfg.state_width()),
            ("context", RepresentationConfig::LEFT_WIDTH + cfg.rotation_width()),
        ],
        Architecture::JacMlp => vec![
            ("state", cfg.state_width()),
            ("left", 3),
            ("rot", 2 * w),
            ("action", RepresentationConfig::JACOBIAN_ACTION_WIDTH),
        ],
    }
}

pub(crate) fn group_values(arch: Architecture, b: &FeatureBundle) -> Vec<Vec<f64>> {
    match arch {
        Architecture::Mlp => vec![b.state.clone(), b.left_block().to_vec(), b.rotation_block()],
        Architecture::Transformer => {
            let mut ctx = b.left_block().to_vec();
            ctx.extend(b.rotation_block());
            vec![b.state.clone(), ctx]
        }
        Architecture::JacMlp => vec![
            b.state.clone(),
            b.left_position.to_vec(),
            b.pose_rotations.clone(),
            b.jacobian_action.to_vec(),
        ],
    }
}

/// Name and shape of every parameter tensor.
pub fn layout(arch: Architecture, cfg: &RepresentationConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    fn lin(out: &mut Vec<(String, Vec<usize>)>, name: &str, i: usize, o: usize) {
        out.push((format!("{name}.w"), vec![i, o]));
        out.push((format!("{name}.b"), vec![o]));
    }
    let groups = input_groups(arch, cfg);
    let out_width = cfg.state_width();
    match arch {
        Architecture::Mlp | Architecture::JacMlp => {
            let branches: Vec<_> = groups.iter().filter(|(n, _)| *n != "action").collect();
            for (name, width) in &branches {
                lin(&mut out, name, *width, MLP_BRANCH);
            }
            let mut width = MLP_BRANCH * branches.len();
            for l in 0..MLP_TRUNK_LAYERS {
                lin(&mut out, &format!("trunk{l}"), width, MLP_TRUNK);
                width = MLP_TRUNK;
            }
            let head = if arch == Architecture::JacMlp {
                out_width * RepresentationConfig::JACOBIAN_ACTION_WIDTH
            } else {
                out_width
            };
            lin(&mut out, "head", width, head);
        }
        Architecture::Transformer => {
            lin(&mut out, "embed", 3, D_MODEL);
            lin(&mut out, "ctx0", groups[1].1, D_MODEL);
            lin(&mut out, "ctx1", D_MODEL, D_MODEL);
            for b in 0..BLOCKS {
                for att in ["self", "cross"] {
                    for p in ["q", "k", "v", "o"] {
                        lin(&mut out, &format!("blk{b}.{att}.{p}"), D_MODEL, D_MODEL);
                    }
                }
                lin(&mut out, &format!("blk{b}.ff1"), D_MODEL, FF_WIDTH);
                lin(&mut out, &format!("blk{b}.ff2"), FF_WIDTH, D_MODEL);
                for ln in ["ln1", "ln2", "ln3"] {
                    out.push((format!("blk{b}.{ln}.g"), vec![D_MODEL]));
                    out.push((format!("blk{b}.{ln}.b"), vec![D_MODEL]));
                }
            }
            lin(&mut out, "head", D_MODEL, 3);
        }
    }
    out
}

fn check_cfg(arch: Architecture, cfg: &RepresentationConfig) -> Result<(), NeuroError> {
    if cfg.n_points < 3 {
        return Err(NeuroError::Config(format!("need at least 3 points, got {}", cfg.n_points)));
    }
    if arch == Architecture::JacMlp && cfg.action != ActionMode::Difference {
        return Err(NeuroError::Config(
            "jacmlp needs difference actions so that no motion is the zero vector".into(),
        ));
    }
    Ok(())
}

impl ModelParams {
    /// Fan-in uniform weights, zero biases, unit layer-norm gains and a
    /// zero output head.
    pub fn init(arch: Architecture, cfg: RepresentationConfig, seed: u64) -> Result<Self, NeuroError> {
        check_cfg(arch, &cfg)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in layout(arch, &cfg) {
            let t = if name.starts_with("head.") || name.ends_with(".b") && shape.len() == 1 {
                Tensor::zeros(shape)
            } else if name.ends_with(".g") {
                Tensor::filled(shape, 1.0)
            } else {
                let bound = 1.0 / (shape[0] as f64).sqrt();
                let n = shape.iter().product();
                let data = (0..n).map(|_| rng.random_range(-bound..bound)).collect();
                Tensor { shape, data }
            };
            tensors.insert(name, t);
        }
        let norm = Normalization {
            inputs: input_groups(arch, &cfg)
                .iter()
                .map(|(_, w)| FeatureStats::identity(*w))
                .collect(),
            target: FeatureStats::identity(cfg.state_width()),
        };
        Ok(Self {
            arch,
            cfg,
            tensors,
            norm,
            meta: TrainingMeta::default(),
        })
    }

    /// Checks names, shapes and normalization widths against the layout.
    pub fn validate(&self) -> Result<(), NeuroError> {
        check_cfg(self.arch, &self.cfg)?;
        let expected = layout(self.arch, &self.cfg);
        if expected.len() != self.tensors.len() {
            return Err(NeuroError::Shape(format!(
                "{} expects {} tensors, found {}",
                self.arch,
                expected.len(),
                self.tensors.len()
            )));
        }
        for (name, shape) in expected {
            match self.tensors.get(&name) {
                None => return Err(NeuroError::Shape(format!("missing tensor `{name}` for {}", self.arch))),
                Some(t) if t.shape != shape => {
                    return Err(NeuroError::Shape(format!(
                        "tensor `{name}` has shape {:?}, {} expects {shape:?}",
                        t.shape, self.arch
                    )))
                }
                Some(t) if t.data.len() != shape.iter().product::<usize>() => {
                    return Err(NeuroError::Shape(format!("tensor `{name}` has wrong value count")))
                }
                _ => {}
            }
        }
        let groups = input_groups(self.arch, &self.cfg);
        let widths_ok = self.norm.inputs.len() == groups.len()
            && groups
                .iter()
                .zip(&self.norm.inputs)
                .all(|((_, w), s)| s.mean.len() == *w && s.std.len() == *w)
            && self.norm.target.mean.len() == self.cfg.state_width()
            && self.norm.target.std.len() == self.cfg.state_width();
        if !widths_ok {
            return Err(NeuroError::Shape("normalization widths do not match the model".into()));
        }
        Ok(())
    }

    pub fn tensor(&self, name: &str) -> &Tensor {
        &self.tensors[name]
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    /// Encoded state change for each bundle, in physical units.
    pub fn predict(&self, bundles: &[FeatureBundle]) -> Result<Vec<Vec<f64>>, NeuroError> {
        if bundles.is_empty() {
            return Ok(vec![]);
        }
        let batch = Batch::from_bundles(self, bundles)?;
        let mut g = Graph::new();
        let vars = ParamVars::bind(&mut g, self);
        let out = forward(&mut g, self, &vars, &batch);
        let width = self.cfg.state_width();
        Ok(g.value(out).chunks_exact(width).map(|y| self.norm.target.invert(y)).collect())
    }

    /// Next states after each action from `(state, grippers)`. `scale`
    /// carries `(l_train, l_test)` for a rod of a different length.
    pub fn predict_next(
        &self,
        state: &DloState,
        grippers: &GripperPair,
        actions: &[Action],
        scale: Option<(f64, f64)>,
    ) -> Result<Vec<DloState>, NeuroError> {
        let mut bundles = Vec::with_capacity(actions.len());
        for a in actions {
            let next = a.apply(grippers);
            let action = make_action(grippers, &next, self.cfg.action);
            let mut b = assemble_input(state, grippers, &action, &self.cfg)?;
            if let Some((l_train, l_test)) = scale {
                b = dlo_core::data::scale_for_length(&b, l_train, l_test)?;
            }
            bundles.push(b);
        }
        let deltas = self.predict(&bundles)?;
        deltas.iter().map(|d| self.next_state(state, grippers, d, scale)).collect()
    }

    /// Adds a predicted encoded change to `state`. Edge predictions are
    /// integrated outward from the right TCP. With `scale` the change is
    /// mapped back from training units.
    pub fn next_state(
        &self,
        state: &DloState,
        grippers: &GripperPair,
        delta: &[f64],
        scale: Option<(f64, f64)>,
    ) -> Result<DloState, NeuroError> {
        let mut d = delta.to_vec();
        if let Some((l_train, l_test)) = scale {
            if l_train != l_test {
                let k = l_test / l_train;
                d.iter_mut().for_each(|x| *x *= k);
            }
        }
        let local = to_gripper_frame(state, grippers);
        let next = apply_delta(&local, &d, self.cfg.state)?;
        Ok(next.translated(&grippers.right.t))
    }
}

/// Normalized model inputs for a batch.
pub(crate) struct Batch {
    pub rows: usize,
    pub groups: Vec<Vec<f64>>,
}

impl Batch {
    pub fn from_bundles(p: &ModelParams, bundles: &[FeatureBundle]) -> Result<Self, NeuroError> {
        let groups_spec = input_groups(p.arch, &p.cfg);
        let mut groups: Vec<Vec<f64>> = groups_spec
            .iter()
            .map(|(_, w)| Vec::with_capacity(w * bundles.len()))
            .collect();
        for b in bundles {
            if b.cfg != p.cfg {
                return Err(NeuroError::Config(format!(
                    "bundle representation {:?} does not match the model's {:?}",
                    b.cfg, p.cfg
                )));
            }
            for ((vals, stats), out) in group_values(p.arch, b).iter().zip(&p.norm.inputs).zip(groups.iter_mut()) {
                stats.apply(vals, out);
            }
        }
        Ok(Self {
            rows: bundles.len(),
            groups,
        })
    }
}

/// Graph handles for every parameter tensor.
pub(crate) struct ParamVars {
    pub vars: BTreeMap<String, Var>,
}

impl ParamVars {
    pub fn bind<'a>(g: &mut Graph<'a>, p: &'a ModelParams) -> Self {
        Self {
            vars: p.tensors.iter().map(|(n, t)| (n.clone(), g.param(t))).collect(),
        }
    }

    fn get(&self, name: &str) -> Var {
        self.vars[name]
    }

    fn linear(&self, g: &mut Graph, x: Var, name: &str) -> Var {
        g.linear(x, self.get(&format!("{name}.w")), self.get(&format!("{name}.b")))
    }
}

/// Sinusoidal position code for `tokens` positions of width `d`.
pub fn positional_encoding(tokens: usize, d: usize) -> Vec<f64> {
    let mut pe = vec![0.0; tokens * d];
    for t in 0..tokens {
        for i in 0..d / 2 {
            let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
            pe[t * d + 2 * i] = (t as f64 * freq).sin();
            pe[t * d + 2 * i + 1] = (t as f64 * freq).cos();
        }
    }
    pe
}

/// Builds the forward pass; returns the normalized `B × state_width` output.
pub(crate) fn forward(g: &mut Graph, p: &ModelParams, v: &ParamVars, batch: &Batch) -> Var {
    let b = batch.rows;
    let groups = input_groups(p.arch, &p.cfg);
    match p.arch {
        Architecture::Mlp | Architecture::JacMlp => {
            let mut branches = Vec::new();
            for ((name, width), data) in groups.iter().zip(&batch.groups) {
                if *name == "action" {
                    continue;
                }
                let x = g.input(b, *width, data.clone());
                let h = v.linear(g, x, name);
                branches.push(g.tanh(h));
            }
            let mut h = g.concat(&branches);
            for l in 0..MLP_TRUNK_LAYERS {
                let z = v.linear(g, h, &format!("trunk{l}"));
                h = g.tanh(z);
            }
            let head = v.linear(g, h, "head");
            if p.arch == Architecture::JacMlp {
                let a = g.input(b, RepresentationConfig::JACOBIAN_ACTION_WIDTH, batch.groups[3].clone());
                g.batch_matvec(head, a)
            } else {
                head
            }
        }
        Architecture::Transformer => {
            let tokens = p.cfg.state_elements();
            let x = g.input(b * tokens, 3, batch.groups[0].clone());
            let e = v.linear(g, x, "embed");
            let pe: Vec<f64> = positional_encoding(tokens, D_MODEL).repeat(b);
            let pe = g.input(b * tokens, D_MODEL, pe);
            let mut h = g.add(e, pe);

            let c = g.input(b, groups[1].1, batch.groups[1].clone());
            let c = v.linear(g, c, "ctx0");
            let c = g.tanh(c);
            let ctx = v.linear(g, c, "ctx1");

            for blk in 0..BLOCKS {
                let name = |s: &str| format!("blk{blk}.{s}");
                // self-attention over the rod tokens
                let q = v.linear(g, h, &name("self.q"));
                let k = v.linear(g, h, &name("self.k"));
                let val = v.linear(g, h, &name("self.v"));
                let a = g.attention(q, k, val, b, HEADS);
                let a = v.linear(g, a, &name("self.o"));
                let r = g.add(h, a);
                h = g.layer_norm(r, v.get(&name("ln1.g")), v.get(&name("ln1.b")));
                // cross-attention to the gripper context token
                let q = v.linear(g, h, &name("cross.q"));
                let k = v.linear(g, ctx, &name("cross.k"));
                let val = v.linear(g, ctx, &name("cross.v"));
                let a = g.attention(q, k, val, b, HEADS);
                let a = v.linear(g, a, &name("cross.o"));
                let r = g.add(h, a);
                h = g.layer_norm(r, v.get(&name("ln2.g")), v.get(&name("ln2.b")));
                // feed-forward
                let f = v.linear(g, h, &name("ff1"));
                let f = g.tanh(f);
                let f = v.linear(g, f, &name("ff2"));
                let r = g.add(h, f);
                h = g.layer_norm(r, v.get(&name("ln3.g")), v.get(&name("ln3.b")));
            }
            let out = v.linear(g, h, "head");
            g.reshape(out, b, tokens * 3)
        }
    }
}

//! Tape-based reverse-mode differentiation over row-major matrices.
//!
//! Every node is a `rows × cols` matrix. Parameters are borrowed, inputs are
//! owned; gradients are only propagated into nodes that depend on a
//! parameter.

use std::borrow::Cow;

use crate::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

const LN_EPS: f64 = 1e-5;

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        batch: usize,
        heads: usize,
        probs: Vec<f64>,
    },
    Concat(Vec<Var>),
    RepeatRows(Var, usize),
    Reshape(Var),
    BatchMatVec(Var, Var),
    Mse(Var, Vec<f64>),
}

struct Node<'a> {
    rows: usize,
    cols: usize,
    value: Cow<'a, [f64]>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Graph<'a> {
    nodes: Vec<Node<'a>>,
}

/// `C (m×n) = A (m×k) · B (k×n) + beta·C` with arbitrary strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    if m == 0 || n == 0 {
        return;
    }
    debug_assert!(c.len() >= m * n);
    // SAFETY: the slices cover every index reachable through the given
    // dimensions and strides, and `c` does not alias `a` or `b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

impl<'a> Graph<'a> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op, needs_grad: bool) -> Var {
        debug_assert_eq!(value.len(), rows * cols);
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Owned(value),
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<'a> {
        &self.nodes[v.0]
    }

    fn grad_flag(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.node(*v).needs_grad)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    /// Constant data; never receives a gradient.
    pub fn input(&mut self, rows: usize, cols: usize, data: Vec<f64>) -> Var {
        assert_eq!(data.len(), rows * cols, "input shape");
        self.push(rows, cols, data, Op::Leaf, false)
    }

    /// Borrowed trainable tensor.
    pub fn param(&mut self, t: &'a Tensor) -> Var {
        let (rows, cols) = t.rows_cols();
        self.nodes.push(Node {
            rows,
            cols,
            value: Cow::Borrowed(&t.data),
            op: Op::Leaf,
            needs_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (m, k) = self.shape(a);
        let (k2, n) = self.shape(b);
        assert_eq!(k, k2, "matmul inner dimensions");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.value(a), (k, 1), self.value(b), (n, 1), 0.0, &mut out);
        let g = self.grad_flag(&[a, b]);
        self.push(m, n, out, Op::MatMul(a, b), g)
    }

    /// Adds a `1 × cols` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(row), (1, c), "row broadcast");
        let b = self.value(row);
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|xs| xs.iter().zip(b).map(|(x, b)| x + b))
            .collect();
        let g = self.grad_flag(&[x, row]);
        self.push(r, c, out, Op::AddRow(x, row), g)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shapes");
        let (r, c) = self.shape(a);
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x + y).collect();
        let g = self.grad_flag(&[a, b]);
        self.push(r, c, out, Op::Add(a, b), g)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.value(x).iter().map(|v| v.tanh()).collect();
        let g = self.grad_flag(&[x]);
        self.push(r, c, out, Op::Tanh(x), g)
    }

    /// `x W + b`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let y = self.matmul(x, w);
        self.add_row(y, b)
    }

    /// Row-wise normalization with learned scale and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(self.shape(gamma), (1, c));
        assert_eq!(self.shape(beta), (1, c));
        let mut xhat = vec![0.0; r * c];
        let mut inv_std = vec![0.0; r];
        let mut out = vec![0.0; r * c];
        let (g, b) = (self.value(gamma), self.value(beta));
        for (i, row) in self.value(x).chunks_exact(c).enumerate() {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LN_EPS).sqrt();
            inv_std[i] = is;
            for j in 0..c {
                let h = (row[j] - mean) * is;
                xhat[i * c + j] = h;
                out[i * c + j] = g[j] * h + b[j];
            }
        }
        let flag = self.grad_flag(&[x, gamma, beta]);
        self.push(
            r,
            c,
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            flag,
        )
    }

    /// Multi-head scaled dot-product attention without masking. `q` holds
    /// `batch · tq` rows, `k` and `v` hold `batch · tk` rows; heads split the
    /// columns evenly.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, batch: usize, heads: usize) -> Var {
        let (rq, d) = self.shape(q);
        let (rk, dk) = self.shape(k);
        assert_eq!(self.shape(v), (rk, d));
        assert_eq!(d, dk);
        assert!(rq % batch == 0 && rk % batch == 0 && d % heads == 0);
        let (tq, tk, dh) = (rq / batch, rk / batch, d / heads);
        let scale = 1.0 / (dh as f64).sqrt();
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let mut probs = vec![0.0; batch * heads * tq * tk];
        let mut out = vec![0.0; rq * d];
        let mut scores = vec![0.0; tk];
        for b in 0..batch {
            for h in 0..heads {
                let off = h * dh;
                for i in 0..tq {
                    let qi = &qv[(b * tq + i) * d + off..][..dh];
                    let mut max = f64::NEG_INFINITY;
                    for (j, s) in scores.iter_mut().enumerate() {
                        let kj = &kv[(b * tk + j) * d + off..][..dh];
                        *s = qi.iter().zip(kj).map(|(x, y)| x * y).sum::<f64>() * scale;
                        max = max.max(*s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let p = &mut probs[((b * heads + h) * tq + i) * tk..][..tk];
                    let o = &mut out[(b * tq + i) * d + off..][..dh];
                    for j in 0..tk {
                        p[j] = scores[j] / z;
                        let vj = &vv[(b * tk + j) * d + off..][..dh];
                        for (ov, x) in o.iter_mut().zip(vj) {
                            *ov += p[j] * x;
                        }
                    }
                }
            }
        }
        let flag = self.grad_flag(&[q, k, v]);
        self.push(
            rq,
            d,
            out,
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            },
            flag,
        )
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let rows = self.shape(parts[0]).0;
        assert!(parts.iter().all(|p| self.shape(*p).0 == rows));
        let cols: usize = parts.iter().map(|p| self.shape(*p).1).sum();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                let c = self.shape(*p).1;
                out.extend_from_slice(&self.value(*p)[r * c..(r + 1) * c]);
            }
        }
        let g = self.grad_flag(parts);
        self.push(rows, cols, out, Op::Concat(parts.to_vec()), g)
    }

    /// Repeats each row `times` times consecutively.
    pub fn repeat_rows(&mut self, x: Var, times: usize) -> Var {
        let (r, c) = self.shape(x);
        let mut out = Vec::with_capacity(r * c * times);
        for row in self.value(x).chunks_exact(c) {
            for _ in 0..times {
                out.extend_from_slice(row);
            }
        }
        let g = self.grad_flag(&[x]);
        self.push(r * times, c, out, Op::RepeatRows(x, times), g)
    }

    /// Same data, new row/column split.
    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Var {
        let (r, c) = self.shape(x);
        assert_eq!(r * c, rows * cols, "reshape size");
        let out = self.value(x).to_vec();
        let g = self.grad_flag(&[x]);
        self.push(rows, cols, out, Op::Reshape(x), g)
    }

    /// Row-wise `J_b · a_b`: `j` is `B × (P·K)` (each row a `P × K` matrix),
    /// `a` is `B × K`; the result is `B × P`.
    pub fn batch_matvec(&mut self, j: Var, a: Var) -> Var {
        let (b, pk) = self.shape(j);
        let (b2, k) = self.shape(a);
        assert_eq!(b, b2);
        assert_eq!(pk % k, 0);
        let p = pk / k;
        let (jv, av) = (self.value(j), self.value(a));
        let mut out = vec![0.0; b * p];
        for r in 0..b {
            let ar = &av[r * k..][..k];
            for i in 0..p {
                let jr = &jv[r * pk + i * k..][..k];
                out[r * p + i] = jr.iter().zip(ar).map(|(x, y)| x * y).sum();
            }
        }
        let g = self.grad_flag(&[j, a]);
        self.push(b, p, out, Op::BatchMatVec(j, a), g)
    }

    /// Mean squared error against a constant target; a `1 × 1` node.
    pub fn mse(&mut self, pred: Var, target: Vec<f64>) -> Var {
        assert_eq!(self.value(pred).len(), target.len());
        let n = target.len().max(1) as f64;
        let loss = self
            .value(pred)
            .iter()
            .zip(&target)
            .map(|(p, t)| (p - t).powi(2))
            .sum::<f64>()
            / n;
        let g = self.grad_flag(&[pred]);
        self.push(1, 1, vec![loss], Op::Mse(pred, target), g)
    }

    /// Gradients of the scalar `loss` with respect to every node.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        assert_eq!(self.shape(loss), (1, 1), "backward needs a scalar");
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else {
                continue;
            };
            self.propagate(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        Grads { grads }
    }

    fn propagate(&self, node: &Node<'a>, dy: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let wants = |v: Var| self.node(v).needs_grad;
        let acc = |v: Var, grads: &mut [Option<Vec<f64>>]| -> Vec<f64> {
            grads[v.0].take().unwrap_or_else(|| vec![0.0; self.node(v).value.len()])
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = self.shape(*a);
                let n = node.cols;
                if wants(*a) {
                    let mut ga = acc(*a, grads);
                    gemm(m, n, k, dy, (n, 1), self.value(*b), (1, n), 1.0, &mut ga);
                    grads[a.0] = Some(ga);
                }
                if wants(*b) {
                    let mut gb = acc(*b, grads);
                    gemm(k, m, n, self.value(*a), (1, k), dy, (n, 1), 1.0, &mut gb);
                    grads[b.0] = Some(gb);
                }
            }
            Op::AddRow(x, row) => {
                let c = node.cols;
                if wants(*x) {
                    let mut gx = acc(*x, grads);
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    grads[x.0] = Some(gx);
                }
                if wants(*row) {
                    let mut gr = acc(*row, grads);
                    for chunk in dy.chunks_exact(c) {
                        gr.iter_mut().zip(chunk).for_each(|(g, d)| *g += d);
                    }
                    grads[row.0] = Some(gr);
                }
            }
            Op::Add(a, b) => {
                for v in [a, b] {
                    if wants(*v) {
                        let mut gv = acc(*v, grads);
                        gv.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                        grads[v.0] = Some(gv);
                    }
                }
            }
            Op::Tanh(x) => {
                if wants(*x) {
                    let mut gx = acc(*x, grads);
                    for ((g, d), y) in gx.iter_mut().zip(dy).zip(node.value.iter()) {
                        *g += d * (1.0 - y * y);
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let c = node.cols;
                let gv = self.value(*gamma);
                if wants(*gamma) {
                    let mut gg = acc(*gamma, grads);
                    for (d, h) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] += d[j] * h[j];
                        }
                    }
                    grads[gamma.0] = Some(gg);
                }
                if wants(*beta) {
                    let mut gb = acc(*beta, grads);
                    for d in dy.chunks_exact(c) {
                        gb.iter_mut().zip(d).for_each(|(g, d)| *g += d);
                    }
                    grads[beta.0] = Some(gb);
                }
                if wants(*x) {
                    let mut gx = acc(*x, grads);
                    let n = c as f64;
                    for (i, (d, h)) in dy.chunks_exact(c).zip(xhat.chunks_exact(c)).enumerate() {
                        let dh: Vec<f64> = (0..c).map(|j| d[j] * gv[j]).collect();
                        let sum: f64 = dh.iter().sum();
                        let dot: f64 = dh.iter().zip(h).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            gx[i * c + j] += inv_std[i] / n * (n * dh[j] - sum - h[j] * dot);
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Attention {
                q,
                k,
                v,
                batch,
                heads,
                probs,
            } => {
                let (rq, d) = self.shape(*q);
                let rk = self.shape(*k).0;
                let (tq, tk, dh) = (rq / batch, rk / batch, d / heads);
                let scale = 1.0 / (dh as f64).sqrt();
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let mut gq = vec![0.0; rq * d];
                let mut gk = vec![0.0; rk * d];
                let mut gvv = vec![0.0; rk * d];
                let mut dp = vec![0.0; tk];
                for b in 0..*batch {
                    for h in 0..*heads {
                        let off = h * dh;
                        for i in 0..tq {
                            let p = &probs[((b * heads + h) * tq + i) * tk..][..tk];
                            let doi = &dy[(b * tq + i) * d + off..][..dh];
                            for j in 0..tk {
                                let row = (b * tk + j) * d + off;
                                let vj = &vv[row..][..dh];
                                dp[j] = doi.iter().zip(vj).map(|(x, y)| x * y).sum();
                                for (g, x) in gvv[row..][..dh].iter_mut().zip(doi) {
                                    *g += p[j] * x;
                                }
                            }
                            let inner: f64 = p.iter().zip(&dp).map(|(a, b)| a * b).sum();
                            let qrow = (b * tq + i) * d + off;
                            for j in 0..tk {
                                let ds = p[j] * (dp[j] - inner) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                let krow = (b * tk + j) * d + off;
                                for t in 0..dh {
                                    gq[qrow + t] += ds * kv[krow + t];
                                    gk[krow + t] += ds * qv[qrow + t];
                                }
                            }
                        }
                    }
                }
                for (var, g) in [(q, gq), (k, gk), (v, gvv)] {
                    if wants(*var) {
                        let mut cur = acc(*var, grads);
                        cur.iter_mut().zip(&g).for_each(|(c, x)| *c += x);
                        grads[var.0] = Some(cur);
                    }
                }
            }
            Op::Concat(parts) => {
                let cols = node.cols;
                let mut offset = 0;
                for p in parts {
                    let c = self.shape(*p).1;
                    if wants(*p) {
                        let mut gp = acc(*p, grads);
                        for r in 0..node.rows {
                            for j in 0..c {
                                gp[r * c + j] += dy[r * cols + offset + j];
                            }
                        }
                        grads[p.0] = Some(gp);
                    }
                    offset += c;
                }
            }
            Op::RepeatRows(x, times) => {
                if wants(*x) {
                    let c = node.cols;
                    let mut gx = acc(*x, grads);
                    for (r, chunk) in dy.chunks_exact(c).enumerate() {
                        let src = r / times;
                        for j in 0..c {
                            gx[src * c + j] += chunk[j];
                        }
                    }
                    grads[x.0] = Some(gx);
                }
            }
            Op::Reshape(x) => {
                if wants(*x) {
                    let mut gx = acc(*x, grads);
                    gx.iter_mut().zip(dy).for_each(|(g, d)| *g += d);
                    grads[x.0] = Some(gx);
                }
            }
            Op::BatchMatVec(j, a) => {
                let (b, pk) = self.shape(*j);
                let k = self.shape(*a).1;
                let p = pk / k;
                let (jv, av) = (self.value(*j), self.value(*a));
                if wants(*j) {
                    let mut gj = acc(*j, grads);
                    for r in 0..b {
                        for i in 0..p {
                            let d = dy[r * p + i];
                            for t in 0..k {
                                gj[r * pk + i * k + t] += d * av[r * k + t];
                            }
                        }
                    }
                    grads[j.0] = Some(gj);
                }
                if wants(*a) {
                    let mut ga = acc(*a, grads);
                    for r in 0..b {
                        for i in 0..p {
                            let d = dy[r * p + i];
                            for t in 0..k {
                                ga[r * k + t] += d * jv[r * pk + i * k + t];
                            }
                        }
                    }
                    grads[a.0] = Some(ga);
                }
            }
            Op::Mse(pred, target) => {
                if wants(*pred) {
                    let n = target.len().max(1) as f64;
                    let mut gp = acc(*pred, grads);
                    for ((g, p), t) in gp.iter_mut().zip(self.value(*pred)).zip(target) {
                        *g += dy[0] * 2.0 * (p - t) / n;
                    }
                    grads[pred.0] = Some(gp);
                }
            }
        }
    }
}

pub struct Grads {
    grads: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of a node, zeros if nothing flowed into it.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}

//! A small reverse-mode automatic differentiation tape over [`Matrix`] values.
//!
//! Every forward computation (pre-training step, prompt-tuning step, plain
//! inference) records its operations on a fresh [`Tape`]. Calling
//! [`Tape::backward`] on a scalar node walks the tape in reverse and returns
//! the gradient of every node that depends on a trainable leaf.
//!
//! The op set is exactly what the dual encoders and the losses need: dense
//! products, row gathers, sparse neighbourhood aggregation, layer norm, masked
//! multi-head attention over packed variable-length sequences, and the two
//! cross-entropy heads.

use std::sync::Arc;

use crate::tensor::{gemm, Matrix, Operand};

const LAYER_NORM_EPS: f64 = 1e-5;
const QUICK_GELU_ALPHA: f64 = 1.702;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse linear map `out_i = Σ_j w_ij · in_j` over rows.
#[derive(Clone, Debug, Default)]
pub struct SparseRows {
    pub rows: Vec<Vec<(usize, f64)>>,
}

impl SparseRows {
    pub fn new(rows: Vec<Vec<(usize, f64)>>) -> Self {
        Self { rows }
    }

    pub fn apply(&self, x: &Matrix) -> Matrix {
        let mut out = Matrix::zeros(self.rows.len(), x.cols());
        for (i, entries) in self.rows.iter().enumerate() {
            let dst = out.row_mut(i);
            for &(j, w) in entries {
                for (d, s) in dst.iter_mut().zip(x.row(j)) {
                    *d += w * s;
                }
            }
        }
        out
    }
}

/// A run of consecutive rows forming one sequence in a packed batch.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    ScaleByExp {
        x: Var,
        tau: Var,
        factor: f64,
        clamped: bool,
    },
    LeakyRelu(Var, f64),
    QuickGelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Matrix,
        inv_std: Vec<f64>,
    },
    RowL2Normalize {
        x: Var,
        norms: Vec<f64>,
    },
    Gather {
        src: Var,
        idx: Vec<usize>,
    },
    GatherMulti {
        sources: Vec<Var>,
        index: Vec<(usize, usize)>,
    },
    Sparse {
        x: Var,
        map: Arc<SparseRows>,
    },
    Pick {
        x: Var,
        entries: Vec<(usize, usize)>,
    },
    Attention {
        qkv: Var,
        segments: Arc<Vec<Segment>>,
        heads: usize,
        probs: Vec<f64>,
    },
    SymmetricCe {
        x: Var,
        row_probs: Matrix,
        col_probs: Matrix,
    },
    SoftmaxCe {
        logits: Var,
        targets: Vec<usize>,
        probs: Matrix,
    },
    WeightedSum(Vec<(Var, f64)>),
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Matrix, trainable: bool) -> Var {
        self.push(value, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMul(a, b), rg)
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul_nt(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::MatMulNt(a, b), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        let rg = self.rg(&[a, b]);
        self.push(value, Op::Add(a, b), rg)
    }

    /// Adds a `1 × c` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let b = self.value(bias);
        assert_eq!(b.rows(), 1, "add_row: bias must be a single row");
        assert_eq!(b.cols(), self.value(a).cols(), "add_row: width mismatch");
        let mut value = self.value(a).clone();
        let bias_row = b.row(0).to_vec();
        for r in 0..value.rows() {
            for (x, b) in value.row_mut(r).iter_mut().zip(&bias_row) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, bias]);
        self.push(value, Op::AddRow(a, bias), rg)
    }

    /// `x · W + b`
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add_row(xw, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let value = self.value(x).scale(s);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, s), rg)
    }

    /// Multiplies `x` by `min(exp(τ), max_factor)`; `tau` is a `1 × 1` node.
    /// When the clamp is active no gradient reaches `τ`.
    pub fn scale_by_exp(&mut self, x: Var, tau: Var, max_factor: f64) -> Var {
        let raw = self.value(tau).item().exp();
        let clamped = raw > max_factor;
        let factor = if clamped { max_factor } else { raw };
        let value = self.value(x).scale(factor);
        let rg = self.rg(&[x, tau]);
        self.push(
            value,
            Op::ScaleByExp {
                x,
                tau,
                factor,
                clamped,
            },
            rg,
        )
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let value = self
            .value(x)
            .map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(&[x]);
        self.push(value, Op::LeakyRelu(x, slope), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    /// `x · σ(1.702 x)`
    pub fn quick_gelu(&mut self, x: Var) -> Var {
        let value = self
            .value(x)
            .map(|v| v * sigmoid(QUICK_GELU_ALPHA * v));
        let rg = self.rg(&[x]);
        self.push(value, Op::QuickGelu(x), rg)
    }

    /// Row-wise layer normalisation with `1 × c` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.shape();
        let mut xhat = Matrix::zeros(n, c);
        let mut inv_std = Vec::with_capacity(n);
        for r in 0..n {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std.push(is);
            for (h, v) in xhat.row_mut(r).iter_mut().zip(row) {
                *h = (v - mean) * is;
            }
        }
        let g = self.value(gamma).row(0).to_vec();
        let b = self.value(beta).row(0).to_vec();
        let mut value = xhat.clone();
        for r in 0..n {
            for ((y, g), b) in value.row_mut(r).iter_mut().zip(&g).zip(&b) {
                *y = *y * g + b;
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Scales each nonzero row to unit L2 norm; zero rows pass through as zero.
    pub fn row_l2_normalize(&mut self, x: Var) -> Var {
        let (value, norms) = normalize_rows(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::RowL2Normalize { x, norms }, rg)
    }

    pub fn gather(&mut self, src: Var, idx: Vec<usize>) -> Var {
        let value = self.value(src).select_rows(&idx);
        let rg = self.rg(&[src]);
        self.push(value, Op::Gather { src, idx }, rg)
    }

    /// Builds a matrix whose row `r` is row `index[r].1` of `sources[index[r].0]`.
    pub fn gather_multi(&mut self, sources: Vec<Var>, index: Vec<(usize, usize)>) -> Var {
        let cols = self.value(sources[0]).cols();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &(s, r) in &index {
            let m = self.value(sources[s]);
            assert_eq!(m.cols(), cols, "gather_multi: width mismatch");
            data.extend_from_slice(m.row(r));
        }
        let value = Matrix::from_vec(index.len(), cols, data).expect("sized above");
        let rg = self.rg(&sources);
        self.push(value, Op::GatherMulti { sources, index }, rg)
    }

    pub fn sparse(&mut self, x: Var, map: Arc<SparseRows>) -> Var {
        let value = map.apply(self.value(x));
        let rg = self.rg(&[x]);
        self.push(value, Op::Sparse { x, map }, rg)
    }

    /// A `rows × cols` matrix filled row-major from the entries of `x` at `entries`.
    pub fn pick(&mut self, x: Var, entries: Vec<(usize, usize)>, rows: usize, cols: usize) -> Var {
        assert_eq!(entries.len(), rows * cols, "pick: entry count must be rows × cols");
        let xv = self.value(x);
        let data = entries.iter().map(|&(r, c)| xv.get(r, c)).collect();
        let value = Matrix::from_vec(rows, cols, data).expect("sized above");
        let rg = self.rg(&[x]);
        self.push(value, Op::Pick { x, entries }, rg)
    }

    /// Causal multi-head self-attention over packed sequences.
    ///
    /// `qkv` holds the query, key and value projections side by side
    /// (`n × 3w`); each segment attends only within itself and position `i`
    /// sees positions `0..=i`.
    pub fn attention(&mut self, qkv: Var, segments: Arc<Vec<Segment>>, heads: usize) -> Var {
        let x = self.value(qkv);
        let (n, w3) = x.shape();
        let w = w3 / 3;
        assert_eq!(w * 3, w3, "attention: qkv width must be 3w");
        assert_eq!(w % heads, 0, "attention: width not divisible by heads");
        let dh = w / heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut out = Matrix::zeros(n, w);
        let total: usize = segments.iter().map(|s| heads * s.len * s.len).sum();
        let mut probs = vec![0.0; total];
        let mut off = 0;
        let mut scores = Vec::new();
        for seg in segments.iter() {
            let l = seg.len;
            for h in 0..heads {
                let block = &mut probs[off..off + l * l];
                for i in 0..l {
                    let q = &x.row(seg.start + i)[h * dh..(h + 1) * dh];
                    scores.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let k = &x.row(seg.start + j)[w + h * dh..w + (h + 1) * dh];
                        let s = dot(q, k) * scale;
                        max = max.max(s);
                        scores.push(s);
                    }
                    let mut z = 0.0;
                    for s in scores.iter_mut() {
                        *s = (*s - max).exp();
                        z += *s;
                    }
                    let o = &mut out.row_mut(seg.start + i)[h * dh..(h + 1) * dh];
                    for (j, s) in scores.iter().enumerate() {
                        let p = s / z;
                        block[i * l + j] = p;
                        let v = &x.row(seg.start + j)[2 * w + h * dh..2 * w + (h + 1) * dh];
                        for (o, v) in o.iter_mut().zip(v) {
                            *o += p * v;
                        }
                    }
                }
                off += l * l;
            }
        }
        let rg = self.rg(&[qkv]);
        self.push(
            out,
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            },
            rg,
        )
    }

    /// `½ (CE(Λ, y) + CE(Λᵀ, y))` with `y_i = i` and mean reduction, as a `1 × 1` node.
    pub fn symmetric_cross_entropy(&mut self, x: Var) -> Var {
        let m = self.value(x);
        assert_eq!(m.rows(), m.cols(), "symmetric_cross_entropy: matrix must be square");
        let (row_probs, row_loss) = softmax_ce_rows(m, |i| i);
        let mt = m.transpose();
        let (col_probs_t, col_loss) = softmax_ce_rows(&mt, |i| i);
        let value = Matrix::scalar(0.5 * (row_loss + col_loss));
        let rg = self.rg(&[x]);
        self.push(
            value,
            Op::SymmetricCe {
                x,
                row_probs,
                col_probs: col_probs_t.transpose(),
            },
            rg,
        )
    }

    /// Mean row-wise softmax cross-entropy against integer targets.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let m = self.value(logits);
        assert_eq!(m.rows(), targets.len(), "softmax_cross_entropy: target count");
        let (probs, loss) = softmax_ce_rows(m, |i| targets[i]);
        let rg = self.rg(&[logits]);
        self.push(
            Matrix::scalar(loss),
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            },
            rg,
        )
    }

    /// `Σ_k c_k · x_k` over equally shaped nodes.
    pub fn weighted_sum(&mut self, terms: Vec<(Var, f64)>) -> Var {
        let shape = self.value(terms[0].0).shape();
        let mut value = Matrix::zeros(shape.0, shape.1);
        for &(v, c) in &terms {
            value.axpy(c, self.value(v));
        }
        let vars: Vec<Var> = terms.iter().map(|t| t.0).collect();
        let rg = self.rg(&vars);
        self.push(value, Op::WeightedSum(terms), rg)
    }

    /// Reverse pass from a `1 × 1` node.
    pub fn backward(&self, loss: Var) -> Gradients {
        assert_eq!(self.value(loss).shape(), (1, 1), "backward: loss must be scalar");
        let mut grads: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(Matrix::scalar(1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Gradients { grads }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, node: &Node, g: &Matrix, grads: &mut [Option<Matrix>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    acc_gemm(grads, *a, Operand::plain(g), Operand::transposed(bv), self.value(*a).shape());
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    acc_gemm(grads, *b, Operand::transposed(av), Operand::plain(g), self.value(*b).shape());
                }
            }
            Op::MatMulNt(a, b) => {
                if self.wants(*a) {
                    let bv = self.value(*b);
                    acc_gemm(grads, *a, Operand::plain(g), Operand::plain(bv), self.value(*a).shape());
                }
                if self.wants(*b) {
                    let av = self.value(*a);
                    acc_gemm(grads, *b, Operand::transposed(g), Operand::plain(av), self.value(*b).shape());
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.wants(v) {
                        acc(grads, v, g.clone());
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if self.wants(*a) {
                    acc(grads, *a, g.clone());
                }
                if self.wants(*bias) {
                    acc(grads, *bias, column_sums(g));
                }
            }
            Op::Scale(x, s) => {
                if self.wants(*x) {
                    acc(grads, *x, g.scale(*s));
                }
            }
            Op::ScaleByExp {
                x,
                tau,
                factor,
                clamped,
            } => {
                if self.wants(*x) {
                    acc(grads, *x, g.scale(*factor));
                }
                if self.wants(*tau) && !clamped {
                    let dt: f64 = g
                        .data()
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * y)
                        .sum();
                    acc(grads, *tau, Matrix::scalar(dt));
                }
            }
            Op::LeakyRelu(x, slope) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut out = g.clone();
                    for (o, v) in out.data_mut().iter_mut().zip(xv.data()) {
                        if *v <= 0.0 {
                            *o *= slope;
                        }
                    }
                    acc(grads, *x, out);
                }
            }
            Op::QuickGelu(x) => {
                if self.wants(*x) {
                    let xv = self.value(*x);
                    let mut out = g.clone();
                    for (o, &v) in out.data_mut().iter_mut().zip(xv.data()) {
                        let s = sigmoid(QUICK_GELU_ALPHA * v);
                        *o *= s + QUICK_GELU_ALPHA * v * s * (1.0 - s);
                    }
                    acc(grads, *x, out);
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, c) = g.shape();
                if self.wants(*gamma) {
                    let mut gg = Matrix::zeros(1, c);
                    for r in 0..n {
                        for ((acc, gv), h) in gg.row_mut(0).iter_mut().zip(g.row(r)).zip(xhat.row(r)) {
                            *acc += gv * h;
                        }
                    }
                    acc(grads, *gamma, gg);
                }
                if self.wants(*beta) {
                    acc(grads, *beta, column_sums(g));
                }
                if self.wants(*x) {
                    let gamma_row = self.value(*gamma).row(0);
                    let mut gx = Matrix::zeros(n, c);
                    let mut dxhat = vec![0.0; c];
                    for (r, &is) in inv_std.iter().enumerate() {
                        let gr = g.row(r);
                        let hr = xhat.row(r);
                        let mut mean_d = 0.0;
                        let mut mean_dh = 0.0;
                        for k in 0..c {
                            dxhat[k] = gr[k] * gamma_row[k];
                            mean_d += dxhat[k];
                            mean_dh += dxhat[k] * hr[k];
                        }
                        mean_d /= c as f64;
                        mean_dh /= c as f64;
                        for (k, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = is * (dxhat[k] - mean_d - hr[k] * mean_dh);
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::RowL2Normalize { x, norms } => {
                if self.wants(*x) {
                    let y = &node.value;
                    let mut gx = Matrix::zeros(y.rows(), y.cols());
                    for (r, &norm) in norms.iter().enumerate() {
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj = dot(yr, gr);
                        for ((o, gv), yv) in gx.row_mut(r).iter_mut().zip(gr).zip(yr) {
                            *o = (gv - yv * proj) / norm;
                        }
                    }
                    acc(grads, *x, gx);
                }
            }
            Op::Gather { src, idx } => {
                if self.wants(*src) {
                    let shape = self.value(*src).shape();
                    let target = slot(grads, *src, shape);
                    for (r, &i) in idx.iter().enumerate() {
                        for (t, gv) in target.row_mut(i).iter_mut().zip(g.row(r)) {
                            *t += gv;
                        }
                    }
                }
            }
            Op::GatherMulti { sources, index } => {
                for (s_idx, &src) in sources.iter().enumerate() {
                    if !self.wants(src) {
                        continue;
                    }
                    let shape = self.value(src).shape();
                    let target = slot(grads, src, shape);
                    for (r, &(s, row)) in index.iter().enumerate() {
                        if s != s_idx {
                            continue;
                        }
                        for (t, gv) in target.row_mut(row).iter_mut().zip(g.row(r)) {
                            *t += gv;
                        }
                    }
                }
            }
            Op::Pick { x, entries } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape();
                    let target = slot(grads, *x, shape);
                    for (&(r, c), gv) in entries.iter().zip(g.data()) {
                        let cur = target.get(r, c);
                        target.set(r, c, cur + gv);
                    }
                }
            }
            Op::Sparse { x, map } => {
                if self.wants(*x) {
                    let shape = self.value(*x).shape();
                    let target = slot(grads, *x, shape);
                    for (i, entries) in map.rows.iter().enumerate() {
                        let gr = g.row(i);
                        for &(j, w) in entries {
                            for (t, gv) in target.row_mut(j).iter_mut().zip(gr) {
                                *t += w * gv;
                            }
                        }
                    }
                }
            }
            Op::Attention {
                qkv,
                segments,
                heads,
                probs,
            } => {
                if self.wants(*qkv) {
                    let x = self.value(*qkv);
                    let gx = attention_backward(x, g, segments, *heads, probs);
                    acc(grads, *qkv, gx);
                }
            }
            Op::SymmetricCe {
                x,
                row_probs,
                col_probs,
            } => {
                if self.wants(*x) {
                    let n = row_probs.rows();
                    let s = g.item() * 0.5 / n as f64;
                    let mut gx = row_probs.add(col_probs);
                    for i in 0..n {
                        let v = gx.get(i, i);
                        gx.set(i, i, v - 2.0);
                    }
                    acc(grads, *x, gx.scale(s));
                }
            }
            Op::SoftmaxCe {
                logits,
                targets,
                probs,
            } => {
                if self.wants(*logits) {
                    let n = probs.rows();
                    let mut gx = probs.clone();
                    for (i, &t) in targets.iter().enumerate() {
                        let v = gx.get(i, t);
                        gx.set(i, t, v - 1.0);
                    }
                    acc(grads, *logits, gx.scale(g.item() / n as f64));
                }
            }
            Op::WeightedSum(terms) => {
                for &(v, c) in terms {
                    if self.wants(v) {
                        acc(grads, v, g.scale(c));
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Matrix>], v: Var, shape: (usize, usize)) -> &mut Matrix {
    grads[v.0].get_or_insert_with(|| Matrix::zeros(shape.0, shape.1))
}

fn acc(grads: &mut [Option<Matrix>], v: Var, m: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&m),
        empty @ None => *empty = Some(m),
    }
}

fn acc_gemm(grads: &mut [Option<Matrix>], v: Var, a: Operand<'_>, b: Operand<'_>, shape: (usize, usize)) {
    let beta = if grads[v.0].is_some() { 1.0 } else { 0.0 };
    let target = slot(grads, v, shape);
    gemm(a, b, target, beta);
}

fn column_sums(g: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(1, g.cols());
    for r in 0..g.rows() {
        for (o, v) in out.row_mut(0).iter_mut().zip(g.row(r)) {
            *o += v;
        }
    }
    out
}

#[inline]
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// Returns the row-normalised copy and the original row norms.
pub(crate) fn normalize_rows(x: &Matrix) -> (Matrix, Vec<f64>) {
    let mut out = x.clone();
    let mut norms = Vec::with_capacity(x.rows());
    for r in 0..x.rows() {
        let norm = dot(x.row(r), x.row(r)).sqrt();
        norms.push(norm);
        if norm > 0.0 {
            for v in out.row_mut(r) {
                *v /= norm;
            }
        }
    }
    (out, norms)
}

/// Row softmax probabilities and mean cross-entropy against `target(i)`.
fn softmax_ce_rows(m: &Matrix, target: impl Fn(usize) -> usize) -> (Matrix, f64) {
    let mut probs = Matrix::zeros(m.rows(), m.cols());
    let mut loss = 0.0;
    for r in 0..m.rows() {
        let row = m.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + z.ln();
        for (p, v) in probs.row_mut(r).iter_mut().zip(row) {
            *p = (v - log_z).exp();
        }
        loss += log_z - row[target(r)];
    }
    let n = m.rows().max(1) as f64;
    (probs, loss / n)
}

fn attention_backward(
    x: &Matrix,
    g: &Matrix,
    segments: &[Segment],
    heads: usize,
    probs: &[f64],
) -> Matrix {
    let (n, w3) = x.shape();
    let w = w3 / 3;
    let dh = w / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut gx = Matrix::zeros(n, w3);
    let mut dp = Vec::new();
    let mut off = 0;
    for seg in segments {
        let l = seg.len;
        for h in 0..heads {
            let block = &probs[off..off + l * l];
            for i in 0..l {
                let go = &g.row(seg.start + i)[h * dh..(h + 1) * dh];
                dp.clear();
                let mut weighted = 0.0;
                for j in 0..=i {
                    let v = &x.row(seg.start + j)[2 * w + h * dh..2 * w + (h + 1) * dh];
                    let d = dot(go, v);
                    weighted += block[i * l + j] * d;
                    dp.push(d);
                }
                for j in 0..=i {
                    let p = block[i * l + j];
                    // dV_j += p_ij · dO_i
                    {
                        let dv = &mut gx.row_mut(seg.start + j)[2 * w + h * dh..2 * w + (h + 1) * dh];
                        for (d, o) in dv.iter_mut().zip(go) {
                            *d += p * o;
                        }
                    }
                    let ds = p * (dp[j] - weighted) * scale;
                    if ds == 0.0 {
                        continue;
                    }
                    let k = &x.row(seg.start + j)[w + h * dh..w + (h + 1) * dh];
                    let q = &x.row(seg.start + i)[h * dh..(h + 1) * dh];
                    for (d, kv) in gx.row_mut(seg.start + i)[h * dh..(h + 1) * dh].iter_mut().zip(k) {
                        *d += ds * kv;
                    }
                    for (d, qv) in gx.row_mut(seg.start + j)[w + h * dh..w + (h + 1) * dh].iter_mut().zip(q) {
                        *d += ds * qv;
                    }
                }
            }
            off += l * l;
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
        Matrix::from_vec(r, c, (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    /// Central finite differences of `f` with respect to every entry of `inputs[k]`,
    /// compared to the analytic gradient.
    fn check(inputs: Vec<Matrix>, f: impl Fn(&mut Tape, &[Var]) -> Var) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|m| tape.param(m.clone())).collect();
        let loss = f(&mut tape, &vars);
        let grads = tape.backward(loss);
        let eval = |inputs: &[Matrix]| {
            let mut t = Tape::new();
            let vs: Vec<Var> = inputs.iter().map(|m| t.param(m.clone())).collect();
            let l = f(&mut t, &vs);
            t.value(l).item()
        };
        let h = 1e-5;
        for (k, m) in inputs.iter().enumerate() {
            let analytic = grads.get(vars[k]).cloned().unwrap_or_else(|| Matrix::zeros(m.rows(), m.cols()));
            for e in 0..m.len() {
                let mut plus = inputs.clone();
                plus[k].data_mut()[e] += h;
                let mut minus = inputs.clone();
                minus[k].data_mut()[e] -= h;
                let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
                let a = analytic.data()[e];
                let err = (a - numeric).abs() / (a.abs().max(numeric.abs()).max(1e-6));
                assert!(err < 1e-5, "input {k} entry {e}: analytic {a} numeric {numeric}");
            }
        }
    }

    /// Reduces a matrix node to a scalar with fixed random weights.
    fn probe(tape: &mut Tape, x: Var, seed: u64) -> Var {
        let (r, c) = tape.value(x).shape();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let w = tape.constant(random(&mut rng, c, 1));
        let y = tape.matmul(x, w);
        let ones = tape.constant(Matrix::filled(1, r, 1.0));
        tape.matmul(ones, y)
    }

    #[test]
    fn dense_ops_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a = random(&mut rng, 3, 4);
        let b = random(&mut rng, 4, 2);
        let c = random(&mut rng, 5, 4);
        let bias = random(&mut rng, 1, 2);
        check(vec![a, b, c, bias], |t, v| {
            let ab = t.matmul(v[0], v[1]);
            let abb = t.add_row(ab, v[3]);
            let act = t.quick_gelu(abb);
            let nt = t.matmul_nt(v[2], v[0]);
            let lr = t.leaky_relu(nt, 0.1);
            let p1 = probe(t, act, 1);
            let p2 = probe(t, lr, 2);
            t.weighted_sum(vec![(p1, 1.0), (p2, -0.5)])
        });
    }

    #[test]
    fn normalisation_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = random(&mut rng, 3, 5);
        let g = random(&mut rng, 1, 5);
        let b = random(&mut rng, 1, 5);
        check(vec![x, g, b], |t, v| {
            let ln = t.layer_norm(v[0], v[1], v[2]);
            let n = t.row_l2_normalize(ln);
            probe(t, n, 5)
        });
    }

    #[test]
    fn attention_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let qkv = random(&mut rng, 5, 12);
        let segs = Arc::new(vec![Segment { start: 0, len: 3 }, Segment { start: 3, len: 2 }]);
        check(vec![qkv], move |t, v| {
            let a = t.attention(v[0], segs.clone(), 2);
            probe(t, a, 6)
        });
    }

    #[test]
    fn gather_sparse_and_loss_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let x = random(&mut rng, 4, 3);
        let y = random(&mut rng, 2, 3);
        let tau = Matrix::scalar(0.3);
        let map = Arc::new(SparseRows::new(vec![
            vec![(0, 0.5), (2, 0.5)],
            vec![(1, 1.0)],
            vec![(3, 0.25), (0, 0.75)],
        ]));
        check(vec![x, y, tau], move |t, v| {
            let g = t.gather(v[0], vec![3, 1, 1]);
            let m = t.gather_multi(vec![v[0], v[1]], vec![(1, 0), (0, 2), (1, 1)]);
            let s = t.sparse(v[0], map.clone());
            let sim = t.matmul_nt(g, s);
            let scaled = t.scale_by_exp(sim, v[2], 100.0);
            let l1 = t.symmetric_cross_entropy(scaled);
            let sim2 = t.matmul_nt(m, g);
            let l2 = t.softmax_cross_entropy(sim2, vec![0, 2, 1]);
            t.weighted_sum(vec![(l1, 1.0), (l2, 0.7)])
        });
    }

    #[test]
    fn pick_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = random(&mut rng, 3, 4);
        check(vec![x], |t, v| {
            let p = t.pick(v[0], vec![(0, 1), (2, 3), (1, 0), (0, 1)], 2, 2);
            assert_eq!(t.value(p).get(1, 1), t.value(v[0]).get(0, 1));
            t.softmax_cross_entropy(p, vec![1, 0])
        });
    }

    #[test]
    fn clamped_temperature_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.param(Matrix::identity(2));
        let tau = t.param(Matrix::scalar(10.0));
        let s = t.scale_by_exp(x, tau, 100.0);
        assert_eq!(t.value(s).get(0, 0), 100.0);
        let l = t.symmetric_cross_entropy(s);
        let g = t.backward(l);
        assert!(g.get(tau).is_none());
        assert!(g.get(x).is_some());
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut t = Tape::new();
        let a = t.constant(Matrix::identity(2));
        let b = t.param(Matrix::identity(2));
        let c = t.matmul(a, b);
        let l = t.symmetric_cross_entropy(c);
        let g = t.backward(l);
        assert!(g.get(a).is_none());
        assert!(g.get(b).is_some());
    }
}

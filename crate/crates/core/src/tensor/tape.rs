use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a[B*m x k] . b` per batch; `b` is `[B*k x n]`, or `[B*n x k]` when transposed.
    MatMul {
        a: Var,
        b: Var,
        batch: usize,
        transpose_b: bool,
    },
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    ScaleRows(Var, Vec<f64>),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Gelu(Var),
    Map(Var, fn(f64) -> f64),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<Option<usize>>),
    MeanRowGroups(Var, usize),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor>,
    op: Op,
    requires_grad: bool,
}

/// Linear record of a forward computation.
///
/// Nodes are appended in evaluation order, so every node's inputs precede it
/// and a single reverse sweep visits each node exactly once.
#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grads: Option<Vec<Option<Vec<f64>>>>,
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// `0.5 x (1 + tanh(sqrt(2/pi) (x + 0.044715 x^3)))`
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh())
}

fn gelu_derivative(x: f64) -> f64 {
    let t = (SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x)
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn leaf(&mut self, value: Cow<'a, Tensor>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite("leaf".into()));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Trainable leaf borrowing its storage.
    pub fn param(&mut self, t: &'a Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), true)
    }

    pub fn param_owned(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(t), true)
    }

    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor) -> Result<Var> {
        self.leaf(Cow::Borrowed(t), false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.into()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check_2d(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        let s = self.value(v).shape();
        match s {
            [r, c] => Ok((*r, *c)),
            _ => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.batched_matmul(a, b, 1, false)
    }

    /// Per-batch matrix product over row-stacked operands.
    ///
    /// `a` is `[batch*m x k]`. Without transposition `b` is `[batch*k x n]`;
    /// with `transpose_b` it is `[batch*n x k]` and each block computes `a_i . b_iᵀ`.
    pub fn batched_matmul(&mut self, a: Var, b: Var, batch: usize, transpose_b: bool) -> Result<Var> {
        let (ar, k) = self.check_2d("matmul", a)?;
        let (br, bc) = self.check_2d("matmul", b)?;
        let err = || Error::shape("matmul", self.value(a).shape(), self.value(b).shape());
        if batch == 0 || ar % batch != 0 || br % batch != 0 {
            return Err(err());
        }
        let m = ar / batch;
        let (n, inner) = if transpose_b {
            (br / batch, bc)
        } else {
            (bc, br / batch)
        };
        if inner != k {
            return Err(err());
        }
        let av = self.value(a).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * m * n];
        for bi in 0..batch {
            let a_blk = &av[bi * m * k..(bi + 1) * m * k];
            let o_blk = &mut out[bi * m * n..(bi + 1) * m * n];
            if transpose_b {
                let b_blk = &bv[bi * n * k..(bi + 1) * n * k];
                for i in 0..m {
                    let arow = &a_blk[i * k..(i + 1) * k];
                    for j in 0..n {
                        let brow = &b_blk[j * k..(j + 1) * k];
                        o_blk[i * n + j] = dot(arow, brow);
                    }
                }
            } else {
                let b_blk = &bv[bi * k * n..(bi + 1) * k * n];
                for i in 0..m {
                    let orow = &mut o_blk[i * n..(i + 1) * n];
                    for p in 0..k {
                        axpy(a_blk[i * k + p], &b_blk[p * n..(p + 1) * n], orow);
                    }
                }
            }
        }
        let value = Tensor::raw(vec![batch * m, n], out);
        self.push(
            "matmul",
            value,
            Op::MatMul {
                a,
                b,
                batch,
                transpose_b,
            },
            &[a, b],
        )
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p + q).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("add", value, Op::Add(a, b), &[a, b])
    }

    /// Adds a length-`c` vector to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (x, r) = (self.value(a), self.value(row));
        let c = x.cols();
        if r.len() != c {
            return Err(Error::shape("add_row", x.shape(), r.shape()));
        }
        let mut data = x.data().to_vec();
        for chunk in data.chunks_mut(c) {
            for (d, b) in chunk.iter_mut().zip(r.data()) {
                *d += b;
            }
        }
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("add_row", value, Op::AddRow(a, row), &[a, row])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(p, q)| p * q).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("mul", value, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|p| p * factor).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("scale", value, Op::Scale(a, factor), &[a])
    }

    /// Multiplies row `i` by the constant `factors[i]`.
    pub fn scale_rows(&mut self, a: Var, factors: Vec<f64>) -> Result<Var> {
        let x = self.value(a);
        if factors.len() != x.rows() {
            return Err(Error::shape("scale_rows", x.shape(), &[factors.len()]));
        }
        let c = x.cols();
        let mut data = x.data().to_vec();
        for (chunk, f) in data.chunks_mut(c).zip(&factors) {
            chunk.iter_mut().for_each(|d| *d *= f);
        }
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("scale_rows", value, Op::ScaleRows(a, factors), &[a])
    }

    /// Softmax over the last axis. Entries whose `mask` flag is false get
    /// exactly zero weight; every row needs at least one unmasked entry.
    pub fn softmax_masked(&mut self, a: Var, mask: Option<&[bool]>) -> Result<Var> {
        let x = self.value(a);
        let n = x.cols();
        if let Some(m) = mask {
            if m.len() != x.len() {
                return Err(Error::shape("softmax", x.shape(), &[m.len()]));
            }
        }
        let mut out = vec![0.0; x.len()];
        for (r, (row, orow)) in x.data().chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let max = (0..n)
                .filter(|&j| keep(j))
                .map(|j| row[j])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::FullyMasked { row: r });
            }
            let mut total = 0.0;
            for j in 0..n {
                if keep(j) {
                    let e = (row[j] - max).exp();
                    orow[j] = e;
                    total += e;
                }
            }
            orow.iter_mut().for_each(|o| *o /= total);
        }
        let value = Tensor::raw(x.shape().to_vec(), out);
        self.push("softmax", value, Op::Softmax(a), &[a])
    }

    /// Normalizes each row to zero mean and unit variance, then applies `gamma`/`beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.len() != d || b.len() != d || d == 0 {
            return Err(Error::shape("layer_norm", xv.shape(), g.shape()));
        }
        if eps <= 0.0 {
            return Err(Error::Config("layer_norm eps must be positive".into()));
        }
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * g.data()[j] + b.data()[j];
            }
        }
        let value = Tensor::raw(xv.shape().to_vec(), out);
        self.push(
            "layer_norm",
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            &[x, gamma, beta],
        )
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| gelu_scalar(v)).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("gelu", value, Op::Gelu(a), &[a])
    }

    /// Elementwise `f` with a caller-supplied derivative `df`.
    pub fn map(&mut self, a: Var, f: fn(f64) -> f64, df: fn(f64) -> f64) -> Result<Var> {
        let x = self.value(a);
        let data = x.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::raw(x.shape().to_vec(), data);
        self.push("map", value, Op::Map(a, df), &[a])
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.check_2d("slice_cols", x)?;
        if start + len > c || len == 0 {
            return Err(Error::shape("slice_cols", &[r, c], &[start, len]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(r * len);
        for i in 0..r {
            out.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let value = Tensor::raw(vec![r, len], out);
        self.push("slice_cols", value, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.check_2d("concat_cols", p)?;
            if *rows.get_or_insert(r) != r {
                return Err(Error::shape("concat_cols", &[rows.unwrap_or(0)], &[r]));
            }
            total += c;
        }
        let rows = rows.ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let mut out = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        let value = Tensor::raw(vec![rows, total], out);
        self.push("concat_cols", value, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let mut cols = None;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.check_2d("concat_rows", p)?;
            if *cols.get_or_insert(c) != c {
                return Err(Error::shape("concat_rows", &[cols.unwrap_or(0)], &[c]));
            }
            rows += r;
            out.extend_from_slice(self.value(p).data());
        }
        let cols = cols.ok_or_else(|| Error::Config("concat of zero tensors".into()))?;
        let value = Tensor::raw(vec![rows, cols], out);
        self.push("concat_rows", value, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Row `i` of the result is row `index[i]` of `x`, or zeros for `None`.
    pub fn gather_rows(&mut self, x: Var, index: Vec<Option<usize>>) -> Result<Var> {
        let (r, c) = self.check_2d("gather_rows", x)?;
        if let Some(bad) = index.iter().flatten().find(|&&i| i >= r) {
            return Err(Error::out_of_range("row index", bad, r));
        }
        let src = self.value(x);
        let mut out = vec![0.0; index.len() * c];
        for (i, idx) in index.iter().enumerate() {
            if let Some(j) = idx {
                out[i * c..(i + 1) * c].copy_from_slice(src.row(*j));
            }
        }
        let value = Tensor::raw(vec![index.len(), c], out);
        self.push("gather_rows", value, Op::GatherRows(x, index), &[x])
    }

    /// Mean over consecutive groups of `group` rows.
    pub fn mean_row_groups(&mut self, x: Var, group: usize) -> Result<Var> {
        let (r, c) = self.check_2d("mean_row_groups", x)?;
        if group == 0 || r % group != 0 {
            return Err(Error::shape("mean_row_groups", &[r, c], &[group]));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; (r / group) * c];
        for i in 0..r {
            let o = &mut out[(i / group) * c..(i / group + 1) * c];
            axpy(1.0 / group as f64, &src[i * c..(i + 1) * c], o);
        }
        let value = Tensor::raw(vec![r / group, c], out);
        self.push("mean_row_groups", value, Op::MeanRowGroups(x, group), &[x])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = compensated_sum(self.value(a).data());
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let x = self.value(logits);
        let k = x.cols();
        let b = x.rows();
        if labels.len() != b || b == 0 {
            return Err(Error::shape("cross_entropy", x.shape(), &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::out_of_range("label", bad, k));
        }
        let mut probs = vec![0.0; x.len()];
        let mut loss = 0.0;
        for (i, &label) in labels.iter().enumerate() {
            let row = x.row(i);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let total: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + total.ln();
            loss += lse - row[label];
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
        }
        let value = Tensor::scalar(loss / b as f64);
        self.push(
            "cross_entropy",
            value,
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            &[logits],
        )
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate in tape order
    /// and are retained for leaves only.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.grads.is_some() {
            return Err(Error::BackwardTwice);
        }
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::Detached);
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        for (node, g) in self.nodes.iter().zip(grads.iter_mut()) {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                *g = None;
            }
        }
        let out_of_domain = grads.iter().flatten().any(|g| g.iter().any(|v| !v.is_finite()));
        self.grads = Some(grads);
        if out_of_domain {
            return Err(Error::NonFinite("backward".into()));
        }
        Ok(())
    }

    pub fn reset_grads(&mut self) {
        self.grads = None;
    }

    /// Gradient of a trainable leaf after [`Tape::backward`]; `None` if the leaf
    /// did not influence the loss.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.as_ref()?.get(v.0)?.as_deref()
    }

    /// Like [`Tape::grad`] but materializes zeros for unused leaves.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.value(v).shape().to_vec();
        match self.grad(v) {
            Some(g) => Tensor::raw(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    fn backprop_node(&self, idx: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        macro_rules! acc {
            ($v:expr) => {
                slot(grads, $v, self.nodes[$v.0].value.len())
            };
        }
        match &node.op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                batch,
                transpose_b,
            } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let k = av.cols();
                let m = av.rows() / batch;
                let n = out.cols();
                for bi in 0..*batch {
                    let g_blk = &g[bi * m * n..(bi + 1) * m * n];
                    let a_blk = &av.data()[bi * m * k..(bi + 1) * m * k];
                    let b_blk = &bv.data()[bi * k * n..(bi + 1) * k * n];
                    if wants(*a) {
                        let da = &mut acc!(*a)[bi * m * k..(bi + 1) * m * k];
                        for i in 0..m {
                            let grow = &g_blk[i * n..(i + 1) * n];
                            let darow = &mut da[i * k..(i + 1) * k];
                            if *transpose_b {
                                // dA = G . B
                                for j in 0..n {
                                    axpy(grow[j], &b_blk[j * k..(j + 1) * k], darow);
                                }
                            } else {
                                // dA = G . Bᵀ
                                for p in 0..k {
                                    darow[p] += dot(grow, &b_blk[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                    if wants(*b) {
                        let db = &mut acc!(*b)[bi * k * n..(bi + 1) * k * n];
                        for i in 0..m {
                            let grow = &g_blk[i * n..(i + 1) * n];
                            let arow = &a_blk[i * k..(i + 1) * k];
                            if *transpose_b {
                                // dB = Gᵀ . A
                                for j in 0..n {
                                    axpy(grow[j], arow, &mut db[j * k..(j + 1) * k]);
                                }
                            } else {
                                // dB = Aᵀ . G
                                for p in 0..k {
                                    axpy(arow[p], grow, &mut db[p * n..(p + 1) * n]);
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        axpy(1.0, g, acc!(v));
                    }
                }
            }
            Op::AddRow(a, row) => {
                if wants(*a) {
                    axpy(1.0, g, acc!(*a));
                }
                if wants(*row) {
                    let dr = acc!(*row);
                    for chunk in g.chunks(dr.len()) {
                        axpy(1.0, chunk, dr);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                if wants(*a) {
                    let da = acc!(*a);
                    for i in 0..g.len() {
                        da[i] += g[i] * bv[i];
                    }
                }
                if wants(*b) {
                    let db = acc!(*b);
                    for i in 0..g.len() {
                        db[i] += g[i] * av[i];
                    }
                }
            }
            Op::Scale(a, f) => {
                if wants(*a) {
                    axpy(*f, g, acc!(*a));
                }
            }
            Op::ScaleRows(a, factors) => {
                if wants(*a) {
                    let c = out.cols();
                    let da = acc!(*a);
                    for (i, f) in factors.iter().enumerate() {
                        axpy(*f, &g[i * c..(i + 1) * c], &mut da[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::Softmax(a) => {
                if wants(*a) {
                    let n = out.cols();
                    let da = acc!(*a);
                    for ((y, gr), d) in out.data().chunks(n).zip(g.chunks(n)).zip(da.chunks_mut(n)) {
                        let s = dot(y, gr);
                        for j in 0..n {
                            d[j] += y[j] * (gr[j] - s);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = out.cols();
                let gm = self.value(*gamma).data();
                if wants(*gamma) {
                    let dg = acc!(*gamma);
                    for (h, gr) in xhat.chunks(d).zip(g.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * h[j];
                        }
                    }
                }
                if wants(*beta) {
                    let db = acc!(*beta);
                    for gr in g.chunks(d) {
                        axpy(1.0, gr, db);
                    }
                }
                if wants(*x) {
                    let dx = acc!(*x);
                    let mut dh = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let h = &xhat[r * d..(r + 1) * d];
                        let gr = &g[r * d..(r + 1) * d];
                        for j in 0..d {
                            dh[j] = gr[j] * gm[j];
                        }
                        let mean_dh = dh.iter().sum::<f64>() / d as f64;
                        let mean_dh_h = dot(&dh, h) / d as f64;
                        let dxr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxr[j] += rs * (dh[j] - mean_dh - h[j] * mean_dh_h);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                if wants(*a) {
                    let xv = self.value(*a).data();
                    let da = acc!(*a);
                    for i in 0..g.len() {
                        da[i] += g[i] * gelu_derivative(xv[i]);
                    }
                }
            }
            Op::Map(a, df) => {
                if wants(*a) {
                    let xv = self.value(*a).data();
                    let da = acc!(*a);
                    for i in 0..g.len() {
                        da[i] += g[i] * df(xv[i]);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                if wants(*x) {
                    let c = self.value(*x).cols();
                    let len = out.cols();
                    let dx = acc!(*x);
                    for (i, gr) in g.chunks(len).enumerate() {
                        axpy(1.0, gr, &mut dx[i * c + start..i * c + start + len]);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let c = self.value(p).cols();
                    if wants(p) {
                        let dp = acc!(p);
                        for (i, gr) in g.chunks(total).enumerate() {
                            axpy(1.0, &gr[offset..offset + c], &mut dp[i * c..(i + 1) * c]);
                        }
                    }
                    offset += c;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if wants(p) {
                        axpy(1.0, &g[offset..offset + len], acc!(p));
                    }
                    offset += len;
                }
            }
            Op::GatherRows(x, index) => {
                if wants(*x) {
                    let c = out.cols();
                    let dx = acc!(*x);
                    for (i, idx) in index.iter().enumerate() {
                        if let Some(j) = idx {
                            axpy(1.0, &g[i * c..(i + 1) * c], &mut dx[j * c..(j + 1) * c]);
                        }
                    }
                }
            }
            Op::MeanRowGroups(x, group) => {
                if wants(*x) {
                    let c = out.cols();
                    let dx = acc!(*x);
                    let w = 1.0 / *group as f64;
                    for (i, d) in dx.chunks_mut(c).enumerate() {
                        axpy(w, &g[(i / group) * c..(i / group + 1) * c], d);
                    }
                }
            }
            Op::Sum(a) => {
                if wants(*a) {
                    acc!(*a).iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::CrossEntropy { logits, labels, probs } => {
                if wants(*logits) {
                    let k = self.value(*logits).cols();
                    let w = g[0] / labels.len() as f64;
                    let dl = acc!(*logits);
                    for (i, &label) in labels.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == label { 1.0 } else { 0.0 };
                            dl[i * k + j] += w * (probs[i * k + j] - onehot);
                        }
                    }
                }
            }
        }
    }
}

fn slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut Vec<f64> {
    grads[v.0].get_or_insert_with(|| vec![0.0; len])
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [0.0; 4];
    let (ac, bc) = (a.chunks_exact(4), b.chunks_exact(4));
    let tail: f64 = ac.remainder().iter().zip(bc.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ac.zip(bc) {
        for l in 0..4 {
            acc[l] += x[l] * y[l];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

#[inline]
fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    let n = x.len().min(y.len());
    for (yi, xi) in y[..n].iter_mut().zip(&x[..n]) {
        *yi += alpha * xi;
    }
}

/// Neumaier summation: the result does not depend on accumulated rounding of
/// the running total.
fn compensated_sum(xs: &[f64]) -> f64 {
    let mut sum = 0.0;
    let mut carry = 0.0;
    for &x in xs {
        let t = sum + x;
        carry += if sum.abs() >= x.abs() {
            (sum - t) + x
        } else {
            (x - t) + sum
        };
        sum = t;
    }
    sum + carry
}

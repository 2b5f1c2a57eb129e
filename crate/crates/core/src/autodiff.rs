//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] records every operation as it executes. Nodes are appended in
//! execution order, which is already a topological order, so the backward
//! sweep is a single reverse pass over the node list. Gradients are only
//! propagated into nodes that (transitively) depend on a parameter leaf.

use crate::error::{Error, Result};
use crate::tensor::{dot, for_each_lane, gemm_nn, gemm_nt, gemm_tn, Tensor, NORM_FLOOR};

/// Handle to a node in a [`Graph`].
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
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRows(Var, Var),
    Scale(Var, f64),
    ScaleBy(Var, Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Exp(Var),
    Softmax(Var, usize),
    LogSoftmax(Var, usize),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    CosineRows {
        z: Var,
        s: Var,
        row_norms: Vec<f64>,
        s_norm: f64,
    },
    NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    PickRows(Var, Vec<usize>),
    LnClamp(Var, f64),
    Sum(Var),
    Mean(Var),
    Variance(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records one forward computation. Not shared between threads; build one
/// graph per worker.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, a: Var) -> Result<(usize, usize)> {
        let s = self.shape(a);
        match s {
            [m, n] => Ok((*m, *n)),
            _ => Err(Error::dim(op, s, &[])),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Transpose(a), rg))
    }

    fn zip_with(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("add", a, b, |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    /// `a[m×n] + b[n]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("add_row", a)?;
        if self.shape(b) != [n] {
            return Err(Error::dim("add_row", self.shape(a), self.shape(b)));
        }
        let mut out = self.value(a).data().to_vec();
        let bias = self.value(b).data();
        for r in 0..m {
            for (o, &bv) in out[r * n..(r + 1) * n].iter_mut().zip(bias) {
                *o += bv;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::AddRow(a, b), rg))
    }

    /// Scales row `r` of `a[m×n]` by `s[r]`.
    pub fn mul_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("mul_rows", a)?;
        if self.shape(s) != [m] {
            return Err(Error::dim("mul_rows", self.shape(a), self.shape(s)));
        }
        let mut out = self.value(a).data().to_vec();
        let sv = self.value(s).data();
        for r in 0..m {
            for o in &mut out[r * n..(r + 1) * n] {
                *o *= sv[r];
            }
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MulRows(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a);
        self.push(t, Op::Scale(a, c), rg)
    }

    /// `a * s` for a single-element `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).len() != 1 {
            return Err(Error::dim("scale_by", self.shape(a), self.shape(s)));
        }
        let c = self.value(s).item();
        let t = self.value(a).map(|v| v * c);
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(t, Op::ScaleBy(a, s), rg))
    }

    /// Row-wise layer normalization with affine `gamma`, `beta` of width n.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let (m, n) = self.matrix_dims("layer_norm", x)?;
        if self.shape(gamma) != [n] || self.shape(beta) != [n] {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; m * n];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * n];
        for r in 0..m {
            let row = &xv[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                xhat[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(vec![m, n], out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        let t = self.value(a).map(|v| gelu(v).0);
        let rg = self.rg(a);
        self.push(t, Op::Gelu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let t = self.value(a).map(f64::exp);
        let rg = self.rg(a);
        self.push(t, Op::Exp(a), rg)
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let t = self.value(a).softmax(axis)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Softmax(a, axis), rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let src = self.value(a);
        if axis >= src.rank() {
            return Err(Error::dim("log_softmax", src.shape(), &[axis]));
        }
        if !src.is_finite() {
            return Err(Error::NonFinite("log_softmax input"));
        }
        let mut out = src.data().to_vec();
        for_each_lane(src.shape(), axis, |idx| {
            let max = idx.iter().map(|&i| out[i]).fold(f64::NEG_INFINITY, f64::max);
            let lse = idx.iter().map(|&i| (out[i] - max).exp()).sum::<f64>().ln() + max;
            for &i in idx {
                out[i] -= lse;
            }
        });
        let t = Tensor::new(src.shape().to_vec(), out)?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::LogSoftmax(a, axis), rg))
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = self.matrix_dims("slice_cols", a)?;
        if len == 0 || start + len > n {
            return Err(Error::dim("slice_cols", &[m, n], &[start, len]));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&src[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m, len], out)?, Op::SliceCols(a, start), rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let (m, _) = self.matrix_dims("concat_cols", first)?;
        let mut total = 0;
        for &p in parts {
            let (pm, pn) = self.matrix_dims("concat_cols", p)?;
            if pm != m {
                return Err(Error::dim("concat_cols", self.shape(first), self.shape(p)));
            }
            total += pn;
        }
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for &p in parts {
            let pn = self.shape(p)[1];
            let src = self.value(p).data();
            for r in 0..m {
                out[r * total + off..r * total + off + pn].copy_from_slice(&src[r * pn..(r + 1) * pn]);
            }
            off += pn;
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![m, total], out)?, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Stacks matrices (or vectors, as single rows) with equal column counts.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let n = self.value(first).cols();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() > 2 || t.cols() != n {
                return Err(Error::dim("concat_rows", self.shape(first), t.shape()));
            }
            rows += t.rows();
            out.extend_from_slice(t.data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::new(vec![rows, n], out)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Rows `idx` of a matrix, in that order (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("gather_rows", a)?;
        if idx.is_empty() || idx.iter().any(|&i| i >= m) {
            return Err(Error::dim("gather_rows", &[m, n], idx));
        }
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&src[i * n..(i + 1) * n]);
        }
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![idx.len(), n], out)?, Op::GatherRows(a, idx.to_vec()), rg))
    }

    /// Row `i` of a matrix as a vector.
    pub fn row(&mut self, a: Var, i: usize) -> Result<Var> {
        let r = self.gather_rows(a, &[i])?;
        let n = self.shape(a)[1];
        self.reshape(r, &[n])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape.to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(t, Op::Reshape(a), rg))
    }

    /// Cosine of every row of `z[L×d]` against `s[d]`. Rows (or `s`) with
    /// norm below [`NORM_FLOOR`] score 0 and pass no gradient.
    pub fn cosine_rows(&mut self, z: Var, s: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("cosine_rows", z)?;
        if self.shape(s) != [n] {
            return Err(Error::dim("cosine_rows", self.shape(z), self.shape(s)));
        }
        let zv = self.value(z).data();
        let sv = self.value(s).data();
        let s_norm = dot(sv, sv).sqrt();
        let mut row_norms = vec![0.0; m];
        let mut out = vec![0.0; m];
        for r in 0..m {
            let row = &zv[r * n..(r + 1) * n];
            let nr = dot(row, row).sqrt();
            row_norms[r] = nr;
            if nr >= NORM_FLOOR && s_norm >= NORM_FLOOR {
                out[r] = dot(row, sv) / (nr * s_norm);
            }
        }
        let rg = self.rg(z) || self.rg(s);
        Ok(self.push(
            Tensor::new(vec![m], out)?,
            Op::CosineRows {
                z,
                s,
                row_norms,
                s_norm,
            },
            rg,
        ))
    }

    /// Cosine similarity of two equal-length vectors, zero for degenerate input.
    pub fn cosine(&mut self, a: Var, b: Var) -> Result<Var> {
        let n = self.value(a).len();
        let a2 = self.reshape(a, &[1, n])?;
        let c = self.cosine_rows(a2, b)?;
        self.reshape(c, &[1])
    }

    /// Unit-normalizes every row. Zero rows are an error.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims("normalize_rows", x)?;
        let xv = self.value(x).data();
        let mut norms = vec![0.0; m];
        let mut out = xv.to_vec();
        for r in 0..m {
            let nr = dot(&xv[r * n..(r + 1) * n], &xv[r * n..(r + 1) * n]).sqrt();
            if nr < NORM_FLOOR {
                return Err(Error::DegenerateEmbedding);
            }
            norms[r] = nr;
            for o in &mut out[r * n..(r + 1) * n] {
                *o /= nr;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::NormalizeRows { x, norms }, rg))
    }

    /// Element `idx[r]` of every row `r`.
    pub fn pick_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims("pick_rows", a)?;
        if idx.len() != m || idx.iter().any(|&i| i >= n) {
            return Err(Error::dim("pick_rows", &[m, n], idx));
        }
        let src = self.value(a).data();
        let out = idx.iter().enumerate().map(|(r, &i)| src[r * n + i]).collect();
        let rg = self.rg(a);
        Ok(self.push(Tensor::new(vec![m], out)?, Op::PickRows(a, idx.to_vec()), rg))
    }

    /// Element `i` of a vector, as a one-element tensor.
    pub fn pick(&mut self, a: Var, i: usize) -> Result<Var> {
        let n = self.value(a).len();
        let a2 = self.reshape(a, &[1, n])?;
        self.pick_rows(a2, &[i])
    }

    /// `ln(max(a, floor))`; clamped entries receive no gradient.
    pub fn ln_clamped(&mut self, a: Var, floor: f64) -> Var {
        let t = self.value(a).map(|v| v.max(floor).ln());
        let rg = self.rg(a);
        self.push(t, Op::LnClamp(a, floor), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let t = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(t, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let t = Tensor::scalar(v.sum() / v.len() as f64);
        let rg = self.rg(a);
        self.push(t, Op::Mean(a), rg)
    }

    /// Population variance over all entries.
    pub fn variance(&mut self, a: Var) -> Var {
        let v = self.value(a).data();
        let n = v.len() as f64;
        let mean = v.iter().sum::<f64>() / n;
        let var = v.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n;
        let rg = self.rg(a);
        self.push(Tensor::scalar(var), Op::Variance(a), rg)
    }

    /// Sum of equal-shaped nodes.
    pub fn add_all(&mut self, parts: &[Var]) -> Result<Var> {
        let mut acc = *parts.first().ok_or_else(|| Error::Contract("sum of nothing".into()))?;
        for &p in &parts[1..] {
            acc = self.add(acc, p)?;
        }
        Ok(acc)
    }

    /// Reverse sweep from a single-element root. Gradients of earlier sweeps
    /// are discarded.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(self.shape(root), 1.0));
        for i in (0..=root.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        self.grads = grads;
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Tensor) {
        if !self.rg(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.add_assign(&contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Adds `contrib` given as a flat buffer shaped like node `v`.
    fn accumulate_data(&self, grads: &mut [Option<Tensor>], v: Var, contrib: Vec<f64>) -> Result<()> {
        if !self.rg(v) {
            return Ok(());
        }
        let t = Tensor::new(self.shape(v).to_vec(), contrib)?;
        self.accumulate(grads, v, t);
        Ok(())
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                let n = self.shape(*b)[1];
                if self.rg(*a) {
                    let mut da = vec![0.0; m * k];
                    gemm_nt(gd, self.value(*b).data(), &mut da, m, n, k);
                    self.accumulate_data(grads, *a, da)?;
                }
                if self.rg(*b) {
                    let mut db = vec![0.0; k * n];
                    gemm_tn(self.value(*a).data(), gd, &mut db, m, k, n);
                    self.accumulate_data(grads, *b, db)?;
                }
            }
            Op::Transpose(a) => {
                self.accumulate(grads, *a, g.transpose()?);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    let d = gd.iter().zip(self.value(*b).data()).map(|(x, y)| x * y).collect();
                    self.accumulate_data(grads, *a, d)?;
                }
                if self.rg(*b) {
                    let d = gd.iter().zip(self.value(*a).data()).map(|(x, y)| x * y).collect();
                    self.accumulate_data(grads, *b, d)?;
                }
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*b) {
                    let n = self.shape(*b)[0];
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate_data(grads, *b, db)?;
                }
            }
            Op::MulRows(a, s) => {
                let n = self.shape(*a)[1];
                let sv = self.value(*s).data();
                if self.rg(*a) {
                    let mut da = gd.to_vec();
                    for (r, row) in da.chunks_mut(n).enumerate() {
                        for v in row {
                            *v *= sv[r];
                        }
                    }
                    self.accumulate_data(grads, *a, da)?;
                }
                if self.rg(*s) {
                    let av = self.value(*a).data();
                    let ds = (0..sv.len())
                        .map(|r| dot(&gd[r * n..(r + 1) * n], &av[r * n..(r + 1) * n]))
                        .collect();
                    self.accumulate_data(grads, *s, ds)?;
                }
            }
            Op::Scale(a, c) => {
                self.accumulate(grads, *a, g.map(|v| v * c));
            }
            Op::ScaleBy(a, s) => {
                let c = self.value(*s).item();
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.map(|v| v * c));
                }
                if self.rg(*s) {
                    let ds = dot(gd, self.value(*a).data());
                    self.accumulate_data(grads, *s, vec![ds])?;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.shape(*gamma)[0];
                let m = inv_std.len();
                let gam = self.value(*gamma).data();
                if self.rg(*gamma) {
                    let mut dg = vec![0.0; n];
                    for r in 0..m {
                        for j in 0..n {
                            dg[j] += gd[r * n + j] * xhat[r * n + j];
                        }
                    }
                    self.accumulate_data(grads, *gamma, dg)?;
                }
                if self.rg(*beta) {
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate_data(grads, *beta, db)?;
                }
                if self.rg(*x) {
                    let mut dx = vec![0.0; m * n];
                    let nf = n as f64;
                    for r in 0..m {
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gam[j];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[r * n + j];
                        }
                        mean_dh /= nf;
                        mean_dh_h /= nf;
                        for j in 0..n {
                            let dh = gd[r * n + j] * gam[j];
                            dx[r * n + j] = inv_std[r] * (dh - mean_dh - xhat[r * n + j] * mean_dh_h);
                        }
                    }
                    self.accumulate_data(grads, *x, dx)?;
                }
            }
            Op::Gelu(a) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| gv * gelu(x).1)
                    .collect();
                self.accumulate_data(grads, *a, d)?;
            }
            Op::Exp(a) => {
                let d = gd.iter().zip(node.value.data()).map(|(gv, y)| gv * y).collect();
                self.accumulate_data(grads, *a, d)?;
            }
            Op::Softmax(a, axis) => {
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for_each_lane(node.value.shape(), *axis, |idx| {
                    let s: f64 = idx.iter().map(|&k| gd[k] * y[k]).sum();
                    for &k in idx {
                        d[k] = y[k] * (gd[k] - s);
                    }
                });
                self.accumulate_data(grads, *a, d)?;
            }
            Op::LogSoftmax(a, axis) => {
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for_each_lane(node.value.shape(), *axis, |idx| {
                    let s: f64 = idx.iter().map(|&k| gd[k]).sum();
                    for &k in idx {
                        d[k] = gd[k] - y[k].exp() * s;
                    }
                });
                self.accumulate_data(grads, *a, d)?;
            }
            Op::SliceCols(a, start) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let len = node.value.shape()[1];
                let mut d = vec![0.0; m * n];
                for r in 0..m {
                    d[r * n + start..r * n + start + len].copy_from_slice(&gd[r * len..(r + 1) * len]);
                }
                self.accumulate_data(grads, *a, d)?;
            }
            Op::ConcatCols(parts) => {
                let (m, total) = (node.value.shape()[0], node.value.shape()[1]);
                let mut off = 0;
                for &p in parts {
                    let pn = self.shape(p)[1];
                    if self.rg(p) {
                        let mut d = Vec::with_capacity(m * pn);
                        for r in 0..m {
                            d.extend_from_slice(&gd[r * total + off..r * total + off + pn]);
                        }
                        self.accumulate_data(grads, p, d)?;
                    }
                    off += pn;
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.rg(p) {
                        self.accumulate_data(grads, p, gd[off..off + len].to_vec())?;
                    }
                    off += len;
                }
            }
            Op::GatherRows(a, idx) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; m * n];
                for (r, &src) in idx.iter().enumerate() {
                    for j in 0..n {
                        d[src * n + j] += gd[r * n + j];
                    }
                }
                self.accumulate_data(grads, *a, d)?;
            }
            Op::Reshape(a) => {
                self.accumulate_data(grads, *a, gd.to_vec())?;
            }
            Op::CosineRows {
                z,
                s,
                row_norms,
                s_norm,
            } => {
                let (m, n) = (self.shape(*z)[0], self.shape(*z)[1]);
                let zv = self.value(*z).data();
                let sv = self.value(*s).data();
                let c = node.value.data();
                let mut dz = vec![0.0; m * n];
                let mut ds = vec![0.0; n];
                if *s_norm >= NORM_FLOOR {
                    for r in 0..m {
                        let nr = row_norms[r];
                        if nr < NORM_FLOOR || gd[r] == 0.0 {
                            continue;
                        }
                        let row = &zv[r * n..(r + 1) * n];
                        for j in 0..n {
                            // d cos / d z = s/(|z||s|) - cos z/|z|²
                            dz[r * n + j] = gd[r] * (sv[j] / (nr * s_norm) - c[r] * row[j] / (nr * nr));
                            ds[j] += gd[r] * (row[j] / (nr * s_norm) - c[r] * sv[j] / (s_norm * s_norm));
                        }
                    }
                }
                self.accumulate_data(grads, *z, dz)?;
                self.accumulate_data(grads, *s, ds)?;
            }
            Op::NormalizeRows { x, norms } => {
                let n = self.shape(*x)[1];
                let y = node.value.data();
                let mut d = vec![0.0; y.len()];
                for (r, &nr) in norms.iter().enumerate() {
                    let gr = &gd[r * n..(r + 1) * n];
                    let yr = &y[r * n..(r + 1) * n];
                    let gy = dot(gr, yr);
                    for j in 0..n {
                        d[r * n + j] = (gr[j] - yr[j] * gy) / nr;
                    }
                }
                self.accumulate_data(grads, *x, d)?;
            }
            Op::PickRows(a, idx) => {
                let (m, n) = (self.shape(*a)[0], self.shape(*a)[1]);
                let mut d = vec![0.0; m * n];
                for (r, &k) in idx.iter().enumerate() {
                    d[r * n + k] = gd[r];
                }
                self.accumulate_data(grads, *a, d)?;
            }
            Op::LnClamp(a, floor) => {
                let d = gd
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(gv, &x)| if x > *floor { gv / x } else { 0.0 })
                    .collect();
                self.accumulate_data(grads, *a, d)?;
            }
            Op::Sum(a) => {
                let t = Tensor::full(self.shape(*a), gd[0]);
                self.accumulate(grads, *a, t);
            }
            Op::Mean(a) => {
                let n = self.value(*a).len() as f64;
                let t = Tensor::full(self.shape(*a), gd[0] / n);
                self.accumulate(grads, *a, t);
            }
            Op::Variance(a) => {
                let v = self.value(*a).data();
                let n = v.len() as f64;
                let mean = v.iter().sum::<f64>() / n;
                let d = v.iter().map(|x| gd[0] * 2.0 * (x - mean) / n).collect();
                self.accumulate_data(grads, *a, d)?;
            }
        }
        Ok(())
    }
}

/// GELU value and derivative (tanh form).
fn gelu(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let y = 0.5 * x * (1.0 + t);
    let dy = 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du;
    (y, dy)
}

/// Outcome of [`grad_check`].
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// max |analytic − numeric| / max(1, |analytic|) over the checked coordinates.
    pub max_rel_error: f64,
    pub checked: usize,
    /// (param, flat index, analytic, numeric) of the worst coordinate.
    pub worst: Option<(usize, usize, f64, f64)>,
}

/// Compares reverse-mode gradients against central differences.
///
/// `f` builds the scalar objective from leaf vars bound to `params` (in
/// order). `coords`, when given, restricts the check to `(param, flat index)`
/// pairs; otherwise every coordinate of every parameter is checked.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64, coords: Option<&[(usize, usize)]>) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = params.iter().map(|p| g.param(p.clone())).collect();
    let root = f(&mut g, &vars)?;
    g.backward(root)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(p.shape())))
        .collect();

    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.constant(p.clone())).collect();
        let root = f(&mut g, &vars)?;
        let v = g.value(root).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check objective"));
        }
        Ok(v)
    };

    let all: Vec<(usize, usize)>;
    let coords = match coords {
        Some(c) => c,
        None => {
            all = params
                .iter()
                .enumerate()
                .flat_map(|(pi, p)| (0..p.len()).map(move |k| (pi, k)))
                .collect();
            &all
        }
    };

    let mut work: Vec<Tensor> = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        checked: 0,
        worst: None,
    };
    for &(pi, k) in coords {
        let orig = work[pi].data()[k];
        work[pi].data_mut()[k] = orig + h;
        let fp = eval(&work)?;
        work[pi].data_mut()[k] = orig - h;
        let fm = eval(&work)?;
        work[pi].data_mut()[k] = orig;
        let numeric = (fp - fm) / (2.0 * h);
        let a = analytic[pi].data()[k];
        let err = (a - numeric).abs() / a.abs().max(1.0);
        report.checked += 1;
        if report.worst.is_none() || err > report.max_rel_error {
            report.max_rel_error = err;
            report.worst = Some((pi, k, a, numeric));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const H: f64 = 1e-5;
    const TOL: f64 = 1e-6;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn check(params: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> Result<Var>) {
        let r = grad_check(f, params, H, None).unwrap();
        assert!(r.max_rel_error < TOL, "grad check failed: {r:?}");
    }

    /// Weighted sum so every output coordinate matters.
    fn probe(g: &mut Graph, v: Var, seed: u64) -> Result<Var> {
        let w = Tensor::randn(&mut rng(seed), g.shape(v), 1.0);
        let w = g.constant(w);
        let p = g.mul(v, w)?;
        Ok(g.sum(p))
    }

    #[test]
    fn polynomial_and_constant() {
        let r = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[Tensor::scalar(3.0)],
            H,
            None,
        )
        .unwrap();
        assert!(r.max_rel_error < 1e-8);
        let (_, _, analytic, _) = r.worst.unwrap();
        assert!((analytic - 6.0).abs() < 1e-12);

        let r = grad_check(
            |g, v| {
                let z = g.scale(v[0], 0.0);
                let c = g.constant(Tensor::scalar(4.0));
                let s = g.sum(z);
                g.add(s, c)
            },
            &[Tensor::scalar(1.5)],
            H,
            None,
        )
        .unwrap();
        assert_eq!(r.max_rel_error, 0.0);
    }

    #[test]
    fn shared_subexpression_accumulates() {
        // f(x) = x·x + x  →  f'(x) = 2x + 1
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(2.5));
        let xx = g.mul(x, x).unwrap();
        let f = g.add(xx, x).unwrap();
        g.backward(f).unwrap();
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_populates_every_param() {
        let mut g = Graph::new();
        let a = g.param(Tensor::randn(&mut rng(1), &[2, 3], 1.0));
        let b = g.param(Tensor::randn(&mut rng(2), &[3, 2], 1.0));
        let unused = g.param(Tensor::ones(&[4]));
        let c = g.matmul(a, b).unwrap();
        let s = g.sum(c);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a).unwrap().shape(), &[2, 3]);
        assert_eq!(g.grad(b).unwrap().shape(), &[3, 2]);
        // unreachable from the root
        assert!(g.grad(unused).is_none());
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let a = g.param(Tensor::ones(&[2]));
        assert!(g.backward(a).is_err());
    }

    #[test]
    fn grad_matmul_transpose() {
        let p = [Tensor::randn(&mut rng(3), &[3, 4], 1.0), Tensor::randn(&mut rng(4), &[4, 2], 1.0)];
        check(&p, |g, v| {
            let c = g.matmul(v[0], v[1])?;
            let t = g.transpose(c)?;
            probe(g, t, 9)
        });
    }

    #[test]
    fn grad_elementwise() {
        let p = [Tensor::randn(&mut rng(5), &[3, 3], 1.0), Tensor::randn(&mut rng(6), &[3, 3], 1.0)];
        check(&p, |g, v| {
            let a = g.add(v[0], v[1])?;
            let s = g.sub(a, v[1])?;
            let m = g.mul(s, v[1])?;
            let e = g.exp(m);
            let y = g.gelu(e);
            let y = g.scale(y, 0.7);
            probe(g, y, 10)
        });
    }

    #[test]
    fn grad_broadcasts() {
        let p = [
            Tensor::randn(&mut rng(7), &[3, 4], 1.0),
            Tensor::randn(&mut rng(8), &[4], 1.0),
            Tensor::randn(&mut rng(9), &[3], 1.0),
            Tensor::scalar(0.8),
        ];
        check(&p, |g, v| {
            let a = g.add_row(v[0], v[1])?;
            let b = g.mul_rows(a, v[2])?;
            let c = g.scale_by(b, v[3])?;
            probe(g, c, 11)
        });
    }

    #[test]
    fn grad_layer_norm() {
        let p = [
            Tensor::randn(&mut rng(12), &[3, 5], 2.0),
            Tensor::randn(&mut rng(13), &[5], 1.0),
            Tensor::randn(&mut rng(14), &[5], 1.0),
        ];
        check(&p, |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            probe(g, y, 15)
        });
    }

    #[test]
    fn grad_softmax_both_axes() {
        let p = [Tensor::randn(&mut rng(16), &[3, 4], 1.5)];
        for axis in 0..2 {
            check(&p, |g, v| {
                let y = g.softmax(v[0], axis)?;
                probe(g, y, 17)
            });
            check(&p, |g, v| {
                let y = g.log_softmax(v[0], axis)?;
                probe(g, y, 18)
            });
        }
    }

    fn row_of(g: &mut Graph, v: Var) -> Result<Var> {
        let a = g.slice_cols(v, 0, 1)?;
        let t = g.transpose(a)?;
        let s = g.slice_cols(t, 0, 3)?;
        let s = g.concat_cols(&[s, s, s])?;
        let s = g.slice_cols(s, 1, 8)?;
        g.row(s, 0)
    }

    #[test]
    fn grad_slicing() {
        let p = [Tensor::randn(&mut rng(19), &[3, 6], 1.0)];
        check(&p, |g, v| {
            let a = g.slice_cols(v[0], 0, 2)?;
            let b = g.slice_cols(v[0], 2, 4)?;
            let c = g.concat_cols(&[b, a, a])?;
            let r = g.gather_rows(c, &[2, 0, 2])?;
            let extra = row_of(g, v[0])?;
            let r = g.concat_rows(&[r, extra, r])?;
            let row = g.row(r, 1)?;
            let y = g.pick_rows(c, &[0, 5, 3])?;
            let s1 = probe(g, row, 20)?;
            let s2 = probe(g, y, 21)?;
            g.add(s1, s2)
        });
    }

    #[test]
    fn grad_cosine_and_normalize() {
        let p = [Tensor::randn(&mut rng(22), &[4, 5], 1.0), Tensor::randn(&mut rng(23), &[5], 1.0)];
        check(&p, |g, v| {
            let c = g.cosine_rows(v[0], v[1])?;
            let n = g.normalize_rows(v[0])?;
            let s1 = probe(g, c, 24)?;
            let s2 = probe(g, n, 25)?;
            g.add(s1, s2)
        });
    }

    #[test]
    fn grad_reductions() {
        let p = [Tensor::uniform(&mut rng(26), &[6], 0.1, 2.0)];
        check(&p, |g, v| {
            let l = g.ln_clamped(v[0], 1e-12);
            let a = g.mean(l);
            let b = g.variance(v[0]);
            let c = g.sum(v[0]);
            let ab = g.add(a, b)?;
            g.add(ab, c)
        });
    }

    #[test]
    fn cosine_degenerate_row_is_zero() {
        let mut g = Graph::new();
        let z = g.param(Tensor::matrix(2, 2, vec![0.0, 0.0, 1.0, 1.0]).unwrap());
        let s = g.param(Tensor::vector(vec![1.0, 0.0]));
        let c = g.cosine_rows(z, s).unwrap();
        assert_eq!(g.value(c).data()[0], 0.0);
        let t = g.sum(c);
        g.backward(t).unwrap();
        assert!(g.grad(z).unwrap().is_finite());
        assert_eq!(&g.grad(z).unwrap().data()[..2], &[0.0, 0.0]);
    }

    #[test]
    fn ln_clamp_blocks_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![0.0, 2.0]));
        let l = g.ln_clamped(x, 1e-12);
        assert!((g.value(l).data()[0] - (1e-12f64).ln()).abs() < 1e-12);
        let s = g.sum(l);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[0.0, 0.5]);
    }

    #[test]
    fn normalize_zero_row_errors() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[1, 3]));
        assert!(matches!(g.normalize_rows(x), Err(Error::DegenerateEmbedding)));
    }

    #[test]
    fn grad_check_reports_non_finite() {
        let err = grad_check(
            |g, v| {
                let l = g.ln_clamped(v[0], 0.0);
                Ok(g.sum(l))
            },
            &[Tensor::scalar(0.0)],
            H,
            None,
        )
        .unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #[test]
            fn softmax_rows_sum_to_one(vals in proptest::collection::vec(-1e4f64..1e4, 1..12)) {
                let t = Tensor::vector(vals);
                let s = t.softmax(0).unwrap();
                prop_assert!((s.sum() - 1.0).abs() < 1e-9);
                prop_assert!(s.data().iter().all(|&v| v >= 0.0));
            }
        }
    }
}

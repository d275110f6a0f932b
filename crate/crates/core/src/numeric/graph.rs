//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every primitive as a node appended after its inputs,
//! so node order is already a topological order and [`Graph::backward`] is a
//! single reverse sweep. Values are row-major `f64`; operations that work
//! "over the last axis" view their input as `[rows, last_dim]`.
//!
//! Only nodes that can reach a `requires_grad` leaf take part in the sweep,
//! which keeps attack-time backward passes free of weight-gradient work.

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`]. Ids are unique within one graph.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;
const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_K: f64 = 0.044_715;

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRow(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Gelu(Var),
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    AddConst(Var),
    Sum(Var),
    Mean(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Clamp {
        x: Var,
        lo: f64,
        hi: f64,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
        smoothing: f64,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    /// Some `requires_grad` leaf is reachable from this node.
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    leaf_grads: Vec<Option<Vec<f64>>>,
}

impl Graph {
    pub fn new() -> Self {
        Graph::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            tracked: requires_grad,
        });
        self.leaf_grads.push(None);
        Var(id)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a `requires_grad` leaf, if any backward pass
    /// has reached it since the last [`zero_grad`](Self::zero_grad).
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.leaf_grads[v.0].as_deref()
    }

    /// Gradient of a leaf as a tensor, zeros when nothing has flowed into it.
    pub fn grad_tensor(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grad(v) {
            Some(g) => Tensor::from_parts(shape, g.to_vec()),
            None => Tensor::zeros(&shape),
        }
    }

    pub fn zero_grad(&mut self) {
        for g in &mut self.leaf_grads {
            *g = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        let id = self.nodes.len();
        self.nodes.push(Node {
            value,
            op,
            requires_grad: false,
            tracked,
        });
        self.leaf_grads.push(None);
        Var(id)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn matrix_dims(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match *self.shape(v) {
            [r, c] => Ok((r, c)),
            ref s => Err(Error::shape(op, s, &[0, 0])),
        }
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        self.push(Tensor::from_parts(shape, data), op, &[a, b])
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let shape = self.shape(a).to_vec();
        let data = self.value(a).data().iter().map(|&x| f(x)).collect();
        self.push(Tensor::from_parts(shape, data), op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    /// Adds a `[last_dim]` row vector to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if self.shape(row) != [cols] {
            return Err(Error::shape("add_row", self.shape(x), self.shape(row)));
        }
        let shape = self.shape(x).to_vec();
        let r = self.value(row).data();
        let data = self
            .value(x)
            .data()
            .chunks_exact(cols)
            .flat_map(|chunk| chunk.iter().zip(r).map(|(&a, &b)| a + b))
            .collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddRow(x, row), &[x, row]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims("matmul", a)?;
        let (k2, n) = self.matrix_dims("matmul", b)?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            &mut out,
            0.0,
        );
        Ok(self.push(Tensor::from_parts(vec![m, n], out), Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        Ok(self.push(Tensor::from_parts(vec![c, r], out), Op::Transpose(a), &[a]))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a), &[a]))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if cols == 0 {
            return Err(Error::EmptyAxis { op: "softmax" });
        }
        let shape = self.shape(x).to_vec();
        let mut out = self.value(x).to_vec();
        for row in out.chunks_exact_mut(cols) {
            softmax_in_place(row)?;
        }
        Ok(self.push(Tensor::from_parts(shape, out), Op::Softmax(x), &[x]))
    }

    /// Layer normalization over the last axis with affine `gain` and `bias`.
    ///
    /// A zero-variance row normalizes to zeros, so only `bias` survives.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let cols = self.value(x).last_dim();
        if self.shape(gain) != [cols] || self.shape(bias) != [cols] {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gain)));
        }
        let shape = self.shape(x).to_vec();
        let src = self.value(x).data();
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let rows = src.len() / cols;
        let mut xhat = vec![0.0; src.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; src.len()];
        for r in 0..rows {
            let row = &src[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..cols {
                let h = (row[j] - mean) * is;
                xhat[r * cols + j] = h;
                out[r * cols + j] = h * g[j] + b[j];
            }
        }
        Ok(self.push(
            Tensor::from_parts(shape, out),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            &[x, gain, bias],
        ))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.map(x, Op::Gelu(x), |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_K * v * v * v)).tanh())
        })
    }

    /// Gathers rows of a `[n, d]` table: output row `i` is `table[ids[i]]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (n, d) = self.matrix_dims("embedding", table)?;
        if ids.is_empty() {
            return Err(Error::EmptyAxis { op: "embedding" });
        }
        if let Some(&bad) = ids.iter().find(|&&i| i >= n) {
            return Err(Error::invalid(format!(
                "embedding id {bad} out of range for table of {n} rows"
            )));
        }
        let src = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &i in ids {
            out.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], out),
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Adds a constant (non-differentiable) tensor, e.g. a causal mask of
    /// zeros and negative infinities.
    pub fn add_const(&mut self, x: Var, bias: &Tensor) -> Result<Var> {
        if self.shape(x) != bias.shape() {
            return Err(Error::shape("add_const", self.shape(x), bias.shape()));
        }
        let shape = self.shape(x).to_vec();
        let data = self
            .value(x)
            .data()
            .iter()
            .zip(bias.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(self.push(Tensor::from_parts(shape, data), Op::AddConst(x), &[x]))
    }

    /// Sum of all elements, left to right.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// Stacks 2-D inputs with equal column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat_rows" })?;
        let (_, cols) = self.matrix_dims("concat_rows", first)?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_rows", p)?;
            if c != cols {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(p)));
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.value(p).data());
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatRows(parts.to_vec()),
            parts,
        ))
    }

    /// Joins 2-D inputs with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or(Error::EmptyAxis { op: "concat_cols" })?;
        let (rows, _) = self.matrix_dims("concat_cols", first)?;
        let mut cols = 0;
        for &p in parts {
            let (r, c) = self.matrix_dims("concat_cols", p)?;
            if r != rows {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(p)));
            }
            cols += c;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                let c = self.shape(p)[1];
                out.extend_from_slice(&self.value(p).data()[r * c..(r + 1) * c]);
            }
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, cols], out),
            Op::ConcatCols(parts.to_vec()),
            parts,
        ))
    }

    /// Columns `start..start + width` of a 2-D input.
    pub fn slice_cols(&mut self, x: Var, start: usize, width: usize) -> Result<Var> {
        let (rows, cols) = self.matrix_dims("slice_cols", x)?;
        if width == 0 || start + width > cols {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, width]));
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(rows * width);
        for r in 0..rows {
            out.extend_from_slice(&src[r * cols + start..r * cols + start + width]);
        }
        Ok(self.push(
            Tensor::from_parts(vec![rows, width], out),
            Op::SliceCols { x, start },
            &[x],
        ))
    }

    /// Flat gather: output element `i` is `x.data[index[i]]`, shaped `shape`.
    pub fn gather(&mut self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != index.len() || index.is_empty() {
            return Err(Error::shape("gather", shape, &[index.len()]));
        }
        let src = self.value(x).data();
        if let Some(&bad) = index.iter().find(|&&i| i >= src.len()) {
            return Err(Error::invalid(format!(
                "gather index {bad} out of range for {} elements",
                src.len()
            )));
        }
        let out = index.iter().map(|&i| src[i]).collect();
        Ok(self.push(
            Tensor::from_parts(shape.to_vec(), out),
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            &[x],
        ))
    }

    /// Clips into `[lo, hi]`. Gradient passes where the input already lies
    /// inside the bounds and is zero where it was clipped.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.map(x, Op::Clamp { x, lo, hi }, |v| v.clamp(lo, hi))
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits` (`[T, V]`), skipping positions equal to `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], ignore_index: usize) -> Result<Var> {
        self.cross_entropy_smoothed(logits, targets, ignore_index, 0.0)
    }

    /// Cross-entropy against the target mixed with `smoothing` mass spread
    /// uniformly over the classes whose logit is finite in that row.
    pub fn cross_entropy_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        ignore_index: usize,
        smoothing: f64,
    ) -> Result<Var> {
        let (t, vocab) = self.matrix_dims("cross_entropy", logits)?;
        if targets.len() != t {
            return Err(Error::shape("cross_entropy", self.shape(logits), &[targets.len()]));
        }
        if !(0.0..1.0).contains(&smoothing) {
            return Err(Error::invalid(format!("label smoothing {smoothing} outside [0, 1)")));
        }
        let mut kept = Vec::with_capacity(t);
        for (position, &target) in targets.iter().enumerate() {
            if target == ignore_index {
                kept.push(None);
            } else if target >= vocab {
                return Err(Error::TargetOutOfRange {
                    position,
                    target,
                    vocab,
                });
            } else {
                kept.push(Some(target));
            }
        }
        let count = kept.iter().filter(|k| k.is_some()).count();
        if count == 0 {
            return Err(Error::AllIgnored);
        }
        let raw = self.value(logits).data();
        let mut probs = raw.to_vec();
        let mut total = 0.0;
        for ((row, z), target) in probs.chunks_exact_mut(vocab).zip(raw.chunks_exact(vocab)).zip(&kept) {
            softmax_in_place(row)?;
            let Some(k) = *target else { continue };
            let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + z.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
            total -= (1.0 - smoothing) * (z[k] - lse);
            if smoothing > 0.0 {
                let finite: Vec<f64> = z.iter().copied().filter(|v| v.is_finite()).collect();
                let mean = finite.iter().map(|&v| v - lse).sum::<f64>() / finite.len() as f64;
                total -= smoothing * mean;
            }
        }
        let loss = total / count as f64;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: kept,
                probs,
                count,
                smoothing,
            },
            &[logits],
        ))
    }

    /// Reverse sweep from a scalar `loss`, adding d(loss)/d(leaf) into the
    /// gradient buffer of every `requires_grad` leaf. Buffers accumulate
    /// across calls until [`zero_grad`](Self::zero_grad).
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.nodes[loss.0].tracked {
            return Ok(());
        }
        let Graph { nodes, leaf_grads } = self;
        let mut grads: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &nodes[id];
            match &node.op {
                Op::Leaf => {
                    if node.requires_grad {
                        match &mut leaf_grads[id] {
                            Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                            empty => *empty = Some(g),
                        }
                    }
                }
                Op::Add(a, b) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        axpy(da, 1.0, &g);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        axpy(db, 1.0, &g);
                    }
                }
                Op::Sub(a, b) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        axpy(da, 1.0, &g);
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        axpy(db, -1.0, &g);
                    }
                }
                Op::Mul(a, b) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let bv = nodes[b.0].value.data();
                        for ((d, &gi), &bi) in da.iter_mut().zip(&g).zip(bv) {
                            *d += gi * bi;
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        let av = nodes[a.0].value.data();
                        for ((d, &gi), &ai) in db.iter_mut().zip(&g).zip(av) {
                            *d += gi * ai;
                        }
                    }
                }
                Op::Scale(a, c) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        axpy(da, *c, &g);
                    }
                }
                Op::AddRow(x, row) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        axpy(dx, 1.0, &g);
                    }
                    if let Some(dr) = slot(&mut grads, nodes, *row) {
                        let cols = dr.len();
                        for chunk in g.chunks_exact(cols) {
                            axpy(dr, 1.0, chunk);
                        }
                    }
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                    let n = nodes[b.0].value.shape()[1];
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        // da[m,k] += g[m,n] * b^T
                        gemm(
                            m,
                            n,
                            k,
                            &g,
                            (n as isize, 1),
                            nodes[b.0].value.data(),
                            (1, n as isize),
                            da,
                            1.0,
                        );
                    }
                    if let Some(db) = slot(&mut grads, nodes, *b) {
                        // db[k,n] += a^T * g[m,n]
                        gemm(
                            k,
                            m,
                            n,
                            nodes[a.0].value.data(),
                            (1, k as isize),
                            &g,
                            (n as isize, 1),
                            db,
                            1.0,
                        );
                    }
                }
                Op::Transpose(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                        for i in 0..r {
                            for j in 0..c {
                                da[i * c + j] += g[j * r + i];
                            }
                        }
                    }
                }
                Op::Reshape(a) | Op::AddConst(a) => {
                    if let Some(da) = slot(&mut grads, nodes, *a) {
                        axpy(da, 1.0, &g);
                    }
                }
                Op::Softmax(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        let y = node.value.data();
                        let cols = node.value.last_dim();
                        for ((dxr, yr), gr) in dx
                            .chunks_exact_mut(cols)
                            .zip(y.chunks_exact(cols))
                            .zip(g.chunks_exact(cols))
                        {
                            let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for j in 0..cols {
                                dxr[j] += yr[j] * (gr[j] - dot);
                            }
                        }
                    }
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    xhat,
                    inv_std,
                } => {
                    let cols = node.value.last_dim();
                    let gv = nodes[gain.0].value.data();
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        let mut dh = vec![0.0; cols];
                        for (r, is) in inv_std.iter().enumerate() {
                            let gr = &g[r * cols..(r + 1) * cols];
                            let hr = &xhat[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                dh[j] = gr[j] * gv[j];
                            }
                            let mean_dh = dh.iter().sum::<f64>() / cols as f64;
                            let mean_dh_h = dh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / cols as f64;
                            let dxr = &mut dx[r * cols..(r + 1) * cols];
                            for j in 0..cols {
                                dxr[j] += is * (dh[j] - mean_dh - hr[j] * mean_dh_h);
                            }
                        }
                    }
                    if let Some(dg) = slot(&mut grads, nodes, *gain) {
                        for (gr, hr) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                            for j in 0..cols {
                                dg[j] += gr[j] * hr[j];
                            }
                        }
                    }
                    if let Some(db) = slot(&mut grads, nodes, *bias) {
                        for gr in g.chunks_exact(cols) {
                            axpy(db, 1.0, gr);
                        }
                    }
                }
                Op::Gelu(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        let xv = nodes[x.0].value.data();
                        for ((d, &gi), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            let t = (GELU_C * (v + GELU_K * v * v * v)).tanh();
                            let dt = (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * v * v);
                            *d += gi * (0.5 * (1.0 + t) + 0.5 * v * dt);
                        }
                    }
                }
                Op::Embedding { table, ids } => {
                    if let Some(dt) = slot(&mut grads, nodes, *table) {
                        let d = nodes[table.0].value.shape()[1];
                        for (i, &id) in ids.iter().enumerate() {
                            axpy(&mut dt[id * d..(id + 1) * d], 1.0, &g[i * d..(i + 1) * d]);
                        }
                    }
                }
                Op::Sum(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        dx.iter_mut().for_each(|d| *d += g[0]);
                    }
                }
                Op::Mean(x) => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        let s = g[0] / dx.len() as f64;
                        dx.iter_mut().for_each(|d| *d += s);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = nodes[p.0].value.numel();
                        if let Some(dp) = slot(&mut grads, nodes, *p) {
                            axpy(dp, 1.0, &g[offset..offset + n]);
                        }
                        offset += n;
                    }
                }
                Op::ConcatCols(parts) => {
                    let total = node.value.shape()[1];
                    let mut offset = 0;
                    for p in parts {
                        let c = nodes[p.0].value.shape()[1];
                        if let Some(dp) = slot(&mut grads, nodes, *p) {
                            for (r, dr) in dp.chunks_exact_mut(c).enumerate() {
                                axpy(dr, 1.0, &g[r * total + offset..r * total + offset + c]);
                            }
                        }
                        offset += c;
                    }
                }
                Op::SliceCols { x, start } => {
                    let width = node.value.shape()[1];
                    let cols = nodes[x.0].value.shape()[1];
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (r, gr) in g.chunks_exact(width).enumerate() {
                            axpy(&mut dx[r * cols + start..r * cols + start + width], 1.0, gr);
                        }
                    }
                }
                Op::Gather { x, index } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        for (&i, &gi) in index.iter().zip(&g) {
                            dx[i] += gi;
                        }
                    }
                }
                Op::Clamp { x, lo, hi } => {
                    if let Some(dx) = slot(&mut grads, nodes, *x) {
                        let xv = nodes[x.0].value.data();
                        for ((d, &gi), &v) in dx.iter_mut().zip(&g).zip(xv) {
                            if v >= *lo && v <= *hi {
                                *d += gi;
                            }
                        }
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                    count,
                    smoothing,
                } => {
                    if let Some(dl) = slot(&mut grads, nodes, *logits) {
                        let z = nodes[logits.0].value.data();
                        let vocab = nodes[logits.0].value.shape()[1];
                        let s = g[0] / *count as f64;
                        for (r, target) in targets.iter().enumerate() {
                            let Some(k) = *target else { continue };
                            let row = &mut dl[r * vocab..(r + 1) * vocab];
                            let pr = &probs[r * vocab..(r + 1) * vocab];
                            for j in 0..vocab {
                                row[j] += s * pr[j];
                            }
                            row[k] -= s * (1.0 - *smoothing);
                            if *smoothing > 0.0 {
                                let zr = &z[r * vocab..(r + 1) * vocab];
                                let n = zr.iter().filter(|v| v.is_finite()).count() as f64;
                                for j in 0..vocab {
                                    if zr[j].is_finite() {
                                        row[j] -= s * smoothing / n;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

/// Gradient buffer of an input, created on first use; `None` for inputs
/// that cannot reach a `requires_grad` leaf.
fn slot<'a>(grads: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> Option<&'a mut Vec<f64>> {
    if !nodes[v.0].tracked {
        return None;
    }
    let n = nodes[v.0].value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
}

fn axpy(dst: &mut [f64], a: f64, src: &[f64]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d += a * s;
    }
}

pub(crate) fn softmax_in_place(row: &mut [f64]) -> Result<()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(Error::invalid("softmax over a fully masked row"));
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// `c[m,n] = beta * c + a[m,k] * b[k,n]` with arbitrary element strides on
/// `a` and `b`; `c` is dense row-major.
#[allow(clippy::too_many_arguments)]
pub(crate) fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (isize, isize),
    b: &[f64],
    (rsb, csb): (isize, isize),
    c: &mut [f64],
    beta: f64,
) {
    let extent =
        |rows: usize, cols: usize, rs: isize, cs: isize| (rows as isize - 1) * rs + (cols as isize - 1) * cs + 1;
    assert!(m > 0 && k > 0 && n > 0);
    assert!(extent(m, k, rsa, csa) as usize <= a.len());
    assert!(extent(k, n, rsb, csb) as usize <= b.len());
    assert!(m * n <= c.len());
    // SAFETY: the asserts above bound every strided access inside the slices.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Each forward op appends one node holding its output value and whatever it
//! needs for the vector-Jacobian product. Nodes only reference earlier nodes,
//! so the recording order is a topological order and `backward` simply walks
//! it in reverse. Gradient accumulation order is therefore fixed.

use rand::Rng;

use super::kernels::{self, ConvGeom};
use super::Tensor;
use crate::error::{config_err, shape_err, Error, Result};
use crate::rng;

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
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    AddConst(Var),
    MulConst(Var, Vec<f64>),
    Scale(Var, f64),
    Relu(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    Embedding { table: Var, ids: Vec<usize> },
    Dropout(Var, Vec<f64>),
    Conv2d { input: Var, kernel: Var, bias: Var, geom: ConvGeom },
    SliceCols { x: Var, start: usize },
    ConcatCols(Vec<Var>),
    Stack(Vec<Var>),
    SelectAxis0 { x: Var, indices: Vec<usize> },
    Reshape(Var),
    RenormRows { x: Var, sums: Vec<f64>, keep: Option<Vec<bool>> },
    Sum(Var),
    SmoothedCe { logits: Var, targets: Vec<usize>, eps: f64, norm: f64, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by leaf [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradient of `v`, or zeros of `shape` if nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Row-wise view `[rows, n]` of a tensor over its last axis.
fn rows_of(t: &Tensor) -> (usize, usize) {
    let n = t.last_dim();
    (t.numel() / n, n)
}

fn matrix_dims(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(shape_err!("{what} expects a matrix, got shape {s:?}")),
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t, true)
    }

    /// Non-trainable leaf (inputs, fixed weights).
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.leaf(t, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, name: &str, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        value.ensure_finite(name)?;
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    // ----- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul")?;
        let (k2, n) = matrix_dims(self.value(b), "matmul")?;
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: [{m},{k}] x [{k2},{n}]"));
        }
        let c = kernels::matmul(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], c)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = matrix_dims(self.value(a), "matmul_nt")?;
        let (n, k2) = matrix_dims(self.value(b), "matmul_nt")?;
        if k != k2 {
            return Err(shape_err!("matmul_nt inner extents differ: [{m},{k}] x [{n},{k2}]^T"));
        }
        let c = kernels::matmul_nt(self.value(a).data(), self.value(b).data(), m, k, n);
        self.push("matmul_nt", Tensor::new(vec![m, n], c)?, Op::MatMulNt(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(a), "transpose")?;
        let t = kernels::transpose(self.value(a).data(), r, c);
        self.push("transpose", Tensor::new(vec![c, r], t)?, Op::Transpose(a), &[a])
    }

    // ----- elementwise ----------------------------------------------------

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err!("add of {:?} and {:?}", ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `x[..., n] + bias[n]`, broadcast over every row.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.last_dim();
        if tb.numel() != n {
            return Err(shape_err!("bias of {} values for rows of width {n}", tb.numel()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_row_bias", out, Op::AddRowBias(x, bias), &[x, bias])
    }

    /// Adds a constant tensor; the gradient passes straight through to `x`.
    pub fn add_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err!("add_const of {:?} and {:?}", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a + b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("add_const", out, Op::AddConst(x), &[x])
    }

    /// Elementwise product with a constant tensor of the same shape.
    pub fn mul_const(&mut self, x: Var, c: &Tensor) -> Result<Var> {
        let tx = self.value(x);
        if tx.shape() != c.shape() {
            return Err(shape_err!("mul_const of {:?} and {:?}", tx.shape(), c.shape()));
        }
        let data = tx.data().iter().zip(c.data()).map(|(a, b)| a * b).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("mul_const", out, Op::MulConst(x, c.data().to_vec()), &[x])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x, s), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.max(0.0));
        self.push("relu", out, Op::Relu(x), &[x])
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        for row in out.data_mut().chunks_mut(n) {
            softmax_in_place(row);
        }
        self.push("softmax_rows", out, Op::Softmax(x), &[x])
    }

    /// Normalizes each last-axis row to zero mean and unit (population)
    /// variance, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(config_err!("layer_norm eps must be positive, got {eps}"));
        }
        let tx = self.value(x);
        let (rows, n) = rows_of(tx);
        let (tg, tb) = (self.value(gain), self.value(bias));
        if tg.numel() != n || tb.numel() != n {
            return Err(shape_err!("layer_norm affine params must have {n} values"));
        }
        let mut xhat = vec![0.0; rows * n];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * n];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..n {
                let h = (row[j] - mean) * inv;
                xhat[r * n + j] = h;
                out[r * n + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), out)?;
        self.push("layer_norm", out, Op::LayerNorm { x, gain, bias, xhat, inv_std }, &[x, gain, bias])
    }

    /// Gathers rows of `table[vocab, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (vocab, d) = matrix_dims(tt, "embedding")?;
        if ids.is_empty() {
            return Err(shape_err!("embedding lookup of an empty sequence"));
        }
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Usage(format!("token id {id} out of range for vocab {vocab}")));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        self.push("embedding", out, Op::Embedding { table, ids: ids.to_vec() }, &[table])
    }

    /// Inverted dropout. In train mode each element is zeroed with
    /// probability `p` and survivors are scaled by `1/(1-p)`; the mask is
    /// drawn from `rng::stream(seed, stream)`. Eval mode (or `p == 0`) is the identity.
    pub fn dropout(&mut self, x: Var, p: f64, seed: u64, stream: u64, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(config_err!("dropout probability must be in [0, 1), got {p}"));
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let mut gen = rng::stream(seed, stream);
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(x).numel())
            .map(|_| if gen.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let tx = self.value(x);
        let data = tx.data().iter().zip(&mask).map(|(a, m)| a * m).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push("dropout", out, Op::Dropout(x, mask), &[x])
    }

    // ----- convolution ----------------------------------------------------

    /// Grouped 2-D cross-correlation, stride 1, SAME zero padding.
    ///
    /// `input: [C_in, H, W]`, `kernel: [C_out, C_in/groups, kh, kw]`, `bias: [C_out]`.
    pub fn conv2d(&mut self, input: Var, kernel: Var, bias: Var, groups: usize) -> Result<Var> {
        let (ti, tk, tb) = (self.value(input), self.value(kernel), self.value(bias));
        let &[c_in, h, w] = ti.shape() else {
            return Err(shape_err!("conv2d input must be [C, H, W], got {:?}", ti.shape()));
        };
        let &[c_out, ipg, kh, kw] = tk.shape() else {
            return Err(shape_err!("conv2d kernel must be rank 4, got {:?}", tk.shape()));
        };
        if groups == 0 || c_in % groups != 0 || c_out % groups != 0 {
            return Err(config_err!(
                "conv2d channels ({c_in} in, {c_out} out) not divisible by {groups} groups"
            ));
        }
        if kh % 2 == 0 || kw % 2 == 0 {
            return Err(config_err!("conv2d kernel extents must be odd, got {kh}x{kw}"));
        }
        if ipg != c_in / groups {
            return Err(shape_err!(
                "conv2d kernel expects {ipg} inputs per group, input gives {}",
                c_in / groups
            ));
        }
        if tb.numel() != c_out {
            return Err(shape_err!("conv2d bias has {} values for {c_out} outputs", tb.numel()));
        }
        let geom = ConvGeom { c_in, c_out, groups, h, w, kh, kw };
        let out = kernels::conv2d_forward(ti.data(), tk.data(), tb.data(), &geom);
        let out = Tensor::new(vec![c_out, h, w], out)?;
        self.push("conv2d", out, Op::Conv2d { input, kernel, bias, geom }, &[input, kernel, bias])
    }

    // ----- structural -----------------------------------------------------

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = matrix_dims(self.value(x), "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err!("column slice {start}..{} of width {c}", start + len));
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let out = Tensor::new(vec![r, len], data)?;
        self.push("slice_cols", out, Op::SliceCols { x, start }, &[x])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(shape_err!("concat_cols of zero matrices"));
        }
        let mut rows = None;
        let mut total = 0;
        for &p in parts {
            let (r, c) = matrix_dims(self.value(p), "concat_cols")?;
            if *rows.get_or_insert(r) != r {
                return Err(shape_err!("concat_cols row counts differ"));
            }
            total += c;
        }
        let rows = rows.unwrap_or(0);
        let mut data = Vec::with_capacity(rows * total);
        for i in 0..rows {
            for &p in parts {
                let t = self.value(p);
                let c = t.shape()[1];
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
        }
        let out = Tensor::new(vec![rows, total], data)?;
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    /// Stacks equally shaped tensors along a new leading axis.
    pub fn stack(&mut self, parts: &[Var]) -> Result<Var> {
        let values: Vec<Tensor> = parts.iter().map(|&p| self.value(p).clone()).collect();
        let out = Tensor::stack(&values)?;
        self.push("stack", out, Op::Stack(parts.to_vec()), parts)
    }

    /// Gathers entries of axis 0 (with repetition allowed), keeping the rank.
    pub fn select_axis0(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let lead = tx.shape()[0];
        if indices.is_empty() || indices.iter().any(|&i| i >= lead) {
            return Err(shape_err!("axis-0 selection {indices:?} out of range for extent {lead}"));
        }
        let inner: usize = tx.numel() / lead;
        let mut data = Vec::with_capacity(indices.len() * inner);
        for &i in indices {
            data.extend_from_slice(&tx.data()[i * inner..(i + 1) * inner]);
        }
        let mut shape = tx.shape().to_vec();
        shape[0] = indices.len();
        let out = Tensor::new(shape, data)?;
        self.push("select_axis0", out, Op::SelectAxis0 { x, indices: indices.to_vec() }, &[x])
    }

    /// Single entry of axis 0 with that axis dropped, e.g. map `i` of a stack.
    pub fn index_axis0(&mut self, x: Var, index: usize) -> Result<Var> {
        let sel = self.select_axis0(x, &[index])?;
        let shape = self.shape(sel)[1..].to_vec();
        if shape.is_empty() {
            return Ok(sel);
        }
        self.reshape(sel, &shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Clamps each last-axis row at zero and rescales it to sum to one.
    /// Rows whose clamped mass is below `1e-12` become uniform.
    pub fn renormalize_rows(&mut self, x: Var) -> Result<Var> {
        self.renormalize(x, None)
    }

    /// Like [`Tape::renormalize_rows`] but entries where `keep` is zero are
    /// forced to zero and never receive mass, including in the uniform
    /// fallback.
    pub fn renormalize_rows_within(&mut self, x: Var, keep: &Tensor) -> Result<Var> {
        if keep.shape() != self.shape(x) {
            return Err(shape_err!("keep mask {:?} does not match {:?}", keep.shape(), self.shape(x)));
        }
        self.renormalize(x, Some(keep.data().iter().map(|&k| k != 0.0).collect()))
    }

    fn renormalize(&mut self, x: Var, keep: Option<Vec<bool>>) -> Result<Var> {
        let mut out = self.value(x).clone();
        let n = out.last_dim();
        let mut sums = Vec::with_capacity(out.numel() / n);
        for (r, row) in out.data_mut().chunks_mut(n).enumerate() {
            let kept = |j: usize| keep.as_ref().map_or(true, |k| k[r * n + j]);
            let s: f64 = row.iter().enumerate().filter(|&(j, _)| kept(j)).map(|(_, v)| v.max(0.0)).sum();
            if s < RENORM_FLOOR {
                let count = (0..n).filter(|&j| kept(j)).count().max(1);
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if kept(j) { 1.0 / count as f64 } else { 0.0 };
                }
            } else {
                for (j, v) in row.iter_mut().enumerate() {
                    *v = if kept(j) { v.max(0.0) / s } else { 0.0 };
                }
            }
            sums.push(s);
        }
        self.push("renormalize_rows", out, Op::RenormRows { x, sums, keep }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).sum();
        self.push("sum", Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Label-smoothed cross entropy summed over rows of `logits[N, V]`
    /// and divided by `norm`. Target distribution is `(1-eps)·onehot + eps/V`.
    pub fn smoothed_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        norm: f64,
    ) -> Result<Var> {
        let tl = self.value(logits);
        let (n, v) = matrix_dims(tl, "smoothed_cross_entropy")?;
        if targets.len() != n {
            return Err(shape_err!("{} targets for {n} rows of logits", targets.len()));
        }
        if !(0.0..1.0).contains(&eps) {
            return Err(config_err!("label smoothing must be in [0, 1), got {eps}"));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Usage(format!("target id {bad} out of range for vocab {v}")));
        }
        let mut probs = tl.data().to_vec();
        let mut loss = 0.0;
        for (row, &t) in probs.chunks_mut(v).zip(targets) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            let mean_logp = row.iter().map(|x| x - lse).sum::<f64>() / v as f64;
            loss += -(1.0 - eps) * (row[t] - lse) - eps * mean_logp;
            for x in row.iter_mut() {
                *x = (*x - lse).exp();
            }
        }
        let out = Tensor::scalar(loss / norm);
        let op = Op::SmoothedCe { logits, targets: targets.to_vec(), eps, norm, probs };
        self.push("smoothed_cross_entropy", out, op, &[logits])
    }

    // ----- reverse pass ---------------------------------------------------

    /// Gradients of the scalar `loss` with respect to every node that
    /// requires them. Only leaf gradients are retained in the result.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn send(&self, grads: &mut [Option<Tensor>], to: Var, g: Tensor) {
        if !self.nodes[to.0].requires_grad {
            return;
        }
        match &mut grads[to.0] {
            Some(acc) => acc.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), data).expect("gradient shape mirrors value")
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = matrix_dims(self.value(*a), "matmul")?;
                let n = self.shape(*b)[1];
                if self.requires_grad(*a) {
                    let da = kernels::matmul_nt(gd, self.value(*b).data(), m, n, k);
                    self.send(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(self.value(*a).data(), gd, m, k, n);
                    self.send(grads, *b, self.like(*b, db));
                }
            }
            Op::MatMulNt(a, b) => {
                let (m, k) = matrix_dims(self.value(*a), "matmul_nt")?;
                let n = self.shape(*b)[0];
                if self.requires_grad(*a) {
                    let da = kernels::matmul(gd, self.value(*b).data(), m, n, k);
                    self.send(grads, *a, self.like(*a, da));
                }
                if self.requires_grad(*b) {
                    let db = kernels::matmul_tn(gd, self.value(*a).data(), m, n, k);
                    self.send(grads, *b, self.like(*b, db));
                }
            }
            Op::Transpose(a) => {
                let (r, c) = matrix_dims(self.value(*a), "transpose")?;
                self.send(grads, *a, self.like(*a, kernels::transpose(gd, c, r)));
            }
            Op::Add(a, b) => {
                self.send(grads, *a, g.clone());
                self.send(grads, *b, g.clone());
            }
            Op::AddRowBias(x, bias) => {
                self.send(grads, *x, g.clone());
                if self.requires_grad(*bias) {
                    let n = g.last_dim();
                    let mut db = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.send(grads, *bias, self.like(*bias, db));
                }
            }
            Op::AddConst(x) => self.send(grads, *x, g.clone()),
            Op::MulConst(x, c) | Op::Dropout(x, c) => {
                let dx = gd.iter().zip(c).map(|(a, b)| a * b).collect();
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Scale(x, s) => self.send(grads, *x, g.map(|v| v * s)),
            Op::Relu(x) => {
                let xin = self.value(*x).data();
                let dx = gd.iter().zip(xin).map(|(gv, xv)| if *xv > 0.0 { *gv } else { 0.0 }).collect();
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Softmax(x) => {
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for ((dr, yr), gr) in dx.chunks_mut(n).zip(y.chunks(n)).zip(gd.chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        dr[j] = yr[j] * (gr[j] - dot);
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let n = node.value.last_dim();
                let gain_v = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, inv) in inv_std.iter().enumerate() {
                        let range = r * n..(r + 1) * n;
                        let (gr, hr) = (&gd[range.clone()], &xhat[range.clone()]);
                        let dh: Vec<f64> = gr.iter().zip(gain_v).map(|(a, b)| a * b).collect();
                        let sum_dh: f64 = dh.iter().sum();
                        let sum_dh_h: f64 = dh.iter().zip(hr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[r * n + j] =
                                inv / n as f64 * (n as f64 * dh[j] - sum_dh - hr[j] * sum_dh_h);
                        }
                    }
                    self.send(grads, *x, self.like(*x, dx));
                }
                if self.requires_grad(*gain) || self.requires_grad(*bias) {
                    let mut dg = vec![0.0; n];
                    let mut db = vec![0.0; n];
                    for (gr, hr) in gd.chunks(n).zip(xhat.chunks(n)) {
                        for j in 0..n {
                            dg[j] += gr[j] * hr[j];
                            db[j] += gr[j];
                        }
                    }
                    self.send(grads, *gain, self.like(*gain, dg));
                    self.send(grads, *bias, self.like(*bias, db));
                }
            }
            Op::Embedding { table, ids } => {
                let d = self.shape(*table)[1];
                let mut dt = vec![0.0; self.value(*table).numel()];
                for (row, &id) in gd.chunks(d).zip(ids) {
                    for (a, b) in dt[id * d..(id + 1) * d].iter_mut().zip(row) {
                        *a += b;
                    }
                }
                self.send(grads, *table, self.like(*table, dt));
            }
            Op::Conv2d { input, kernel, bias, geom } => {
                let (di, dk, db) = kernels::conv2d_backward(
                    gd,
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    geom,
                );
                self.send(grads, *input, self.like(*input, di));
                self.send(grads, *kernel, self.like(*kernel, dk));
                self.send(grads, *bias, self.like(*bias, db));
            }
            Op::SliceCols { x, start } => {
                let (r, c) = matrix_dims(self.value(*x), "slice_cols")?;
                let len = g.shape()[1];
                let mut dx = vec![0.0; r * c];
                for i in 0..r {
                    dx[i * c + start..i * c + start + len].copy_from_slice(&gd[i * len..(i + 1) * len]);
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::ConcatCols(parts) => {
                let rows = g.shape()[0];
                let total = g.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let c = self.shape(p)[1];
                    if self.requires_grad(p) {
                        let mut dp = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            dp.extend_from_slice(&gd[i * total + offset..i * total + offset + c]);
                        }
                        self.send(grads, p, self.like(p, dp));
                    }
                    offset += c;
                }
            }
            Op::Stack(parts) => {
                let inner = g.numel() / parts.len();
                for (i, &p) in parts.iter().enumerate() {
                    if self.requires_grad(p) {
                        self.send(grads, p, self.like(p, gd[i * inner..(i + 1) * inner].to_vec()));
                    }
                }
            }
            Op::SelectAxis0 { x, indices } => {
                let inner = g.numel() / indices.len();
                let mut dx = vec![0.0; self.value(*x).numel()];
                for (k, &i) in indices.iter().enumerate() {
                    for (a, b) in dx[i * inner..(i + 1) * inner].iter_mut().zip(&gd[k * inner..(k + 1) * inner]) {
                        *a += b;
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Reshape(x) => self.send(grads, *x, self.like(*x, gd.to_vec())),
            Op::RenormRows { x, sums, keep } => {
                let xin = self.value(*x).data();
                let y = node.value.data();
                let n = node.value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, &s) in sums.iter().enumerate() {
                    if s < RENORM_FLOOR {
                        continue;
                    }
                    let range = r * n..(r + 1) * n;
                    let (gr, yr, xr) = (&gd[range.clone()], &y[range.clone()], &xin[range.clone()]);
                    let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                    for j in 0..n {
                        let kept = keep.as_ref().map_or(true, |k| k[r * n + j]);
                        if kept && xr[j] > 0.0 {
                            dx[r * n + j] = (gr[j] - dot) / s;
                        }
                    }
                }
                self.send(grads, *x, self.like(*x, dx));
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.send(grads, *x, self.like(*x, vec![gd[0]; n]));
            }
            Op::SmoothedCe { logits, targets, eps, norm, probs } => {
                let v = self.shape(*logits)[1];
                let scale = gd[0] / norm;
                let mut dl = probs.clone();
                for (row, &t) in dl.chunks_mut(v).zip(targets) {
                    for (j, x) in row.iter_mut().enumerate() {
                        let q = eps / v as f64 + if j == t { 1.0 - eps } else { 0.0 };
                        *x = (*x - q) * scale;
                    }
                }
                self.send(grads, *logits, self.like(*logits, dl));
            }
        }
        Ok(())
    }
}

/// Row-mass floor below which [`Tape::renormalize_rows`] falls back to uniform.
pub const RENORM_FLOOR: f64 = 1e-12;

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v /= sum;
    }
}

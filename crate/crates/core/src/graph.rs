//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation appends a node holding its forward value and the inputs it
//! read. Nodes are created in dependency order, so the tape itself is a
//! topological order and [`Graph::backward`] is a single reverse sweep.

use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_strided, Tensor};

/// Handle to a node on a [`Graph`].
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f32),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        /// Per-row (mean, 1/std).
        stats: Vec<(f32, f32)>,
    },
    Gelu(Var),
    Softmax {
        x: Var,
        axis: usize,
    },
    Attention {
        qkv: Var,
        heads: usize,
        segments: Vec<usize>,
        /// Attention probabilities, per segment then per head, `len × len` each.
        probs: Vec<f32>,
    },
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    BroadcastRow(Var),
    MeanSegments(Var, Vec<usize>),
    NormalizeRows {
        x: Var,
        norms: Vec<f32>,
    },
    LogSumExpRows(Var),
    PickRows(Var, Vec<usize>),
    MseConst(Var, Vec<f32>),
    Sum(Var),
    Mean(Var),
}

struct Node {
    value: Tensor,
    grad: Option<Vec<f32>>,
    requires_grad: bool,
    op: Op,
}

/// A gradient tape. One graph per forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn as_matrix(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.last_dim())
}

fn erf(x: f32) -> f32 {
    libm::erff(x)
}

const INV_SQRT_2: f32 = std::f32::consts::FRAC_1_SQRT_2;
const INV_SQRT_2PI: f32 = 0.398_942_3;

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

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Adds a leaf. Gradients are only accumulated for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
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

    pub fn grad(&self, v: Var) -> Option<&[f32]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Vec<f32>> {
        self.nodes[v.0].grad.take()
    }

    // ---- elementwise -------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_with(&self, a: Var, b: Var, f: impl Fn(f32, f32) -> f32) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(va.shape().to_vec(), data).expect("shape preserved")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Adds a length-`D` vector to every row of `x[..., D]`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        if self.value(row).numel() != d {
            return Err(Error::dim("add_row", self.shape(x), self.shape(row)));
        }
        let r = self.value(row).data().to_vec();
        let mut out = self.value(x).clone();
        for chunk in out.data_mut().chunks_mut(d) {
            chunk.iter_mut().zip(&r).for_each(|(o, b)| *o += b);
        }
        Ok(self.push(out, Op::AddRow(x, row), &[x, row]))
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut().iter_mut().for_each(|v| *v *= c);
        self.push(out, Op::Scale(x, c), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::dim("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
        );
        let out = Tensor::new(vec![m, n], out)?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::dim("transpose", s, &[2]));
        }
        let (m, n) = (s[0], s[1]);
        let src = self.value(x).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let out = Tensor::new(vec![n, m], out)?;
        Ok(self.push(out, Op::Transpose(x), &[x]))
    }

    /// `x[rows, in] · w[in, out] + b[out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_row(y, b),
            None => Ok(y),
        }
    }

    // ---- normalisation and activations --------------------------------

    /// Normalises each vector along the last axis, then applies `gamma ⊙ · + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f32) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::Parameter(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let d = self.value(x).last_dim();
        if self.value(gamma).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(gamma)));
        }
        if self.value(beta).numel() != d {
            return Err(Error::dim("layer_norm", self.shape(x), self.shape(beta)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut out = self.value(x).clone();
        let mut stats = Vec::with_capacity(out.rows());
        for row in out.data_mut().chunks_mut(d) {
            let mean = row.iter().sum::<f32>() / d as f32;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f32>() / d as f32;
            let rstd = 1.0 / (var + eps).sqrt();
            for (j, v) in row.iter_mut().enumerate() {
                *v = (*v - mean) * rstd * g[j] + b[j];
            }
            stats.push((mean, rstd));
        }
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            },
            &[x, gamma, beta],
        ))
    }

    /// GELU with the exact Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        out.data_mut()
            .iter_mut()
            .for_each(|v| *v = 0.5 * *v * (1.0 + erf(*v * INV_SQRT_2)));
        self.push(out, Op::Gelu(x), &[x])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::dim("softmax", &shape, &[axis]));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = self.value(x).clone();
        let data = out.data_mut();
        for o in 0..outer {
            for j in 0..inner {
                let idx = |i: usize| (o * len + i) * inner + j;
                let max = (0..len)
                    .map(|i| data[idx(i)])
                    .fold(f32::NEG_INFINITY, f32::max);
                let mut sum = 0.0;
                for i in 0..len {
                    let e = (data[idx(i)] - max).exp();
                    data[idx(i)] = e;
                    sum += e;
                }
                for i in 0..len {
                    data[idx(i)] /= sum;
                }
            }
        }
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    /// Multi-head scaled dot-product self-attention.
    ///
    /// `qkv` is `[rows, 3·D]` holding query, key and value projections side by
    /// side. Rows are split into independent sequences of the given lengths;
    /// tokens only attend within their own sequence. Output is `[rows, D]`.
    pub fn attention(&mut self, qkv: Var, heads: usize, segments: &[usize]) -> Result<Var> {
        let (rows, width) = as_matrix(self.value(qkv));
        if heads == 0 || width % (3 * heads) != 0 {
            return Err(Error::Config(format!(
                "attention width {width} is not divisible by 3·heads ({heads})"
            )));
        }
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) {
            return Err(Error::dim("attention", &[rows], segments));
        }
        let d = width / 3;
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let src = self.value(qkv).data();
        let mut out = vec![0.0; rows * d];
        let mut probs = Vec::with_capacity(segments.iter().map(|l| l * l * heads).sum());
        let mut start = 0;
        let mut tmp = Vec::new();
        for &len in segments {
            for h in 0..heads {
                let q = &src[start * width + h * dh..];
                let k = &src[start * width + d + h * dh..];
                let v = &src[start * width + 2 * d + h * dh..];
                let mut p = vec![0.0; len * len];
                // scores = q kᵀ
                gemm_strided(
                    len,
                    dh,
                    len,
                    q,
                    (width as isize, 1),
                    k,
                    (1, width as isize),
                    &mut p,
                    0.0,
                );
                for row in p.chunks_mut(len) {
                    let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                    let mut sum = 0.0;
                    for s in row.iter_mut() {
                        *s = ((*s - max) * scale).exp();
                        sum += *s;
                    }
                    row.iter_mut().for_each(|s| *s /= sum);
                }
                tmp.clear();
                tmp.resize(len * dh, 0.0);
                gemm_strided(
                    len,
                    len,
                    dh,
                    &p,
                    (len as isize, 1),
                    v,
                    (width as isize, 1),
                    &mut tmp,
                    0.0,
                );
                for i in 0..len {
                    out[(start + i) * d + h * dh..(start + i) * d + (h + 1) * dh]
                        .copy_from_slice(&tmp[i * dh..(i + 1) * dh]);
                }
                probs.extend_from_slice(&p);
            }
            start += len;
        }
        let out = Tensor::new(vec![rows, d], out)?;
        Ok(self.push(
            out,
            Op::Attention {
                qkv,
                heads,
                segments: segments.to_vec(),
                probs,
            },
            &[qkv],
        ))
    }

    // ---- structural --------------------------------------------------

    /// Stacks `[r_i, D]` matrices along the first axis.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::Contract("concat_rows needs at least one input".into()))?;
        let d = self.value(first).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            if self.value(p).last_dim() != d {
                return Err(Error::dim("concat_rows", self.shape(first), self.shape(p)));
            }
            data.extend_from_slice(self.value(p).data());
        }
        let rows = data.len() / d;
        let out = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = as_matrix(self.value(x));
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::dim("gather_rows", &[rows, d], &[bad]));
        }
        if idx.is_empty() {
            return Err(Error::Contract("gather_rows with no indices".into()));
        }
        let src = self.value(x);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            data.extend_from_slice(src.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        Ok(self.push(out, Op::GatherRows(x, idx.to_vec()), &[x]))
    }

    /// Repeats a length-`D` vector into an `n × D` matrix.
    pub fn broadcast_row(&mut self, row: Var, n: usize) -> Result<Var> {
        let r = self.value(row).data().to_vec();
        let d = r.len();
        let out = Tensor::new(vec![n, d], r.repeat(n))?;
        Ok(self.push(out, Op::BroadcastRow(row), &[row]))
    }

    /// Mean over consecutive row groups: `[Σ len, D] → [segments, D]`.
    pub fn mean_segments(&mut self, x: Var, segments: &[usize]) -> Result<Var> {
        let (rows, d) = as_matrix(self.value(x));
        if segments.iter().sum::<usize>() != rows || segments.contains(&0) || segments.is_empty() {
            return Err(Error::dim("mean_segments", &[rows, d], segments));
        }
        let src = self.value(x).data();
        let mut out = vec![0.0; segments.len() * d];
        let mut start = 0;
        for (s, &len) in segments.iter().enumerate() {
            let acc = &mut out[s * d..(s + 1) * d];
            for r in start..start + len {
                acc.iter_mut()
                    .zip(&src[r * d..(r + 1) * d])
                    .for_each(|(a, v)| *a += v);
            }
            acc.iter_mut().for_each(|a| *a /= len as f32);
            start += len;
        }
        let out = Tensor::new(vec![segments.len(), d], out)?;
        Ok(self.push(out, Op::MeanSegments(x, segments.to_vec()), &[x]))
    }

    /// Scales every row to unit L2 norm. A zero row is a degenerate input.
    pub fn normalize_rows(&mut self, x: Var) -> Result<Var> {
        let d = self.value(x).last_dim();
        let mut out = self.value(x).clone();
        let mut norms = Vec::with_capacity(out.rows());
        for (i, row) in out.data_mut().chunks_mut(d).enumerate() {
            let n = row.iter().map(|v| v * v).sum::<f32>().sqrt();
            if !(n > f32::MIN_POSITIVE) {
                return Err(Error::Degenerate(format!("row {i} has zero norm")));
            }
            row.iter_mut().for_each(|v| *v /= n);
            norms.push(n);
        }
        Ok(self.push(out, Op::NormalizeRows { x, norms }, &[x]))
    }

    /// Row-wise `log Σ_j exp(x_ij)`: `[rows, n] → [rows]`.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let d = src.last_dim();
        let data: Vec<f32> = src
            .data()
            .chunks(d)
            .map(|row| {
                let max = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                max + row.iter().map(|v| (v - max).exp()).sum::<f32>().ln()
            })
            .collect();
        let n = data.len();
        let out = Tensor::new(vec![n], data).expect("non-empty");
        self.push(out, Op::LogSumExpRows(x), &[x])
    }

    /// Picks one element per row: `out[i] = x[i, idx[i]]`.
    pub fn pick_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (rows, d) = as_matrix(self.value(x));
        if idx.len() != rows || idx.iter().any(|&j| j >= d) {
            return Err(Error::dim("pick_rows", &[rows, d], &[idx.len()]));
        }
        let src = self.value(x).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(i, &j)| src[i * d + j])
            .collect();
        let out = Tensor::new(vec![rows], data)?;
        Ok(self.push(out, Op::PickRows(x, idx.to_vec()), &[x]))
    }

    /// Mean squared error against a constant target.
    pub fn mse_const(&mut self, x: Var, target: &Tensor) -> Result<Var> {
        if self.value(x).numel() != target.numel() {
            return Err(Error::dim("mse", self.shape(x), target.shape()));
        }
        let n = target.numel() as f32;
        let loss = self
            .value(x)
            .data()
            .iter()
            .zip(target.data())
            .map(|(p, t)| (p - t) * (p - t))
            .sum::<f32>()
            / n;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MseConst(x, target.data().to_vec()),
            &[x],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f32>() / t.numel() as f32;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    // ---- backward ----------------------------------------------------

    fn accumulate(&mut self, v: Var, contrib: Vec<f32>) {
        let node = &mut self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut node.grad {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, c)| *a += c),
            None => node.grad = Some(contrib),
        }
    }

    /// Populates gradients of every node that depends on a `requires_grad`
    /// leaf with `d root / d node`. The root must be a scalar.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(root)
            )));
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        self.nodes[root.0].grad = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            let Some(g) = self.nodes[i].grad.take() else {
                continue;
            };
            if !matches!(self.nodes[i].op, Op::Leaf) {
                self.backprop_node(i, &g);
            }
            self.nodes[i].grad = Some(g);
        }
        Ok(())
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backprop_node(&mut self, i: usize, g: &[f32]) {
        // Temporarily move the op out so input values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(*a, g.to_vec());
                self.accumulate(*b, g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let da = g
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(g, y)| g * y)
                    .collect();
                let db = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(g, x)| g * x)
                    .collect();
                self.accumulate(*a, da);
                self.accumulate(*b, db);
            }
            Op::AddRow(x, row) => {
                self.accumulate(*x, g.to_vec());
                if self.needs(*row) {
                    let d = self.value(*row).numel();
                    let mut db = vec![0.0; d];
                    for chunk in g.chunks(d) {
                        db.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                    }
                    self.accumulate(*row, db);
                }
            }
            Op::Scale(x, c) => self.accumulate(*x, g.iter().map(|v| v * c).collect()),
            Op::Reshape(x) => self.accumulate(*x, g.to_vec()),
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.value(*a));
                let n = self.value(*b).last_dim();
                if self.needs(*a) {
                    // da = g · bᵀ
                    let mut da = vec![0.0; m * k];
                    let bv = self.value(*b).data();
                    gemm_strided(
                        m,
                        n,
                        k,
                        g,
                        (n as isize, 1),
                        bv,
                        (1, n as isize),
                        &mut da,
                        0.0,
                    );
                    self.accumulate(*a, da);
                }
                if self.needs(*b) {
                    // db = aᵀ · g
                    let mut db = vec![0.0; k * n];
                    let av = self.value(*a).data();
                    gemm_strided(
                        k,
                        m,
                        n,
                        av,
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        &mut db,
                        0.0,
                    );
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose(x) => {
                let (m, n) = as_matrix(self.value(*x));
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        dx[i * n + j] = g[j * m + i];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                stats,
            } => {
                let d = self.value(*x).last_dim();
                let xs = self.value(*x).data();
                let gam = self.value(*gamma).data();
                let mut dx = vec![0.0; xs.len()];
                let mut dgamma = vec![0.0; d];
                let mut dbeta = vec![0.0; d];
                let mut dxhat = vec![0.0; d];
                for (r, &(mean, rstd)) in stats.iter().enumerate() {
                    let xr = &xs[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        dgamma[j] += gr[j] * xhat;
                        dbeta[j] += gr[j];
                        dxhat[j] = gr[j] * gam[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat;
                    }
                    let mean_dxhat = sum_dxhat / d as f32;
                    let mean_dxhat_xhat = sum_dxhat_xhat / d as f32;
                    for j in 0..d {
                        let xhat = (xr[j] - mean) * rstd;
                        dx[r * d + j] = rstd * (dxhat[j] - mean_dxhat - xhat * mean_dxhat_xhat);
                    }
                }
                self.accumulate(*x, dx);
                self.accumulate(*gamma, dgamma);
                self.accumulate(*beta, dbeta);
            }
            Op::Gelu(x) => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&v, &g)| {
                        let cdf = 0.5 * (1.0 + erf(v * INV_SQRT_2));
                        let pdf = INV_SQRT_2PI * (-0.5 * v * v).exp();
                        g * (cdf + v * pdf)
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let y = self.nodes[i].value.data();
                let (outer, len, inner) = axis_split(self.nodes[i].value.shape(), *axis);
                let mut dx = vec![0.0; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |k: usize| (o * len + k) * inner + j;
                        let dot: f32 = (0..len).map(|k| y[idx(k)] * g[idx(k)]).sum();
                        for k in 0..len {
                            dx[idx(k)] = y[idx(k)] * (g[idx(k)] - dot);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Attention {
                qkv,
                heads,
                segments,
                probs,
            } => {
                let dqkv = attention_backward(self.value(*qkv), *heads, segments, probs, g);
                self.accumulate(*qkv, dqkv);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    self.accumulate(p, g[offset..offset + n].to_vec());
                    offset += n;
                }
            }
            Op::GatherRows(x, idx) => {
                let (rows, d) = as_matrix(self.value(*x));
                let mut dx = vec![0.0; rows * d];
                for (k, &r) in idx.iter().enumerate() {
                    dx[r * d..(r + 1) * d]
                        .iter_mut()
                        .zip(&g[k * d..(k + 1) * d])
                        .for_each(|(a, c)| *a += c);
                }
                self.accumulate(*x, dx);
            }
            Op::BroadcastRow(row) => {
                let d = self.value(*row).numel();
                let mut dr = vec![0.0; d];
                for chunk in g.chunks(d) {
                    dr.iter_mut().zip(chunk).for_each(|(a, c)| *a += c);
                }
                self.accumulate(*row, dr);
            }
            Op::MeanSegments(x, segments) => {
                let (rows, d) = as_matrix(self.value(*x));
                let mut dx = vec![0.0; rows * d];
                let mut start = 0;
                for (s, &len) in segments.iter().enumerate() {
                    let gs = &g[s * d..(s + 1) * d];
                    for r in start..start + len {
                        dx[r * d..(r + 1) * d]
                            .iter_mut()
                            .zip(gs)
                            .for_each(|(a, c)| *a = c / len as f32);
                    }
                    start += len;
                }
                self.accumulate(*x, dx);
            }
            Op::NormalizeRows { x, norms } => {
                let y = self.nodes[i].value.data();
                let d = self.nodes[i].value.last_dim();
                let mut dx = vec![0.0; y.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let yr = &y[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot: f32 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for j in 0..d {
                        dx[r * d + j] = (gr[j] - yr[j] * dot) / n;
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LogSumExpRows(x) => {
                let xs = self.value(*x).data();
                let lse = self.nodes[i].value.data();
                let d = self.value(*x).last_dim();
                let mut dx = vec![0.0; xs.len()];
                for (r, (&l, &gr)) in lse.iter().zip(g).enumerate() {
                    for j in 0..d {
                        dx[r * d + j] = gr * (xs[r * d + j] - l).exp();
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::PickRows(x, idx) => {
                let (rows, d) = as_matrix(self.value(*x));
                let mut dx = vec![0.0; rows * d];
                for (r, &j) in idx.iter().enumerate() {
                    dx[r * d + j] = g[r];
                }
                self.accumulate(*x, dx);
            }
            Op::MseConst(x, target) => {
                let n = target.len() as f32;
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(target)
                    .map(|(p, t)| 2.0 * (p - t) / n * g[0])
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0] / n as f32; n]);
            }
        }
        self.nodes[i].op = op;
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn attention_backward(
    qkv: &Tensor,
    heads: usize,
    segments: &[usize],
    probs: &[f32],
    g: &[f32],
) -> Vec<f32> {
    let (_, width) = as_matrix(qkv);
    let d = width / 3;
    let dh = d / heads;
    let scale = 1.0 / (dh as f32).sqrt();
    let src = qkv.data();
    let mut dqkv = vec![0.0; src.len()];
    let mut start = 0;
    let mut p_off = 0;
    let mut dout = Vec::new();
    let mut dp = Vec::new();
    let mut tmp = Vec::new();
    for &len in segments {
        for h in 0..heads {
            let p = &probs[p_off..p_off + len * len];
            p_off += len * len;
            let base = start * width;
            let q = &src[base + h * dh..];
            let k = &src[base + d + h * dh..];
            let v = &src[base + 2 * d + h * dh..];
            // Upstream gradient for this head, densely packed.
            dout.clear();
            for i in 0..len {
                let r = (start + i) * d + h * dh;
                dout.extend_from_slice(&g[r..r + dh]);
            }
            // dV = Pᵀ · dO
            tmp.clear();
            tmp.resize(len * dh, 0.0);
            gemm_strided(
                len,
                len,
                dh,
                p,
                (1, len as isize),
                &dout,
                (dh as isize, 1),
                &mut tmp,
                0.0,
            );
            scatter_head(&mut dqkv, &tmp, start, width, 2 * d + h * dh, dh);
            // dP = dO · Vᵀ
            dp.clear();
            dp.resize(len * len, 0.0);
            gemm_strided(
                len,
                dh,
                len,
                &dout,
                (dh as isize, 1),
                v,
                (1, width as isize),
                &mut dp,
                0.0,
            );
            // dS = P ⊙ (dP − rowsum(P ⊙ dP)), folded with the score scale.
            for (prow, dprow) in p.chunks(len).zip(dp.chunks_mut(len)) {
                let dot: f32 = prow.iter().zip(dprow.iter()).map(|(a, b)| a * b).sum();
                for (ds, &pv) in dprow.iter_mut().zip(prow) {
                    *ds = pv * (*ds - dot) * scale;
                }
            }
            // dQ = dS · K
            tmp.clear();
            tmp.resize(len * dh, 0.0);
            gemm_strided(
                len,
                len,
                dh,
                &dp,
                (len as isize, 1),
                k,
                (width as isize, 1),
                &mut tmp,
                0.0,
            );
            scatter_head(&mut dqkv, &tmp, start, width, h * dh, dh);
            // dK = dSᵀ · Q
            tmp.clear();
            tmp.resize(len * dh, 0.0);
            gemm_strided(
                len,
                len,
                dh,
                &dp,
                (1, len as isize),
                q,
                (width as isize, 1),
                &mut tmp,
                0.0,
            );
            scatter_head(&mut dqkv, &tmp, start, width, d + h * dh, dh);
        }
        start += len;
    }
    dqkv
}

fn scatter_head(dst: &mut [f32], src: &[f32], start: usize, width: usize, col: usize, dh: usize) {
    for (i, chunk) in src.chunks(dh).enumerate() {
        let r = (start + i) * width + col;
        dst[r..r + dh].copy_from_slice(chunk);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f32]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_annihilation() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[2, 2], &[1., 0., 0., 1.]));
        let m = g.constant(t(&[2, 2], &[1., 2., 3., 4.]));
        let out = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(out).data(), &[1., 2., 3., 4.]);

        let a = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        let b = g.constant(t(&[2, 2], &[0., 0., 0., 1.]));
        let z = g.matmul(a, b).unwrap();
        assert!(g.value(z).data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn layer_norm_closed_form() {
        let mut g = Graph::new();
        let x = g.constant(t(&[3], &[1., 2., 3.]));
        let gamma = g.constant(Tensor::ones(&[3]));
        let beta = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gamma, beta, 1e-12).unwrap();
        let want = [-1.224_744_9, 0.0, 1.224_744_9];
        for (a, b) in g.value(y).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-5);
        }
        let c = g.constant(Tensor::full(&[4], 7.5));
        let gamma4 = g.constant(Tensor::ones(&[4]));
        let beta4 = g.constant(Tensor::zeros(&[4]));
        let y = g.layer_norm(c, gamma4, beta4, 1e-5).unwrap();
        assert!(g.value(y).data().iter().all(|&v| v == 0.0));
        assert!(matches!(
            g.layer_norm(x, gamma, beta, 0.0),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2], &[0., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(t(&[2], &[2f32.ln(), 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!((g.value(y).data()[0] - 2.0 / 3.0).abs() < 1e-6);
        assert!((g.value(y).data()[1] - 1.0 / 3.0).abs() < 1e-6);

        let x = g.constant(t(&[2], &[1000., 0.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).is_finite());
        assert!((g.value(y).data()[0] - 1.0).abs() < 1e-6);
        assert!(g.value(y).data()[1] < 1e-30);

        assert!(g.softmax(x, 1).is_err());
    }

    #[test]
    fn softmax_along_leading_axis() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 3], &[0., 1., 2., 0., 1., 2.]));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).data().iter().all(|&v| (v - 0.5).abs() < 1e-7));
    }

    #[test]
    fn backward_sum_and_fan_out() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., -2., 5.]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1., 1., 1.]);

        let mut g = Graph::new();
        let x = g.leaf(t(&[3], &[1., -2., 5.]), true);
        let xx = g.add(x, x).unwrap();
        let s = g.sum(xx);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2., 2., 2.]);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::ones(&[2]), true);
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut g = Graph::new();
        let a = g.leaf(Tensor::ones(&[2, 2]), false);
        let b = g.leaf(Tensor::ones(&[2, 2]), true);
        let y = g.matmul(a, b).unwrap();
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert!(g.grad(a).is_none());
        assert_eq!(g.grad(b).unwrap(), &[2., 2., 2., 2.]);
    }

    #[test]
    fn normalize_rejects_zero_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[2, 2], &[1., 0., 0., 0.]));
        assert!(matches!(g.normalize_rows(x), Err(Error::Degenerate(_))));
    }

    #[test]
    fn attention_single_token_passes_value_through() {
        let mut g = Graph::new();
        // D = 2, one head: q, k, v for one token.
        let qkv = g.constant(t(&[1, 6], &[0.3, -1., 2., 0.5, 7., -3.]));
        let y = g.attention(qkv, 1, &[1]).unwrap();
        assert_eq!(g.value(y).data(), &[7., -3.]);
    }
}

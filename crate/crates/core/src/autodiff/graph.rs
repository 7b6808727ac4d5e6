use std::fmt;

use serde::{Deserialize, Serialize};

use super::tensor::{gemm, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Mode {
    Train,
    Eval,
}

/// Differentiable operation whose forward value is computed by the caller.
///
/// `backward` returns one adjoint per input, each with the input's element
/// count. Inputs that do not require gradients may receive an empty vector.
pub trait CustomOp: fmt::Debug {
    fn name(&self) -> &'static str;

    fn backward(&self, inputs: &[&Tensor], output: &Tensor, grad_output: &[f64]) -> Vec<Vec<f64>>;
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
}

impl BatchNormState {
    pub const DEFAULT_MOMENTUM: f64 = 0.9;
    pub const DEFAULT_EPS: f64 = 1e-5;

    pub fn new(features: usize) -> Self {
        BatchNormState {
            running_mean: vec![0.0; features],
            running_var: vec![1.0; features],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
        }
    }

    pub fn features(&self) -> usize {
        self.running_mean.len()
    }

    /// Exponential moving average towards the statistics of one batch.
    pub fn update(&mut self, batch: &BatchStats) {
        let m = self.momentum;
        for (r, b) in self.running_mean.iter_mut().zip(&batch.mean) {
            *r = m * *r + (1.0 - m) * b;
        }
        for (r, b) in self.running_var.iter_mut().zip(&batch.var) {
            *r = m * *r + (1.0 - m) * b;
        }
    }
}

/// Per-feature mean and biased variance observed in a train-mode batch norm.
/// With grouped normalization these are averages over the groups.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias {
        input: Var,
        bias: Var,
    },
    MatMul(Var, Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Concat(Vec<Var>),
    ConcatCols(Vec<Var>),
    Reshape(Var),
    BatchNorm {
        input: Var,
        scale: Var,
        shift: Var,
        group: usize,
        train: bool,
        xhat: Vec<f64>,
        // one entry per (group, feature)
        inv_std: Vec<f64>,
    },
    MaxPool {
        input: Var,
        argmax: Vec<usize>,
    },
    Custom {
        inputs: Vec<Var>,
        op: Box<dyn CustomOp>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// Reverse-mode differentiation tape.
///
/// Nodes are appended in evaluation order, so the node list is a valid
/// topological order and `backward` is a single reverse sweep. The graph is
/// rebuilt for every forward pass.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl fmt::Debug for Graph {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Graph")
            .field("nodes", &self.nodes.len())
            .finish()
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn grad_tensor(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_parts(node.value.shape().to_vec(), g.clone()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|x| x * factor).collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Scale(a, factor), rg)
    }

    /// Adds a length-`n` bias to every row of an `m×n` matrix.
    pub fn add_bias(&mut self, input: Var, bias: Var) -> Result<Var> {
        let (ti, tb) = (self.value(input), self.value(bias));
        let (_, cols) = ti.dims2("add_bias")?;
        if tb.numel() != cols || tb.ndim() != 1 {
            return Err(mismatch("add_bias", ti, tb));
        }
        let mut data = ti.data().to_vec();
        for row in data.chunks_exact_mut(cols) {
            for (x, b) in row.iter_mut().zip(tb.data()) {
                *x += b;
            }
        }
        let out = Tensor::from_parts(ti.shape().to_vec(), data);
        let rg = self.rg(&[input, bias]);
        Ok(self.push(out, Op::AddBias { input, bias }, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = ta.dims2("matmul")?;
        let (k2, n) = tb.dims2("matmul")?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut data = vec![0.0; m * n];
        gemm(
            m,
            k,
            n,
            ta.data(),
            false,
            tb.data(),
            false,
            &mut data,
            false,
        );
        let out = Tensor::from_parts(vec![m, n], data);
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data()
                .iter()
                .map(|&x| if x > 0.0 { x } else { 0.0 })
                .collect(),
        );
        let rg = self.rg(&[a]);
        self.push(out, Op::Relu(a), rg)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let data: Vec<f64> = t.data().iter().map(|x| x.exp()).collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("exp".into()));
        }
        let out = Tensor::from_parts(t.shape().to_vec(), data);
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Exp(a), rg))
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.data().iter().any(|&x| x <= 0.0) {
            return Err(Error::NonFinite("log of a non-positive value".into()));
        }
        let out = Tensor::from_parts(
            t.shape().to_vec(),
            t.data().iter().map(|x| x.ln()).collect(),
        );
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Log(a), rg))
    }

    /// Reduces all elements to a scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push(Tensor::scalar(s), Op::Sum(a), rg)
    }

    /// Concatenates 1-D tensors.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.ndim() != 1 {
                return Err(mismatch("concat", self.value(parts[0]), t));
            }
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![data.len()], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::Concat(parts.to_vec()), rg))
    }

    /// Concatenates 2-D tensors with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::InvalidArgument("concat of zero tensors".into()));
        }
        let rows = self.value(parts[0]).dims2("concat_cols")?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.value(p).dims2("concat_cols")?;
            if r != rows {
                return Err(mismatch("concat_cols", self.value(parts[0]), self.value(p)));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![rows, total], data);
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let out = self.value(a).clone().reshaped(shape)?;
        let rg = self.rg(&[a]);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Batch normalization of a `rows×features` matrix followed by a learnable
    /// per-feature scale and shift.
    ///
    /// In train mode the statistics are taken over consecutive blocks of
    /// `group` rows (the whole batch when `group` is `None`) and returned so
    /// the caller can update `state`. Eval mode uses `state` only.
    pub fn batch_norm(
        &mut self,
        input: Var,
        scale: Var,
        shift: Var,
        state: &BatchNormState,
        mode: Mode,
        group: Option<usize>,
    ) -> Result<(Var, Option<BatchStats>)> {
        let t = self.value(input);
        let (rows, cols) = t.dims2("batch_norm")?;
        for p in [scale, shift] {
            let tp = self.value(p);
            if tp.ndim() != 1 || tp.numel() != cols {
                return Err(mismatch("batch_norm", t, tp));
            }
        }
        if state.features() != cols {
            return Err(Error::Shape {
                op: "batch_norm",
                lhs: t.shape().to_vec(),
                rhs: vec![state.features()],
            });
        }
        let group = group.unwrap_or(rows);
        if group == 0 || rows % group != 0 {
            return Err(Error::InvalidArgument(format!(
                "batch_norm group size {group} does not divide {rows} rows"
            )));
        }
        let x = t.data();
        let gamma = self.value(scale).data();
        let beta = self.value(shift).data();
        let eps = state.eps;
        let mut xhat = vec![0.0; rows * cols];
        let (inv_std, stats) = match mode {
            Mode::Train => {
                if group < 2 {
                    return Err(Error::InvalidArgument(
                        "batch_norm in train mode needs at least 2 rows per batch".into(),
                    ));
                }
                let n_groups = rows / group;
                let mut inv_std = vec![0.0; n_groups * cols];
                let mut mean_acc = vec![0.0; cols];
                let mut var_acc = vec![0.0; cols];
                let mut mean = vec![0.0; cols];
                let mut var = vec![0.0; cols];
                for g in 0..n_groups {
                    let block = &x[g * group * cols..(g + 1) * group * cols];
                    mean.iter_mut().for_each(|m| *m = 0.0);
                    var.iter_mut().for_each(|v| *v = 0.0);
                    for row in block.chunks_exact(cols) {
                        for (m, v) in mean.iter_mut().zip(row) {
                            *m += v;
                        }
                    }
                    mean.iter_mut().for_each(|m| *m /= group as f64);
                    for row in block.chunks_exact(cols) {
                        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
                            let d = v - m;
                            *s += d * d;
                        }
                    }
                    var.iter_mut().for_each(|v| *v /= group as f64);
                    let inv = &mut inv_std[g * cols..(g + 1) * cols];
                    for ((i, v), va) in inv.iter_mut().zip(&var).zip(var_acc.iter_mut()) {
                        *i = 1.0 / (v + eps).sqrt();
                        *va += v;
                    }
                    for (ma, m) in mean_acc.iter_mut().zip(&mean) {
                        *ma += m;
                    }
                    let out_block = &mut xhat[g * group * cols..(g + 1) * group * cols];
                    for (orow, row) in out_block
                        .chunks_exact_mut(cols)
                        .zip(block.chunks_exact(cols))
                    {
                        for c in 0..cols {
                            orow[c] = (row[c] - mean[c]) * inv[c];
                        }
                    }
                }
                let ng = n_groups as f64;
                let stats = BatchStats {
                    mean: mean_acc.into_iter().map(|m| m / ng).collect(),
                    var: var_acc.into_iter().map(|v| v / ng).collect(),
                };
                (inv_std, Some(stats))
            }
            Mode::Eval => {
                let inv: Vec<f64> = state
                    .running_var
                    .iter()
                    .map(|v| 1.0 / (v + eps).sqrt())
                    .collect();
                for (orow, row) in xhat.chunks_exact_mut(cols).zip(x.chunks_exact(cols)) {
                    for c in 0..cols {
                        orow[c] = (row[c] - state.running_mean[c]) * inv[c];
                    }
                }
                (inv, None)
            }
        };
        let mut out = xhat.clone();
        for row in out.chunks_exact_mut(cols) {
            for c in 0..cols {
                row[c] = row[c] * gamma[c] + beta[c];
            }
        }
        let out = Tensor::from_parts(vec![rows, cols], out);
        let rg = self.rg(&[input, scale, shift]);
        let group = if mode == Mode::Train { group } else { rows };
        let var = self.push(
            out,
            Op::BatchNorm {
                input,
                scale,
                shift,
                group,
                train: mode == Mode::Train,
                xhat,
                inv_std,
            },
            rg,
        );
        Ok((var, stats))
    }

    /// Column-wise maximum within consecutive blocks of `group` rows:
    /// `(B·group)×d → B×d`. Ties route the gradient to the lowest row.
    pub fn segment_max_pool(&mut self, input: Var, group: usize) -> Result<Var> {
        let t = self.value(input);
        let (rows, cols) = t.dims2("max_pool")?;
        if group == 0 || rows % group != 0 {
            return Err(Error::InvalidArgument(format!(
                "max pool group size {group} does not divide {rows} rows"
            )));
        }
        let n_groups = rows / group;
        let x = t.data();
        let mut out = vec![0.0; n_groups * cols];
        let mut argmax = vec![0usize; n_groups * cols];
        for g in 0..n_groups {
            let base = g * group;
            let o = &mut out[g * cols..(g + 1) * cols];
            let a = &mut argmax[g * cols..(g + 1) * cols];
            o.copy_from_slice(&x[base * cols..(base + 1) * cols]);
            a.iter_mut().for_each(|i| *i = base);
            for r in base + 1..base + group {
                let row = &x[r * cols..(r + 1) * cols];
                for c in 0..cols {
                    if row[c] > o[c] {
                        o[c] = row[c];
                        a[c] = r;
                    }
                }
            }
        }
        let out = Tensor::from_parts(vec![n_groups, cols], out);
        let rg = self.rg(&[input]);
        Ok(self.push(out, Op::MaxPool { input, argmax }, rg))
    }

    /// Column-wise maximum over all rows of a `K×d` set: `K×d → d`.
    pub fn set_max_pool(&mut self, input: Var) -> Result<Var> {
        let (rows, cols) = self.value(input).dims2("set_max_pool")?;
        let pooled = self.segment_max_pool(input, rows)?;
        self.reshape(pooled, vec![cols])
    }

    pub fn custom(&mut self, inputs: &[Var], output: Tensor, op: Box<dyn CustomOp>) -> Var {
        let rg = self.rg(inputs);
        self.push(
            output,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            rg,
        )
    }

    /// Propagates `d loss / d node` back through the graph and accumulates the
    /// result into every leaf that requires gradients.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let lt = self.value(loss);
        if !lt.is_scalar() {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar loss, got shape {:?}",
                lt.shape()
            )));
        }
        let n = loss.0 + 1;
        let mut adj: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for i in (0..n).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                let node = &mut self.nodes[i];
                match &mut node.grad {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(g),
                }
                continue;
            }
            self.propagate(i, &g, &mut adj);
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let wants = |v: Var| nodes[v.0].requires_grad;
        let out = &nodes[i].value;
        match &nodes[i].op {
            Op::Leaf => unreachable!(),
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        accumulate(adj, v, g.to_vec());
                    }
                }
            }
            Op::Sub(a, b) => {
                if wants(*a) {
                    accumulate(adj, *a, g.to_vec());
                }
                if wants(*b) {
                    accumulate(adj, *b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                if wants(*a) {
                    accumulate(
                        adj,
                        *a,
                        g.iter().zip(tb.data()).map(|(g, y)| g * y).collect(),
                    );
                }
                if wants(*b) {
                    accumulate(
                        adj,
                        *b,
                        g.iter().zip(ta.data()).map(|(g, x)| g * x).collect(),
                    );
                }
            }
            Op::Scale(a, c) => accumulate(adj, *a, g.iter().map(|x| x * c).collect()),
            Op::AddBias { input, bias } => {
                if wants(*input) {
                    accumulate(adj, *input, g.to_vec());
                }
                if wants(*bias) {
                    let cols = nodes[bias.0].value.numel();
                    let mut gb = vec![0.0; cols];
                    for row in g.chunks_exact(cols) {
                        gb.iter_mut().zip(row).for_each(|(s, x)| *s += x);
                    }
                    accumulate(adj, *bias, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                if wants(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, tb.data(), true, &mut ga, false);
                    accumulate(adj, *a, ga);
                }
                if wants(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, ta.data(), true, g, false, &mut gb, false);
                    accumulate(adj, *b, gb);
                }
            }
            Op::Relu(a) => {
                let x = nodes[a.0].value.data();
                accumulate(
                    adj,
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect(),
                );
            }
            Op::Exp(a) => {
                accumulate(
                    adj,
                    *a,
                    g.iter().zip(out.data()).map(|(g, y)| g * y).collect(),
                );
            }
            Op::Log(a) => {
                let x = nodes[a.0].value.data();
                accumulate(adj, *a, g.iter().zip(x).map(|(g, x)| g / x).collect());
            }
            Op::Sum(a) => {
                let n = nodes[a.0].value.numel();
                accumulate(adj, *a, vec![g[0]; n]);
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = nodes[p.0].value.numel();
                    if wants(p) {
                        accumulate(adj, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.shape()[1];
                let mut offset = 0;
                for &p in parts {
                    let w = nodes[p.0].value.shape()[1];
                    if wants(p) {
                        let gp = g
                            .chunks_exact(total)
                            .flat_map(|row| row[offset..offset + w].iter().copied())
                            .collect();
                        accumulate(adj, p, gp);
                    }
                    offset += w;
                }
            }
            Op::Reshape(a) => accumulate(adj, *a, g.to_vec()),
            Op::BatchNorm {
                input,
                scale,
                shift,
                group,
                train,
                xhat,
                inv_std,
            } => {
                let cols = nodes[scale.0].value.numel();
                let gamma = nodes[scale.0].value.data();
                if wants(*scale) {
                    let mut gs = vec![0.0; cols];
                    for (grow, xrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                        for c in 0..cols {
                            gs[c] += grow[c] * xrow[c];
                        }
                    }
                    accumulate(adj, *scale, gs);
                }
                if wants(*shift) {
                    let mut gb = vec![0.0; cols];
                    for grow in g.chunks_exact(cols) {
                        gb.iter_mut().zip(grow).for_each(|(s, x)| *s += x);
                    }
                    accumulate(adj, *shift, gb);
                }
                if wants(*input) {
                    let mut gx = vec![0.0; g.len()];
                    if *train {
                        let n = *group as f64;
                        let block = group * cols;
                        let mut sum_d = vec![0.0; cols];
                        let mut sum_dx = vec![0.0; cols];
                        for (gi, ((gblk, xblk), oblk)) in g
                            .chunks_exact(block)
                            .zip(xhat.chunks_exact(block))
                            .zip(gx.chunks_exact_mut(block))
                            .enumerate()
                        {
                            sum_d.iter_mut().for_each(|s| *s = 0.0);
                            sum_dx.iter_mut().for_each(|s| *s = 0.0);
                            for (grow, xrow) in gblk.chunks_exact(cols).zip(xblk.chunks_exact(cols))
                            {
                                for c in 0..cols {
                                    let d = grow[c] * gamma[c];
                                    sum_d[c] += d;
                                    sum_dx[c] += d * xrow[c];
                                }
                            }
                            let inv = &inv_std[gi * cols..(gi + 1) * cols];
                            for ((grow, xrow), orow) in gblk
                                .chunks_exact(cols)
                                .zip(xblk.chunks_exact(cols))
                                .zip(oblk.chunks_exact_mut(cols))
                            {
                                for c in 0..cols {
                                    let d = grow[c] * gamma[c];
                                    orow[c] = inv[c] / n * (n * d - sum_d[c] - xrow[c] * sum_dx[c]);
                                }
                            }
                        }
                    } else {
                        for (grow, orow) in g.chunks_exact(cols).zip(gx.chunks_exact_mut(cols)) {
                            for c in 0..cols {
                                orow[c] = grow[c] * gamma[c] * inv_std[c];
                            }
                        }
                    }
                    accumulate(adj, *input, gx);
                }
            }
            Op::MaxPool { input, argmax } => {
                let cols = out.shape()[1];
                let mut gx = vec![0.0; nodes[input.0].value.numel()];
                for (idx, &row) in argmax.iter().enumerate() {
                    gx[row * cols + idx % cols] += g[idx];
                }
                accumulate(adj, *input, gx);
            }
            Op::Custom { inputs, op } => {
                let tensors: Vec<&Tensor> = inputs.iter().map(|v| &nodes[v.0].value).collect();
                let grads = op.backward(&tensors, out, g);
                debug_assert_eq!(
                    grads.len(),
                    inputs.len(),
                    "{} returned wrong arity",
                    op.name()
                );
                for (&v, gv) in inputs.iter().zip(grads) {
                    if wants(v) {
                        debug_assert_eq!(gv.len(), nodes[v.0].value.numel(), "{}", op.name());
                        accumulate(adj, v, gv);
                    }
                }
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}

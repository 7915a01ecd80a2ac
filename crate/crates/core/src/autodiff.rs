//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is an append-only tape. Each primitive evaluates eagerly,
//! stores its output plus whatever it needs for the adjoint, and returns a
//! [`Var`] handle. Graphs are rebuilt every training step.
//!
//! ```
//! use cebmv::autodiff::Graph;
//! use cebmv::tensor::Tensor;
//!
//! let mut g = Graph::new();
//! let x = g.param(Tensor::scalar(3.0));
//! let y = g.square(x).unwrap();
//! g.backward(y).unwrap();
//! assert_eq!(g.grad(x).unwrap().item(), 6.0);
//! ```

use crate::error::{Error, Result};
use crate::tensor::{dot, gemm, matmul_raw, norm, Tensor};

/// Additive epsilon inside the square root of batch standardization.
pub const BATCH_STD_EPS: f64 = 1e-5;
/// Weight of the old value in the running-statistics update.
pub const RUNNING_STATS_MOMENTUM: f64 = 0.9;
/// Rows with a smaller norm cannot be normalized.
pub const MIN_ROW_NORM: f64 = 1e-12;
/// Below this distance between the north pole and the target direction the
/// Householder reflection is replaced by the identity.
pub const HOUSEHOLDER_TIE: f64 = 1e-9;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Running mean/variance kept by a batch-standardization layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RunningStats {
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
}

impl RunningStats {
    pub fn new(features: usize) -> Self {
        Self {
            mean: vec![0.0; features],
            var: vec![1.0; features],
        }
    }
}

/// Mode of a batch-standardization call.
pub enum Standardize<'a> {
    /// Batch statistics; running statistics are folded in when provided.
    Train(Option<&'a mut RunningStats>),
    /// Frozen running statistics.
    Eval(&'a RunningStats),
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
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Concat { parts: Vec<Var>, axis: usize },
    BatchStd { input: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    Householder { mu: Var, v: Var },
    StopGradient,
    LogSoftmaxRows { input: Var, softmax: Vec<f64> },
    DotRows(Var, Var),
    Diag(Var),
    L2Normalize { input: Var, norms: Vec<f64> },
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Append-only computation tape.
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Tensor>>,
    mutated: bool,
}

impl Default for Graph {
    fn default() -> Self {
        Self::new()
    }
}

fn check_finite(data: &[f64], op: &'static str) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

impl Graph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            mutated: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn push_checked(
        &mut self,
        op: Op,
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        name: &'static str,
    ) -> Result<Var> {
        check_finite(&data, name)?;
        Ok(self.push(op, Tensor::from_parts(shape, data), requires_grad))
    }

    fn node(&self, v: Var) -> &Node {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(Op::Leaf, t, false)
    }

    /// Replaces the value of a leaf. Any node already computed from the leaf
    /// now holds stale forward values, so a later `backward` is refused.
    pub fn set_leaf(&mut self, v: Var, t: Tensor) -> Result<()> {
        let node = &mut self.nodes[v.0];
        if !matches!(node.op, Op::Leaf) {
            return Err(Error::Graph("set_leaf on a non-leaf node".into()));
        }
        if node.value.shape() != t.shape() {
            return Err(Error::shape("set_leaf", "shape changed"));
        }
        node.value = t;
        if v.0 + 1 < self.nodes.len() {
            self.mutated = true;
        }
        Ok(())
    }

    /// Accumulated gradient of a leaf after [`Graph::backward`].
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
    }

    fn shape_of(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape_of(v);
        if s.len() != 2 {
            return Err(Error::shape(op, format!("expected a matrix, got {s:?}")));
        }
        Ok((s[0], s[1]))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|&v| self.requires_grad(v))
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", format!("[{m},{k}] @ [{k2},{n}]")));
        }
        let c = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let rg = self.rg(&[a, b]);
        self.push_checked(Op::MatMul(a, b), vec![m, n], c, rg, "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "transpose")?;
        let src = self.value(a).data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Transpose(a), Tensor::from_parts(vec![n, m], out), rg))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape_of(a) != self.shape_of(b) {
            return Err(Error::shape(
                op,
                format!("{:?} vs {:?}", self.shape_of(a), self.shape_of(b)),
            ));
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape_of(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push_checked(op, shape, data, rg, name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn row_broadcast(&self, a: Var, row: Var, op: &'static str) -> Result<(usize, usize)> {
        let (m, n) = self.dims2(a, op)?;
        if self.shape_of(row) != [n] {
            return Err(Error::shape(
                op,
                format!("row vector {:?} vs matrix [{m},{n}]", self.shape_of(row)),
            ));
        }
        Ok((m, n))
    }

    /// `a[i, j] + bias[j]`; the only broadcasting form the engine supports.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast(a, bias, "add_row")?;
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + b[i % n])
            .collect();
        let rg = self.rg(&[a, bias]);
        self.push_checked(Op::AddRow(a, bias), vec![m, n], data, rg, "add_row")
    }

    /// `a[i, j] * gain[j]`.
    pub fn mul_row(&mut self, a: Var, gain: Var) -> Result<Var> {
        let (m, n) = self.row_broadcast(a, gain, "mul_row")?;
        let w = self.value(gain).data();
        let data = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * w[i % n])
            .collect();
        let rg = self.rg(&[a, gain]);
        self.push_checked(Op::MulRow(a, gain), vec![m, n], data, rg, "mul_row")
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| c * x);
        let rg = self.rg(&[a]);
        self.push_checked(Op::Scale(a, c), t.shape().to_vec(), t.into_data(), rg, "scale")
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let t = self.value(a).map(|x| x + c);
        let rg = self.rg(&[a]);
        self.push_checked(Op::AddScalar(a), t.shape().to_vec(), t.into_data(), rg, "add_scalar")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x.max(0.0));
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Relu(a), t, rg))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a).map(|x| x * x);
        let rg = self.rg(&[a]);
        self.push_checked(Op::Square(a), t.shape().to_vec(), t.into_data(), rg, "square")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.rg(&[a]);
        self.push_checked(Op::Sum(a), vec![1], vec![s], rg, "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s: f64 = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[a]);
        self.push_checked(Op::Mean(a), vec![1], vec![s], rg, "mean")
    }

    /// Concatenates matrices along rows (`axis = 0`) or columns (`axis = 1`).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        if parts.is_empty() || axis > 1 {
            return Err(Error::shape("concat", "need parts and axis 0 or 1"));
        }
        let dims: Vec<(usize, usize)> = parts
            .iter()
            .map(|&p| self.dims2(p, "concat"))
            .collect::<Result<_>>()?;
        let (rows, cols) = if axis == 0 {
            if dims.iter().any(|d| d.1 != dims[0].1) {
                return Err(Error::shape("concat", "column counts differ"));
            }
            (dims.iter().map(|d| d.0).sum(), dims[0].1)
        } else {
            if dims.iter().any(|d| d.0 != dims[0].0) {
                return Err(Error::shape("concat", "row counts differ"));
            }
            (dims[0].0, dims.iter().map(|d| d.1).sum())
        };
        let mut data = Vec::with_capacity(rows * cols);
        if axis == 0 {
            for &p in parts {
                data.extend_from_slice(self.value(p).data());
            }
        } else {
            for i in 0..rows {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row(i));
                }
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            Tensor::from_parts(vec![rows, cols], data),
            rg,
        ))
    }

    /// Standardizes each column to zero mean and unit variance.
    ///
    /// Train mode uses batch statistics (biased variance) and, if given,
    /// folds them into the running statistics with momentum 0.9 (unbiased
    /// variance). Eval mode uses the running statistics unchanged.
    pub fn batch_standardize(&mut self, a: Var, mode: Standardize<'_>) -> Result<Var> {
        let (b, n) = self.dims2(a, "batch_standardize")?;
        let x = self.value(a).data();
        let (mean, var, train) = match &mode {
            Standardize::Train(_) => {
                if b < 2 {
                    return Err(Error::shape(
                        "batch_standardize",
                        format!("train mode needs batch >= 2, got {b}"),
                    ));
                }
                let mut mean = vec![0.0; n];
                for row in x.chunks_exact(n) {
                    for (m, &v) in mean.iter_mut().zip(row) {
                        *m += v;
                    }
                }
                mean.iter_mut().for_each(|m| *m /= b as f64);
                let mut var = vec![0.0; n];
                for row in x.chunks_exact(n) {
                    for ((s, &v), &m) in var.iter_mut().zip(row).zip(&mean) {
                        *s += (v - m) * (v - m);
                    }
                }
                var.iter_mut().for_each(|s| *s /= b as f64);
                (mean, var, true)
            }
            Standardize::Eval(stats) => {
                if stats.mean.len() != n || stats.var.len() != n {
                    return Err(Error::shape("batch_standardize", "running stats width"));
                }
                (stats.mean.clone(), stats.var.clone(), false)
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BATCH_STD_EPS).sqrt()).collect();
        let mut xhat = Vec::with_capacity(b * n);
        for row in x.chunks_exact(n) {
            for j in 0..n {
                xhat.push((row[j] - mean[j]) * inv_std[j]);
            }
        }
        check_finite(&xhat, "batch_standardize")?;
        if let Standardize::Train(Some(stats)) = mode {
            if stats.mean.len() != n {
                return Err(Error::shape("batch_standardize", "running stats width"));
            }
            let unbias = b as f64 / (b as f64 - 1.0);
            for j in 0..n {
                stats.mean[j] =
                    RUNNING_STATS_MOMENTUM * stats.mean[j] + (1.0 - RUNNING_STATS_MOMENTUM) * mean[j];
                stats.var[j] = RUNNING_STATS_MOMENTUM * stats.var[j]
                    + (1.0 - RUNNING_STATS_MOMENTUM) * var[j] * unbias;
            }
        }
        let rg = self.rg(&[a]);
        let value = Tensor::from_parts(vec![b, n], xhat.clone());
        Ok(self.push(
            Op::BatchStd {
                input: a,
                xhat,
                inv_std,
                train,
            },
            value,
            rg,
        ))
    }

    /// Applies, row by row, the Householder reflection that maps the north
    /// pole `e_1` onto `mu[i]`, to the vector `v[i]`.
    pub fn householder_apply(&mut self, mu: Var, v: Var) -> Result<Var> {
        self.same_shape(mu, v, "householder_apply")?;
        let (b, n) = self.dims2(mu, "householder_apply")?;
        let mut out = Vec::with_capacity(b * n);
        for i in 0..b {
            let m = self.value(mu).row(i);
            let x = self.value(v).row(i);
            match reflection_axis(m) {
                None => out.extend_from_slice(x),
                Some((a, s)) => {
                    let c = dot(&a, x);
                    out.extend(x.iter().zip(&a).map(|(&xv, &av)| xv - 2.0 * av * c / s));
                }
            }
        }
        let rg = self.rg(&[mu, v]);
        self.push_checked(Op::Householder { mu, v }, vec![b, n], out, rg, "householder_apply")
    }

    /// Forwards the value; the adjoint through this node is zero.
    pub fn stop_gradient(&mut self, a: Var) -> Var {
        let t = self.value(a).clone();
        self.push(Op::StopGradient, t, false)
    }

    /// Row-wise log-softmax, computed through log-sum-exp.
    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let (b, n) = self.dims2(a, "log_softmax_rows")?;
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(b * n);
        let mut softmax = Vec::with_capacity(b * n);
        for row in x.chunks_exact(n) {
            let lse = log_sum_exp(row);
            for &v in row {
                out.push(v - lse);
                softmax.push((v - lse).exp());
            }
        }
        let rg = self.rg(&[a]);
        self.push_checked(
            Op::LogSoftmaxRows { input: a, softmax },
            vec![b, n],
            out,
            rg,
            "log_softmax_rows",
        )
    }

    /// `out[i] = a[i, :] . b[i, :]`.
    pub fn dot_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "dot_rows")?;
        let (m, _) = self.dims2(a, "dot_rows")?;
        let out = (0..m)
            .map(|i| dot(self.value(a).row(i), self.value(b).row(i)))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push_checked(Op::DotRows(a, b), vec![m], out, rg, "dot_rows")
    }

    /// Diagonal of a square matrix.
    pub fn diag(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.dims2(a, "diag")?;
        if m != n {
            return Err(Error::shape("diag", format!("[{m},{n}] is not square")));
        }
        let x = self.value(a).data();
        let out = (0..m).map(|i| x[i * n + i]).collect();
        let rg = self.rg(&[a]);
        Ok(self.push(Op::Diag(a), Tensor::from_parts(vec![m], out), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let (b, n) = self.dims2(a, "l2_normalize")?;
        let x = self.value(a).data();
        let mut norms = Vec::with_capacity(b);
        let mut out = Vec::with_capacity(b * n);
        for row in x.chunks_exact(n) {
            let r = norm(row);
            if !(r > MIN_ROW_NORM) {
                return Err(Error::Numeric(format!(
                    "l2_normalize: row norm {r:e} below {MIN_ROW_NORM:e}"
                )));
            }
            norms.push(r);
            out.extend(row.iter().map(|v| v / r));
        }
        let rg = self.rg(&[a]);
        self.push_checked(
            Op::L2Normalize { input: a, norms },
            vec![b, n],
            out,
            rg,
            "l2_normalize",
        )
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates `d(output)/d(leaf)` into every trainable leaf.
    pub fn backward(&mut self, output: Var) -> Result<()> {
        if self.mutated {
            return Err(Error::Graph("graph mutated since forward".into()));
        }
        if !self.value(output).is_scalar() {
            return Err(Error::Graph(format!(
                "backward needs a scalar output, got shape {:?}",
                self.shape_of(output)
            )));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=output.0).map(|_| None).collect();
        adj[output.0] = Some(vec![1.0]);

        for idx in (0..=output.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf = node.op {
                match &mut self.grads[idx] {
                    Some(acc) => {
                        for (a, v) in acc.data_mut().iter_mut().zip(&g) {
                            *a += v;
                        }
                    }
                    slot @ None => {
                        *slot = Some(Tensor::from_parts(node.value.shape().to_vec(), g));
                    }
                }
                continue;
            }
            for (parent, contrib) in self.node_adjoints(idx, &g) {
                if !self.requires_grad(parent) {
                    continue;
                }
                match &mut adj[parent.0] {
                    Some(acc) => {
                        for (a, v) in acc.iter_mut().zip(&contrib) {
                            *a += v;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        Ok(())
    }

    /// Adjoint contributions of node `idx` to its parents, given its own
    /// adjoint `g`.
    fn node_adjoints(&self, idx: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[idx];
        let val = |v: Var| self.node(v).value.data();
        match &node.op {
            Op::Leaf | Op::StopGradient => vec![],
            Op::MatMul(a, b) => {
                let (m, k) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                let n = self.shape_of(*b)[1];
                let (av, bv) = (val(*a), val(*b));
                let mut out = vec![];
                if self.requires_grad(*a) {
                    // dA = dC @ B^T
                    out.push((*a, gemm(g, false, bv, true, m, n, k)));
                }
                if self.requires_grad(*b) {
                    // dB = A^T @ dC
                    let db = gemm(av, true, g, false, k, m, n);
                    out.push((*b, db));
                }
                out
            }
            Op::Transpose(a) => {
                let (m, n) = (self.shape_of(*a)[0], self.shape_of(*a)[1]);
                let mut da = vec![0.0; m * n];
                for i in 0..m {
                    for j in 0..n {
                        da[i * n + j] = g[j * m + i];
                    }
                }
                vec![(*a, da)]
            }
            Op::Add(a, b) => vec![(*a, g.to_vec()), (*b, g.to_vec())],
            Op::Sub(a, b) => vec![(*a, g.to_vec()), (*b, g.iter().map(|v| -v).collect())],
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                vec![
                    (*a, g.iter().zip(bv).map(|(x, y)| x * y).collect()),
                    (*b, g.iter().zip(av).map(|(x, y)| x * y).collect()),
                ]
            }
            Op::AddRow(a, bias) => {
                let n = self.shape_of(*bias)[0];
                let mut db = vec![0.0; n];
                for row in g.chunks_exact(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                vec![(*a, g.to_vec()), (*bias, db)]
            }
            Op::MulRow(a, gain) => {
                let n = self.shape_of(*gain)[0];
                let (av, wv) = (val(*a), val(*gain));
                let mut dw = vec![0.0; n];
                let mut da = vec![0.0; g.len()];
                for (i, (&gv, &x)) in g.iter().zip(av).enumerate() {
                    dw[i % n] += gv * x;
                    da[i] = gv * wv[i % n];
                }
                vec![(*a, da), (*gain, dw)]
            }
            Op::Scale(a, c) => vec![(*a, g.iter().map(|v| v * c).collect())],
            Op::AddScalar(a) => vec![(*a, g.to_vec())],
            Op::Relu(a) => {
                let x = val(*a);
                vec![(
                    *a,
                    g.iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv > 0.0 { gv } else { 0.0 })
                        .collect(),
                )]
            }
            Op::Square(a) => {
                let x = val(*a);
                vec![(*a, g.iter().zip(x).map(|(gv, xv)| 2.0 * gv * xv).collect())]
            }
            Op::Sum(a) => vec![(*a, vec![g[0]; self.value(*a).numel()])],
            Op::Mean(a) => {
                let n = self.value(*a).numel();
                vec![(*a, vec![g[0] / n as f64; n])]
            }
            Op::Concat { parts, axis } => {
                let mut out = Vec::with_capacity(parts.len());
                if *axis == 0 {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.value(p).numel();
                        out.push((p, g[off..off + len].to_vec()));
                        off += len;
                    }
                } else {
                    let total = node.value.cols();
                    let rows = node.value.rows();
                    let mut col_off = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut d = Vec::with_capacity(rows * c);
                        for i in 0..rows {
                            d.extend_from_slice(&g[i * total + col_off..i * total + col_off + c]);
                        }
                        out.push((p, d));
                        col_off += c;
                    }
                }
                out
            }
            Op::BatchStd {
                input,
                xhat,
                inv_std,
                train,
            } => {
                let n = inv_std.len();
                let b = g.len() / n;
                if !train {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, gv)| gv * inv_std[i % n])
                        .collect();
                    return vec![(*input, da)];
                }
                let mut sum_g = vec![0.0; n];
                let mut sum_gx = vec![0.0; n];
                for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        sum_g[j] += grow[j];
                        sum_gx[j] += grow[j] * xrow[j];
                    }
                }
                let bf = b as f64;
                let mut da = Vec::with_capacity(g.len());
                for (grow, xrow) in g.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                    for j in 0..n {
                        da.push(inv_std[j] / bf * (bf * grow[j] - sum_g[j] - xrow[j] * sum_gx[j]));
                    }
                }
                vec![(*input, da)]
            }
            Op::Householder { mu, v } => {
                let n = self.shape_of(*mu)[1];
                let mut dmu = vec![0.0; g.len()];
                let mut dv = vec![0.0; g.len()];
                for (i, gi) in g.chunks_exact(n).enumerate() {
                    let m = self.value(*mu).row(i);
                    let x = self.value(*v).row(i);
                    match reflection_axis(m) {
                        None => dv[i * n..(i + 1) * n].copy_from_slice(gi),
                        Some((a, s)) => {
                            let c = dot(&a, x);
                            let t = dot(&a, gi);
                            for j in 0..n {
                                // H is symmetric: dv = H g.
                                dv[i * n + j] = gi[j] - 2.0 * a[j] * t / s;
                                // d/da of g.(x - 2 a (a.x)/s), and a = e1 - mu.
                                let da = -2.0 * (gi[j] * c / s + t * x[j] / s - 2.0 * t * c * a[j] / (s * s));
                                dmu[i * n + j] = -da;
                            }
                        }
                    }
                }
                vec![(*mu, dmu), (*v, dv)]
            }
            Op::LogSoftmaxRows { input, softmax } => {
                let n = self.shape_of(*input)[1];
                let mut da = Vec::with_capacity(g.len());
                for (grow, srow) in g.chunks_exact(n).zip(softmax.chunks_exact(n)) {
                    let total: f64 = grow.iter().sum();
                    da.extend(grow.iter().zip(srow).map(|(gv, sv)| gv - sv * total));
                }
                vec![(*input, da)]
            }
            Op::DotRows(a, b) => {
                let n = self.shape_of(*a)[1];
                let (av, bv) = (val(*a), val(*b));
                let mut da = Vec::with_capacity(av.len());
                let mut db = Vec::with_capacity(av.len());
                for (i, gi) in g.iter().enumerate() {
                    da.extend(bv[i * n..(i + 1) * n].iter().map(|x| gi * x));
                    db.extend(av[i * n..(i + 1) * n].iter().map(|x| gi * x));
                }
                vec![(*a, da), (*b, db)]
            }
            Op::Diag(a) => {
                let m = g.len();
                let mut da = vec![0.0; m * m];
                for i in 0..m {
                    da[i * m + i] = g[i];
                }
                vec![(*a, da)]
            }
            Op::L2Normalize { input, norms } => {
                let n = self.shape_of(*input)[1];
                let u = node.value.data();
                let mut da = Vec::with_capacity(g.len());
                for (i, gi) in g.chunks_exact(n).enumerate() {
                    let ui = &u[i * n..(i + 1) * n];
                    let proj = dot(ui, gi);
                    da.extend(gi.iter().zip(ui).map(|(gv, uv)| (gv - uv * proj) / norms[i]));
                }
                vec![(*input, da)]
            }
        }
    }
}

/// `(a, |a|^2)` with `a = e_1 - mu`, or `None` when `mu` sits on the north
/// pole and the reflection degenerates to the identity.
pub(crate) fn reflection_axis(mu: &[f64]) -> Option<(Vec<f64>, f64)> {
    let mut a: Vec<f64> = mu.iter().map(|v| -v).collect();
    a[0] += 1.0;
    let s = dot(&a, &a);
    if s.sqrt() < HOUSEHOLDER_TIE {
        None
    } else {
        Some((a, s))
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

/// Maximum over coordinates of `|analytic - central| / max(1, |central|)`
/// for a scalar function of several tensors.
///
/// `f` is rebuilt on a fresh graph for every probe point, so it must be
/// deterministic (recreate any RNG stream inside the closure).
pub fn grad_check_many<F>(f: F, xs: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let mut g = Graph::new();
    let vars: Vec<Var> = xs.iter().map(|x| g.param(x.clone())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(xs)
        .map(|(&v, x)| g.grad(v).cloned().unwrap_or_else(|| Tensor::zeros(x.shape())))
        .collect();

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|x| g.constant(x.clone())).collect();
        let out = f(&mut g, &vars)?;
        let v = g.value(out).item();
        if !v.is_finite() {
            return Err(Error::NonFinite("grad_check probe"));
        }
        Ok(v)
    };

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for t in 0..xs.len() {
        for j in 0..xs[t].numel() {
            let orig = xs[t].data()[j];
            probe[t].data_mut()[j] = orig + step;
            let up = eval(&probe)?;
            probe[t].data_mut()[j] = orig - step;
            let down = eval(&probe)?;
            probe[t].data_mut()[j] = orig;
            let central = (up - down) / (2.0 * step);
            let err = (analytic[t].data()[j] - central).abs() / central.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

/// Single-input form of [`grad_check_many`].
pub fn grad_check<F>(f: F, x: &Tensor, step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, Var) -> Result<Var>,
{
    grad_check_many(|g, vs| f(g, vs[0]), std::slice::from_ref(x), step)
}

//! Reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Tape`] records every operation in execution order. Each recorded node
//! keeps its forward value plus whatever the backward rule needs, so
//! [`Tape::backward`] is a single reverse sweep over the node list.
//!
//! ```
//! use geofew::tape::Tape;
//! use geofew::tensor::Tensor;
//!
//! let mut tape = Tape::new();
//! let x = tape.leaf(&Tensor::scalar(3.0).with_requires_grad(true));
//! let y = tape.mul(x, x).unwrap();
//! let grads = tape.backward(y).unwrap();
//! assert_eq!(grads.get(x), vec![6.0]);
//! ```
//!
//! Broadcasting is limited to scalar-with-tensor for the binary ops and a
//! row vector added to every row of a matrix ([`Tape::add_row`]).

use crate::error::{Error, Result};
use crate::tensor::{matmul_into, norm, transpose_data, Tensor, EPS_NORM};

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
    Transpose(Var),
    NormalizeRows { x: Var, norms: Vec<f64> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Clamp { x: Var, lo: f64, hi: f64 },
    Sum(Var),
    Mean(Var),
    SumRows(Var),
    SelectRows { x: Var, idx: Vec<usize> },
    SelectCols { x: Var, idx: Vec<usize> },
    ConcatCols(Var, Var),
    Gather { x: Var, idx: Vec<usize> },
    AddRow(Var, Var),
    CrossEntropy { logits: Var, labels: Vec<usize>, probs: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
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
    grads: Vec<Option<Vec<f64>>>,
    sizes: Vec<usize>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Vec<f64> {
        self.grads[v.0]
            .clone()
            .unwrap_or_else(|| vec![0.0; self.sizes[v.0]])
    }

    /// Copies the gradient of `v` into the tensor's grad buffer.
    pub fn write_into(&self, v: Var, t: &mut Tensor) -> Result<()> {
        match &self.grads[v.0] {
            Some(g) => t.set_grad(g),
            None => {
                t.zero_grad();
                Ok(())
            }
        }
    }

    /// Number of nodes the reverse sweep touched.
    pub fn visited(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

fn is_scalar_shape(shape: &[usize]) -> bool {
    shape.iter().product::<usize>() == 1
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

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a leaf holding a copy of `t`. It is differentiable iff `t` requires grad.
    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Records a non-differentiable leaf.
    pub fn constant(&mut self, t: &Tensor) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("tape nodes are shape-consistent")
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = &self.nodes[v.0].shape;
        if s.len() != 2 {
            return Err(Error::shape(op, s, &[]));
        }
        Ok((s[0], s[1]))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        matmul_into(self.value(a), self.value(b), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "transpose")?;
        let out = transpose_data(self.value(a), m, n);
        let rg = self.rg(a);
        Ok(self.push(vec![n, m], out, Op::Transpose(a), rg))
    }

    /// Scales every row to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "l2_normalize_rows")?;
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * d);
        let mut norms = Vec::with_capacity(m);
        for i in 0..m {
            let row = &xv[i * d..(i + 1) * d];
            let n = norm(row);
            if !(n > EPS_NORM) {
                return Err(Error::Degenerate {
                    what: "row",
                    index: i,
                    norm: n,
                });
            }
            out.extend(row.iter().map(|v| v / n));
            norms.push(n);
        }
        let rg = self.rg(x);
        Ok(self.push(vec![m, d], out, Op::NormalizeRows { x, norms }, rg))
    }

    /// Scales every column to unit norm (`transpose ∘ normalize_rows ∘ transpose`).
    pub fn l2_normalize_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.transpose(x)?;
        let n = self.l2_normalize_rows(t).map_err(|e| match e {
            Error::Degenerate { index, norm, .. } => Error::Degenerate {
                what: "column",
                index,
                norm,
            },
            other => other,
        })?;
        self.transpose(n)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: &'static str,
        f: impl Fn(f64, f64) -> f64,
        rec: fn(Var, Var) -> Op,
    ) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (va, vb) = (self.value(a), self.value(b));
        let (shape, out): (Vec<usize>, Vec<f64>) = if sa == sb {
            (sa, va.iter().zip(vb).map(|(x, y)| f(*x, *y)).collect())
        } else if is_scalar_shape(&sb) {
            let y = vb[0];
            (sa, va.iter().map(|x| f(*x, y)).collect())
        } else if is_scalar_shape(&sa) {
            let x = va[0];
            (sb, vb.iter().map(|y| f(x, *y)).collect())
        } else {
            return Err(Error::shape(op, &sa, &sb));
        };
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, out, rec(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul)
    }

    /// Multiplies by a fixed constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v * c).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let out = self.value(x).iter().map(|v| v + c).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::AddScalar(x), rg)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.max(0.0)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Relu(x), rg)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|v| v.exp()).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Exp(x), rg)
    }

    /// Natural log. Every input must be strictly positive.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some((i, v)) = self.value(x).iter().enumerate().find(|(_, v)| !(**v > 0.0)) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("element {i} is {v}"),
            });
        }
        let out = self.value(x).iter().map(|v| v.ln()).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        Ok(self.push(shape, out, Op::Log(x), rg))
    }

    /// Clamps into `[lo, hi]`. Clamped elements pass no gradient.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        let out = self.value(x).iter().map(|v| v.clamp(lo, hi)).collect();
        let (shape, rg) = (self.shape(x).to_vec(), self.rg(x));
        self.push(shape, out, Op::Clamp { x, lo, hi }, rg)
    }

    /// `log(max(x, eps))`, the clamped log used by every loss.
    pub fn log_clamped(&mut self, x: Var, eps: f64) -> Result<Var> {
        let c = self.clamp(x, eps, f64::INFINITY);
        self.log(c)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().sum();
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s = v.iter().sum::<f64>() / v.len() as f64;
        let rg = self.rg(x);
        self.push(vec![], vec![s], Op::Mean(x), rg)
    }

    /// Column-wise sum over rows: `[m×d] → [1×d]`.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (m, d) = self.matrix_dims(x, "sum_rows")?;
        let xv = self.value(x);
        let mut out = vec![0.0; d];
        for i in 0..m {
            for (o, v) in out.iter_mut().zip(&xv[i * d..(i + 1) * d]) {
                *o += v;
            }
        }
        let rg = self.rg(x);
        Ok(self.push(vec![1, d], out, Op::SumRows(x), rg))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.to_tensor(x).select_rows(idx)?;
        let rg = self.rg(x);
        Ok(self.push(
            t.shape().to_vec(),
            t.into_data(),
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn select_cols(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let (m, n) = self.matrix_dims(x, "select_cols")?;
        if let Some(&j) = idx.iter().find(|&&j| j >= n) {
            return Err(Error::Contract(format!("column {j} out of range for {n} columns")));
        }
        let xv = self.value(x);
        let mut out = Vec::with_capacity(m * idx.len());
        for i in 0..m {
            out.extend(idx.iter().map(|&j| xv[i * n + j]));
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![m, idx.len()],
            out,
            Op::SelectCols {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// `[a b]` along columns.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.to_tensor(a).concat_cols(&self.to_tensor(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t.shape().to_vec(), t.into_data(), Op::ConcatCols(a, b), rg))
    }

    /// Picks elements by flat row-major index into a vector of shape `[idx.len()]`.
    pub fn gather(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let mut out = Vec::with_capacity(idx.len());
        for &i in idx {
            let v = xv.get(i).ok_or_else(|| {
                Error::Contract(format!("flat index {i} out of range for {} elements", xv.len()))
            })?;
            out.push(*v);
        }
        let rg = self.rg(x);
        Ok(self.push(
            vec![idx.len()],
            out,
            Op::Gather {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    /// Adds the row vector `b: [1×n]` to every row of `a: [m×n]`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.matrix_dims(a, "add_row")?;
        let sb = self.shape(b);
        if sb != [1, n] {
            return Err(Error::shape("add_row", self.shape(a), sb));
        }
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = av.to_vec();
        for i in 0..m {
            for (o, v) in out[i * n..(i + 1) * n].iter_mut().zip(bv) {
                *o += v;
            }
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::AddRow(a, b), rg))
    }

    /// Mean negative log-softmax of the labelled column, computed with the
    /// max-shift so large logits stay finite.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (m, c) = self.matrix_dims(logits, "cross_entropy")?;
        if m == 0 {
            return Err(Error::Contract("cross_entropy on an empty batch".into()));
        }
        if labels.len() != m {
            return Err(Error::Contract(format!(
                "{} labels for a batch of {m}",
                labels.len()
            )));
        }
        if let Some(&y) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {y} out of range for {c} classes")));
        }
        let z = self.value(logits);
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        for i in 0..m {
            let row = &z[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let se: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + se.ln();
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
            total += lse - row[labels[i]];
        }
        let rg = self.rg(logits);
        Ok(self.push(
            vec![],
            vec![total / m as f64],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                root.shape
            )));
        }
        let sizes: Vec<usize> = self.nodes.iter().map(|n| n.value.len()).collect();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            let node = &self.nodes[id];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[id] = Some(g);
        }
        // Only differentiable nodes keep a gradient entry.
        for (g, n) in grads.iter_mut().zip(&self.nodes) {
            if !n.requires_grad {
                *g = None;
            }
        }
        Ok(Gradients { grads, sizes })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
            slot @ None => *slot = Some(contrib),
        }
    }

    /// Reduces a broadcast gradient back to operand `v`'s shape.
    fn unbroadcast(&self, v: Var, g: Vec<f64>) -> Vec<f64> {
        if self.nodes[v.0].value.len() == g.len() {
            g
        } else {
            vec![g.iter().sum()]
        }
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.rg(*a) {
                    let bt = transpose_data(self.value(*b), k, n);
                    let mut ga = vec![0.0; m * k];
                    matmul_into(g, &bt, &mut ga, m, n, k);
                    self.accumulate(grads, *a, ga);
                }
                if self.rg(*b) {
                    let at = transpose_data(self.value(*a), m, k);
                    let mut gb = vec![0.0; k * n];
                    matmul_into(&at, g, &mut gb, k, m, n);
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Transpose(a) => {
                let (m, n) = (node.shape[0], node.shape[1]);
                self.accumulate(grads, *a, transpose_data(g, m, n));
            }
            Op::NormalizeRows { x, norms } => {
                let d = node.shape[1];
                let y = &node.value;
                let mut gx = vec![0.0; y.len()];
                for (i, n) in norms.iter().enumerate() {
                    let r = i * d..(i + 1) * d;
                    let proj: f64 = y[r.clone()].iter().zip(&g[r.clone()]).map(|(a, b)| a * b).sum();
                    for j in r {
                        gx[j] = (g[j] - y[j] * proj) / n;
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, self.unbroadcast(*a, g.to_vec()));
                self.accumulate(grads, *b, self.unbroadcast(*b, g.to_vec()));
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, self.unbroadcast(*a, g.to_vec()));
                let neg = g.iter().map(|v| -v).collect();
                self.accumulate(grads, *b, self.unbroadcast(*b, neg));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                let at = |i: usize, v: &[f64]| if v.len() == 1 { v[0] } else { v[i] };
                if self.rg(*a) {
                    let ga = g.iter().enumerate().map(|(i, gi)| gi * at(i, vb)).collect();
                    self.accumulate(grads, *a, self.unbroadcast(*a, ga));
                }
                if self.rg(*b) {
                    let gb = g.iter().enumerate().map(|(i, gi)| gi * at(i, va)).collect();
                    self.accumulate(grads, *b, self.unbroadcast(*b, gb));
                }
            }
            Op::Scale(x, c) => {
                self.accumulate(grads, *x, g.iter().map(|v| v * c).collect());
            }
            Op::AddScalar(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::Relu(x) => {
                let xv = self.value(*x);
                let gx = g
                    .iter()
                    .zip(xv)
                    .map(|(gi, xi)| if *xi > 0.0 { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Exp(x) => {
                let gx = g.iter().zip(&node.value).map(|(gi, yi)| gi * yi).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Log(x) => {
                let gx = g.iter().zip(self.value(*x)).map(|(gi, xi)| gi / xi).collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Clamp { x, lo, hi } => {
                let gx = g
                    .iter()
                    .zip(self.value(*x))
                    .map(|(gi, xi)| if *xi >= *lo && *xi <= *hi { *gi } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx);
            }
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.len();
                self.accumulate(grads, *x, vec![g[0] / n as f64; n]);
            }
            Op::SumRows(x) => {
                let (m, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let mut gx = Vec::with_capacity(m * d);
                for _ in 0..m {
                    gx.extend_from_slice(g);
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SelectRows { x, idx } => {
                let d = self.nodes[x.0].shape[1];
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for j in 0..d {
                        gx[i * d + j] += g[r * d + j];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::SelectCols { x, idx } => {
                let (m, n) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                let k = idx.len();
                let mut gx = vec![0.0; m * n];
                for i in 0..m {
                    for (c, &j) in idx.iter().enumerate() {
                        gx[i * n + j] += g[i * k + c];
                    }
                }
                self.accumulate(grads, *x, gx);
            }
            Op::ConcatCols(a, b) => {
                let m = node.shape[0];
                let na = self.nodes[a.0].shape[1];
                let nb = self.nodes[b.0].shape[1];
                let w = na + nb;
                let mut ga = Vec::with_capacity(m * na);
                let mut gb = Vec::with_capacity(m * nb);
                for i in 0..m {
                    ga.extend_from_slice(&g[i * w..i * w + na]);
                    gb.extend_from_slice(&g[i * w + na..(i + 1) * w]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::Gather { x, idx } => {
                let mut gx = vec![0.0; self.nodes[x.0].value.len()];
                for (r, &i) in idx.iter().enumerate() {
                    gx[i] += g[r];
                }
                self.accumulate(grads, *x, gx);
            }
            Op::AddRow(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                if self.rg(*b) {
                    let n = node.shape[1];
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        gb.iter_mut().zip(row).for_each(|(o, v)| *o += v);
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let c = self.nodes[logits.0].shape[1];
                let m = labels.len() as f64;
                let mut gz: Vec<f64> = probs.iter().map(|p| p * g[0] / m).collect();
                for (i, &y) in labels.iter().enumerate() {
                    gz[i * c + y] -= g[0] / m;
                }
                self.accumulate(grads, *logits, gz);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn var(tape: &mut Tape, shape: Vec<usize>, data: Vec<f64>) -> Var {
        tape.leaf(&Tensor::new(shape, data).unwrap().with_requires_grad(true))
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::new();
        let i = var(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]);
        let v = var(&mut t, vec![2, 1], vec![3.0, 4.0]);
        let y = t.matmul(i, v).unwrap();
        assert_eq!(t.value(y), &[3.0, 4.0]);

        let a = var(&mut t, vec![1, 2], vec![1.0, 2.0]);
        let y = t.matmul(a, v).unwrap();
        assert_eq!(t.value(y), &[11.0]);

        let z = var(&mut t, vec![2, 2], vec![0.0; 4]);
        let y = t.matmul(z, v).unwrap();
        assert_eq!(t.value(y), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::new();
        let a = var(&mut t, vec![2, 3], vec![0.0; 6]);
        let b = var(&mut t, vec![2, 3], vec![0.0; 6]);
        let msg = t.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn normalize_rows_values_and_degenerate_row() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![1, 2], vec![3.0, 4.0]);
        let y = t.l2_normalize_rows(x).unwrap();
        assert!((t.value(y)[0] - 0.6).abs() < 1e-15 && (t.value(y)[1] - 0.8).abs() < 1e-15);

        let x = var(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 2.0]);
        let y = t.l2_normalize_rows(x).unwrap();
        assert_eq!(t.value(y), &[1.0, 0.0, 0.0, 1.0]);

        let x = var(&mut t, vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]);
        match t.l2_normalize_rows(x) {
            Err(Error::Degenerate { index: 1, .. }) => {}
            other => panic!("expected degenerate row 1, got {other:?}"),
        }
    }

    #[test]
    fn elementwise_definitions() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![3], vec![-1.0, 0.0, 2.0]);
        let r = t.relu(x);
        assert_eq!(t.value(r), &[0.0, 0.0, 2.0]);

        let one = var(&mut t, vec![1], vec![1.0]);
        let l = t.log(one).unwrap();
        assert_eq!(t.value(l), &[0.0]);

        assert!(matches!(t.log(x), Err(Error::Domain { .. })));

        let z = var(&mut t, vec![1], vec![0.0]);
        let e = t.exp(z);
        let s = t.sum(e);
        assert_eq!(t.backward(s).unwrap().get(z), vec![1.0]);
    }

    #[test]
    fn unsupported_broadcast_is_a_shape_error() {
        let mut t = Tape::new();
        let a = var(&mut t, vec![2], vec![1.0, 2.0]);
        let b = var(&mut t, vec![3], vec![1.0, 2.0, 3.0]);
        assert!(matches!(t.add(a, b), Err(Error::Shape { .. })));
    }

    #[test]
    fn backward_sum_and_square() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![3], vec![1.0, -2.0, 5.0]);
        let s = t.sum(x);
        assert_eq!(t.backward(s).unwrap().get(x), vec![1.0, 1.0, 1.0]);

        let mut t = Tape::new();
        let x = var(&mut t, vec![], vec![3.0]);
        let y = t.mul(x, x).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x), vec![6.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![2], vec![1.0, 2.0]);
        assert!(matches!(t.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unreachable_leaves_get_zero_grad() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![2], vec![1.0, 2.0]);
        let unused = var(&mut t, vec![2], vec![1.0, 2.0]);
        let s = t.sum(x);
        let g = t.backward(s).unwrap();
        assert_eq!(g.get(unused), vec![0.0, 0.0]);
    }

    #[test]
    fn shared_input_accumulates() {
        // y = sum(x*c1) + sum(x*c2): grad is c1 + c2
        let mut t = Tape::new();
        let x = var(&mut t, vec![2], vec![1.0, 2.0]);
        let c1 = t.constant(&Tensor::new(vec![2], vec![3.0, 4.0]).unwrap());
        let c2 = t.constant(&Tensor::new(vec![2], vec![-1.0, 0.5]).unwrap());
        let a = t.mul(x, c1).unwrap();
        let b = t.mul(x, c2).unwrap();
        let sa = t.sum(a);
        let sb = t.sum(b);
        let y = t.add(sa, sb).unwrap();
        assert_eq!(t.backward(y).unwrap().get(x), vec![2.0, 4.5]);
    }

    #[test]
    fn clamp_blocks_gradient_outside_range() {
        let mut t = Tape::new();
        let x = var(&mut t, vec![3], vec![-0.5, 0.25, 2.0]);
        let c = t.clamp(x, 0.0, 1.0);
        let s = t.sum(c);
        assert_eq!(t.backward(s).unwrap().get(x), vec![0.0, 1.0, 0.0]);
    }

    #[test]
    fn cross_entropy_symmetric_tie_is_log2() {
        let mut t = Tape::new();
        let z = var(&mut t, vec![1, 2], vec![0.3, 0.3]);
        let l = t.cross_entropy(z, &[1]).unwrap();
        assert!((t.scalar_value(l) - 2f64.ln()).abs() < 1e-15);
        assert!(t.cross_entropy(z, &[2]).is_err());
    }
}

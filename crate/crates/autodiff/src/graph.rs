//! Dynamic computation graph.
//!
//! Every op evaluates eagerly and appends a node holding its forward value,
//! so node order is a topological order by construction. `backward` walks the
//! nodes once in reverse.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{AutodiffError, Result};
use crate::tensor::Tensor;

/// Lower clamp applied to the input of `log`.
pub const LOG_INPUT_FLOOR: f64 = 1e-300;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifies a trainable parameter across graphs.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// Flat gather table. `None` entries produce zeros (used for padding).
pub type GatherIndex = Arc<[Option<usize>]>;

#[derive(Clone, Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBias(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Matmul(Var, Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Sigmoid(Var),
    Square(Var),
    SoftmaxLast(Var),
    LogSoftmaxLast(Var),
    Sum(Var),
    SumLast(Var),
    MaxScalar(Var, f64),
    Gather(Var, GatherIndex),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
}

/// Single-owner computation graph, rebuilt for every forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of a scalar root with respect to every parameter in the graph.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    grads: BTreeMap<ParamId, Tensor>,
}

impl Gradients {
    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(&id)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ParamId, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    /// Adds `other` into `self` elementwise, inserting missing entries.
    pub fn accumulate(&mut self, other: &Gradients) {
        for (id, g) in &other.grads {
            match self.grads.get_mut(id) {
                Some(acc) => {
                    for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += *b;
                    }
                }
                None => {
                    self.grads.insert(*id, g.clone());
                }
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for g in self.grads.values_mut() {
            for v in g.data_mut() {
                *v *= factor;
            }
        }
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(AutodiffError::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        });
    }
    Ok(())
}

fn map(t: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    let data = t.data().iter().map(|&v| f(v)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// `out[m×n] = a[m×k] · b[k×n]`
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = (v - max).exp();
            total += *oi;
        }
        for oi in o.iter_mut() {
            *oi /= total;
        }
    }
    out
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for (row, o) in x.chunks(width).zip(out.chunks_mut(width)) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln();
        for (oi, &v) in o.iter_mut().zip(row) {
            *oi = v - lse;
        }
    }
    out
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, op: Op, value: Tensor, name: &'static str) -> Result<Var> {
        if !value.is_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node { op, value });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Leaf that receives no gradient.
    pub fn constant(&mut self, t: Tensor) -> Result<Var> {
        self.push(Op::Constant, t, "constant")
    }

    /// Leaf whose gradient is reported under `id`.
    pub fn param(&mut self, id: ParamId, t: Tensor) -> Result<Var> {
        self.push(Op::Param(id), t, "param")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("add", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x + y);
        self.push(Op::Add(a, b), out, "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("sub", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x - y);
        self.push(Op::Sub(a, b), out, "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("mul", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x * y);
        self.push(Op::Mul(a, b), out, "mul")
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        same_shape("div", ta, tb)?;
        let out = zip_map(ta, tb, |x, y| x / y);
        self.push(Op::Div(a, b), out, "div")
    }

    /// Adds a row vector `bias[n]` to every row of `x[.., n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.shape().len() != 1 || tx.last_dim() != tb.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_bias",
                lhs: tx.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let n = tb.len();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (v, b) in row.iter_mut().zip(tb.data()) {
                *v += *b;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(Op::AddBias(x, bias), out, "add_bias")
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let out = map(self.value(x), |v| v * factor);
        self.push(Op::Scale(x, factor), out, "scale")
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.scale(x, -1.0)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = map(self.value(x), |v| v + c);
        self.push(Op::AddScalar(x), out, "add_scalar")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape().len() != 2 || tb.shape().len() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        self.push(Op::Matmul(a, b), out, "matmul")
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), f64::exp);
        self.push(Op::Exp(x), out, "exp")
    }

    /// Natural log of the input clamped below at [`LOG_INPUT_FLOOR`].
    pub fn log(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| v.max(LOG_INPUT_FLOOR).ln());
        self.push(Op::Log(x), out, "log")
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), f64::sqrt);
        self.push(Op::Sqrt(x), out, "sqrt")
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), sigmoid);
        self.push(Op::Sigmoid(x), out, "sigmoid")
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        let out = map(self.value(x), |v| v * v);
        self.push(Op::Square(x), out, "square")
    }

    /// Max-subtracted softmax over the last dimension.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), softmax_rows(t.data(), t.last_dim()))?;
        self.push(Op::SoftmaxLast(x), out, "softmax_lastdim")
    }

    pub fn log_softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::new(t.shape().to_vec(), log_softmax_rows(t.data(), t.last_dim()))?;
        self.push(Op::LogSoftmaxLast(x), out, "log_softmax_lastdim")
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Op::Sum(x), Tensor::scalar(s), "sum")
    }

    /// Sums the last dimension away.
    pub fn sum_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let w = t.last_dim();
        let data: Vec<f64> = t.data().chunks(w).map(|r| r.iter().sum()).collect();
        let shape = t.shape()[..t.shape().len().saturating_sub(1)].to_vec();
        let out = Tensor::new(shape, data)?;
        self.push(Op::SumLast(x), out, "sum_lastdim")
    }

    /// Elementwise `max(x, c)`; the gradient flows only where `x > c`.
    pub fn max_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let out = map(self.value(x), |v| v.max(c));
        self.push(Op::MaxScalar(x, c), out, "max")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.max_scalar(x, 0.0)
    }

    /// `out.flat[i] = x.flat[index[i]]`, or 0 where the index is `None`.
    pub fn gather(&mut self, x: Var, index: GatherIndex, shape: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n: usize = shape.iter().product();
        if n != index.len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "gather",
                lhs: vec![index.len()],
                rhs: shape.to_vec(),
            });
        }
        let src = t.data();
        let mut data = Vec::with_capacity(n);
        for idx in index.iter() {
            match *idx {
                Some(i) if i >= src.len() => {
                    return Err(AutodiffError::IndexOutOfRange {
                        index: i,
                        len: src.len(),
                    })
                }
                Some(i) => data.push(src[i]),
                None => data.push(0.0),
            }
        }
        let out = Tensor::new(shape.to_vec(), data)?;
        self.push(Op::Gather(x, index), out, "gather")
    }

    /// Convenience wrapper for gathering with plain indices.
    pub fn select(&mut self, x: Var, index: &[usize], shape: &[usize]) -> Result<Var> {
        let idx: GatherIndex = index.iter().map(|&i| Some(i)).collect();
        self.gather(x, idx, shape)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        self.push(Op::Reshape(x), out, "reshape")
    }

    /// Reverse sweep from a single-element `root`.
    ///
    /// Parameters present in the graph but not reachable from `root` receive
    /// zero gradients.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(AutodiffError::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Constant => {}
                Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g * y).collect();
                    let gb: Vec<f64> = g.iter().zip(va).map(|(g, x)| g * x).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = g.iter().zip(vb).map(|(g, y)| g / y).collect();
                    let gb: Vec<f64> = g
                        .iter()
                        .zip(va.iter().zip(vb))
                        .map(|(g, (x, y))| -g * x / (y * y))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddBias(x, bias) => {
                    let n = self.value(*bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += *v;
                        }
                    }
                    accumulate(&mut grads, *x, &g);
                    accumulate(&mut grads, *bias, &gb);
                }
                Op::Scale(x, f) => {
                    let gx: Vec<f64> = g.iter().map(|v| v * f).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::AddScalar(x) | Op::Reshape(x) => accumulate(&mut grads, *x, &g),
                Op::Matmul(a, b) => {
                    let (ta, tb) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                    // dA = dC · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    // dB = Aᵀ · dC
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &g[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            if av == 0.0 {
                                continue;
                            }
                            for (o, gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::Exp(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Log(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| if *x > LOG_INPUT_FLOOR { g / x } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sqrt(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g / (2.0 * y)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sigmoid(x) => {
                    let y = node.value.data();
                    let gx: Vec<f64> = g.iter().zip(y).map(|(g, y)| g * y * (1.0 - y)).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Square(x) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g.iter().zip(xv).map(|(g, x)| 2.0 * g * x).collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::SoftmaxLast(x) => {
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = yv * (gv - dot);
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::LogSoftmaxLast(x) => {
                    let y = node.value.data();
                    let w = node.value.last_dim();
                    let mut gx = vec![0.0; y.len()];
                    for ((yr, gr), out) in y.chunks(w).zip(g.chunks(w)).zip(gx.chunks_mut(w)) {
                        let total: f64 = gr.iter().sum();
                        for ((o, yv), gv) in out.iter_mut().zip(yr).zip(gr) {
                            *o = gv - yv.exp() * total;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut grads, *x, &vec![g[0]; n]);
                }
                Op::SumLast(x) => {
                    let tx = self.value(*x);
                    let w = tx.last_dim();
                    let mut gx = vec![0.0; tx.len()];
                    for (row, gv) in gx.chunks_mut(w).zip(&g) {
                        row.fill(*gv);
                    }
                    accumulate(&mut grads, *x, &gx);
                }
                Op::MaxScalar(x, c) => {
                    let xv = self.value(*x).data();
                    let gx: Vec<f64> = g
                        .iter()
                        .zip(xv)
                        .map(|(g, x)| if x > c { *g } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, &gx);
                }
                Op::Gather(x, index) => {
                    let mut gx = vec![0.0; self.value(*x).len()];
                    for (gv, idx) in g.iter().zip(index.iter()) {
                        if let Some(i) = idx {
                            gx[*i] += gv;
                        }
                    }
                    accumulate(&mut grads, *x, &gx);
                }
            }
        }

        let mut out = Gradients::default();
        for (idx, node) in self.nodes.iter().enumerate() {
            if let Op::Param(id) = node.op {
                let g = match grads.get_mut(idx).and_then(Option::take) {
                    Some(g) => Tensor::new(node.value.shape().to_vec(), g)?,
                    None => Tensor::zeros(node.value.shape()),
                };
                match out.grads.get_mut(&id) {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                            *a += *b;
                        }
                    }
                    None => {
                        out.grads.insert(id, g);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], target: Var, g: &[f64]) {
    match &mut grads[target.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += *b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

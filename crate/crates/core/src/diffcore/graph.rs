use std::collections::HashMap;

use super::params::{ParamId, ParamStore};
use super::rng::RngStream;
use super::tensor::{matmul_a_bt_into, matmul_at_b_into, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
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
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Tensor),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    Softplus(Var),
    Exp(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    AddN(Vec<Var>),
    SoftmaxRows(Var),
    RepeatRows(Var, usize),
    SumRowBlocks(Var),
    Reshape(Var),
    Transpose(Var),
    Reparam {
        mu: Var,
        sigma: Var,
        eps: Tensor,
    },
    Bce {
        p: Var,
        targets: Vec<f64>,
        weights: Vec<f64>,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Tape of tensor operations for one forward/backward pass.
///
/// Nodes are appended in evaluation order, so the tape is already a
/// topological order and backward is a single reverse sweep. Parameters are
/// read from an attached [`ParamStore`]; each parameter gets one node per
/// graph, which makes repeated uses accumulate their gradients.
pub struct Graph<'s> {
    nodes: Vec<Node>,
    store: Option<&'s ParamStore>,
    param_vars: HashMap<ParamId, Var>,
    grads: Vec<Option<Tensor>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` as `max(x, 0) + ln(1 + e^(−|x|))`.
pub(crate) fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn leaky_relu(x: f64, slope: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        slope * x
    }
}

fn same_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Dimension {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

impl<'s> Graph<'s> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            store: None,
            param_vars: HashMap::new(),
            grads: Vec::new(),
        }
    }

    pub fn with_params(store: &'s ParamStore) -> Self {
        Graph {
            store: Some(store),
            ..Self::new()
        }
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

    pub fn shape(&self, v: Var) -> [usize; 2] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Node for a stored parameter; created on first use.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let store = self.store.expect("graph has no attached parameter store");
        let v = self.push(store.value(id).clone(), Op::Param, true);
        self.param_vars.insert(id, v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.cols() != vb.rows() {
            return Err(Error::Dimension {
                op: "matmul",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let out = va.matmul(vb)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::MatMul(a, b), rg))
    }

    fn zip(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (va, vb) = (self.value(a), self.value(b));
        same_shape(op, va, vb)?;
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(va.rows(), va.cols(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// `a + b` with the `1×c` row `b` added to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.rows() != 1 || vb.cols() != va.cols() {
            return Err(Error::Dimension {
                op: "add_row",
                left: va.shape(),
                right: vb.shape(),
            });
        }
        let c = va.cols();
        let mut out = va.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x += vb.data()[i % c];
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::AddRow(a, b), rg))
    }

    /// Multiplies row `r` of `a` by `s[r]`, with `s` an `r×1` column.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (va, vs) = (self.value(a), self.value(s));
        if vs.cols() != 1 || vs.rows() != va.rows() {
            return Err(Error::Dimension {
                op: "scale_rows",
                left: va.shape(),
                right: vs.shape(),
            });
        }
        let c = va.cols();
        let mut out = va.clone();
        for (i, x) in out.data_mut().iter_mut().enumerate() {
            *x *= vs.data()[i / c.max(1)];
        }
        let rg = self.rg(a) || self.rg(s);
        Ok(self.push(out, Op::ScaleRows(a, s), rg))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a).map(|x| k * x);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    /// Elementwise product with a constant tensor.
    pub fn mul_const(&mut self, a: Var, c: Tensor) -> Result<Var> {
        let va = self.value(a);
        same_shape("mul_const", va, &c)?;
        let data = va.data().iter().zip(c.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(va.rows(), va.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, c), rg))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, |x| leaky_relu(x, slope), Op::LeakyRelu(a, slope))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, softplus, Op::Softplus(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, f64::exp, Op::Exp(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, |x| x * x, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let out = Tensor::scalar(v.sum() / v.len().max(1) as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let rows = self.value(*first).rows();
        let mut cols = 0;
        for &p in parts {
            let v = self.value(p);
            if v.rows() != rows {
                return Err(Error::Dimension {
                    op: "concat_cols",
                    left: self.value(*first).shape(),
                    right: v.shape(),
                });
            }
            cols += v.cols();
        }
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row_slice(r));
            }
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::config("concat of zero tensors"))?;
        let cols = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let v = self.value(p);
            if v.cols() != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    left: self.value(*first).shape(),
                    right: v.shape(),
                });
            }
            rows += v.rows();
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(rows, cols, data)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_rows(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows(a, start), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let out = self.value(a).slice_cols(start, len)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols(a, start), rg))
    }

    /// Sum of same-shaped tensors, accumulated left to right.
    pub fn add_n(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::config("sum of zero tensors"))?;
        let mut out = self.value(*first).clone();
        for &p in &parts[1..] {
            same_shape("add_n", &out, self.value(p))?;
            out.add_assign(self.value(p));
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::AddN(parts.to_vec()), rg))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let c = v.cols();
        let mut out = v.clone();
        for r in out.data_mut().chunks_mut(c.max(1)) {
            let m = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in r.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in r.iter_mut() {
                *x /= z;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Stacks `n` copies of `a` along the rows.
    pub fn repeat_rows(&mut self, a: Var, n: usize) -> Result<Var> {
        if n == 0 {
            return Err(Error::config("repeat_rows with zero copies"));
        }
        let v = self.value(a);
        let mut data = Vec::with_capacity(v.len() * n);
        for _ in 0..n {
            data.extend_from_slice(v.data());
        }
        let out = Tensor::new(v.rows() * n, v.cols(), data)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::RepeatRows(a, n), rg))
    }

    /// Sums consecutive blocks of `block` rows: `(n·block)×c → block×c`.
    pub fn sum_row_blocks(&mut self, a: Var, block: usize) -> Result<Var> {
        let v = self.value(a);
        if block == 0 || !v.rows().is_multiple_of(block) {
            return Err(Error::Dimension {
                op: "sum_row_blocks",
                left: v.shape(),
                right: [block, v.cols()],
            });
        }
        let w = block * v.cols();
        let mut out = Tensor::zeros(block, v.cols());
        for chunk in v.data().chunks(w.max(1)) {
            for (o, x) in out.data_mut().iter_mut().zip(chunk) {
                *o += x;
            }
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SumRowBlocks(a), rg))
    }

    /// Row-major reinterpretation with a new shape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = Tensor::new(rows, cols, self.value(a).data().to_vec())?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    /// Inverted dropout. With `active == false` or `rate == 0` the input is
    /// returned unchanged.
    pub fn dropout(&mut self, a: Var, rate: f64, rng: &mut RngStream, active: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::config(format!("dropout rate {rate} outside [0, 1)")));
        }
        if !active || rate == 0.0 {
            return Ok(a);
        }
        let [r, c] = self.shape(a);
        let keep = 1.0 - rate;
        let mask = (0..r * c)
            .map(|_| if rng.uniform() < rate { 0.0 } else { 1.0 / keep })
            .collect();
        self.mul_const(a, Tensor::new(r, c, mask)?)
    }

    /// `μ + σ ⊙ ε` with `ε ~ N(0, 1)` drawn from `rng`.
    pub fn gaussian_sample(&mut self, mu: Var, sigma: Var, rng: &mut RngStream) -> Result<Var> {
        let [r, c] = self.shape(mu);
        let eps = Tensor::new(r, c, (0..r * c).map(|_| rng.normal()).collect())?;
        self.reparameterize(mu, sigma, eps)
    }

    /// `μ + σ ⊙ ε` for a given noise tensor.
    pub fn reparameterize(&mut self, mu: Var, sigma: Var, eps: Tensor) -> Result<Var> {
        let (vm, vs) = (self.value(mu), self.value(sigma));
        same_shape("reparameterize", vm, vs)?;
        same_shape("reparameterize", vm, &eps)?;
        let data = vm
            .data()
            .iter()
            .zip(vs.data())
            .zip(eps.data())
            .map(|((m, s), e)| m + s * e)
            .collect();
        let out = Tensor::new(vm.rows(), vm.cols(), data)?;
        let rg = self.rg(mu) || self.rg(sigma);
        Ok(self.push(out, Op::Reparam { mu, sigma, eps }, rg))
    }

    /// `−Σᵣ wᵣ [yᵣ ln p̃ᵣ + (1 − yᵣ) ln(1 − p̃ᵣ)]` with `p̃ = clamp(p, ε, 1 − ε)`.
    ///
    /// `p` is an `n×1` column. Rows with zero weight contribute nothing to the
    /// value or the gradient.
    pub fn binary_cross_entropy(&mut self, p: Var, targets: &[f64], weights: &[f64], eps: f64) -> Result<Var> {
        let vp = self.value(p);
        if vp.cols() != 1 || vp.rows() != targets.len() || targets.len() != weights.len() {
            return Err(Error::Dimension {
                op: "binary_cross_entropy",
                left: vp.shape(),
                right: [targets.len(), weights.len()],
            });
        }
        let mut total = 0.0;
        for ((&pv, &y), &w) in vp.data().iter().zip(targets).zip(weights) {
            if w == 0.0 {
                continue;
            }
            let pc = pv.clamp(eps, 1.0 - eps);
            total -= w * (y * pc.ln() + (1.0 - y) * (1.0 - pc).ln());
        }
        let rg = self.rg(p);
        Ok(self.push(
            Tensor::scalar(total),
            Op::Bce {
                p,
                targets: targets.to_vec(),
                weights: weights.to_vec(),
                eps,
            },
            rg,
        ))
    }

    /// Reverse sweep from a `1×1` node.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.shape(loss) != [1, 1] {
            return Err(Error::Dimension {
                op: "backward",
                left: self.shape(loss),
                right: [1, 1],
            });
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        if !self.rg(loss) {
            return Ok(());
        }
        self.grads[loss.0] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss.0).rev() {
            let Some(g) = self.grads[idx].take() else {
                continue;
            };
            self.propagate(idx, &g)?;
            self.grads[idx] = Some(g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contribution: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(g) => g.add_assign(&contribution),
            slot @ None => *slot = Some(contribution),
        }
    }

    fn accumulate_with(&mut self, v: Var, f: impl FnOnce(&mut Tensor)) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let shape = self.shape(v);
        let slot = self.grads[v.0].get_or_insert_with(|| Tensor::zeros(shape[0], shape[1]));
        f(slot);
    }

    fn propagate(&mut self, idx: usize, g: &Tensor) -> Result<()> {
        // Ops are matched by reference; the parent handles are Copy.
        let node = &self.nodes[idx];
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let [m, n] = self.shape(a);
                let p = self.shape(b)[1];
                if self.rg(a) {
                    let vb = self.value(b).data().to_vec();
                    self.accumulate_with(a, |ga| matmul_a_bt_into(g.data(), &vb, ga.data_mut(), m, n, p));
                }
                if self.rg(b) {
                    let va = self.value(a).data().to_vec();
                    self.accumulate_with(b, |gb| matmul_at_b_into(&va, g.data(), gb.data_mut(), m, n, p));
                }
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.clone());
            }
            Op::Sub(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                self.accumulate(b, g.map(|x| -x));
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let ga = hadamard(g, self.value(b));
                let gb = hadamard(g, self.value(a));
                self.accumulate(a, ga);
                self.accumulate(b, gb);
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate(a, g.clone());
                let c = g.cols();
                let mut gb = Tensor::zeros(1, c);
                for (i, &x) in g.data().iter().enumerate() {
                    gb.data_mut()[i % c] += x;
                }
                self.accumulate(b, gb);
            }
            Op::ScaleRows(a, s) => {
                let (a, s) = (*a, *s);
                let c = g.cols().max(1);
                let vs = self.value(s);
                let va = self.value(a);
                let mut ga = g.clone();
                let mut gs = Tensor::zeros(vs.rows(), 1);
                for (i, x) in ga.data_mut().iter_mut().enumerate() {
                    let r = i / c;
                    gs.data_mut()[r] += *x * va.data()[i];
                    *x *= vs.data()[r];
                }
                self.accumulate(a, ga);
                self.accumulate(s, gs);
            }
            Op::Scale(a, k) => {
                let (a, k) = (*a, *k);
                self.accumulate(a, g.map(|x| k * x));
            }
            Op::MulConst(a, c) => {
                let a = *a;
                let ga = hadamard(g, c);
                self.accumulate(a, ga);
            }
            Op::Tanh(a) => {
                let a = *a;
                let y = &node.value;
                let ga = zip_map(g, y, |gi, yi| gi * (1.0 - yi * yi));
                self.accumulate(a, ga);
            }
            Op::Sigmoid(a) => {
                let a = *a;
                let y = &node.value;
                let ga = zip_map(g, y, |gi, yi| gi * yi * (1.0 - yi));
                self.accumulate(a, ga);
            }
            Op::LeakyRelu(a, slope) => {
                let (a, slope) = (*a, *slope);
                let ga = zip_map(g, self.value(a), |gi, xi| if xi >= 0.0 { gi } else { gi * slope });
                self.accumulate(a, ga);
            }
            Op::Softplus(a) => {
                let a = *a;
                let ga = zip_map(g, self.value(a), |gi, xi| gi * sigmoid(xi));
                self.accumulate(a, ga);
            }
            Op::Exp(a) => {
                let a = *a;
                let ga = zip_map(g, &node.value, |gi, yi| gi * yi);
                self.accumulate(a, ga);
            }
            Op::Square(a) => {
                let a = *a;
                let ga = zip_map(g, self.value(a), |gi, xi| 2.0 * gi * xi);
                self.accumulate(a, ga);
            }
            Op::Sum(a) => {
                let a = *a;
                let [r, c] = self.shape(a);
                self.accumulate(a, Tensor::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let a = *a;
                let [r, c] = self.shape(a);
                let n = (r * c).max(1) as f64;
                self.accumulate(a, Tensor::filled(r, c, g.item() / n));
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let w = self.shape(p)[1];
                    if self.rg(p) {
                        let gp = g.slice_cols(start, w)?;
                        self.accumulate(p, gp);
                    }
                    start += w;
                }
            }
            Op::ConcatRows(parts) => {
                let parts = parts.clone();
                let mut start = 0;
                for p in parts {
                    let h = self.shape(p)[0];
                    if self.rg(p) {
                        let gp = g.slice_rows(start, h)?;
                        self.accumulate(p, gp);
                    }
                    start += h;
                }
            }
            Op::SliceRows(a, start) => {
                let (a, start) = (*a, *start);
                let c = g.cols();
                self.accumulate_with(a, |ga| {
                    let dst = &mut ga.data_mut()[start * c..start * c + g.len()];
                    for (d, s) in dst.iter_mut().zip(g.data()) {
                        *d += s;
                    }
                });
            }
            Op::SliceCols(a, start) => {
                let (a, start) = (*a, *start);
                let w = g.cols();
                let full = self.shape(a)[1];
                self.accumulate_with(a, |ga| {
                    for r in 0..g.rows() {
                        let dst = &mut ga.data_mut()[r * full + start..r * full + start + w];
                        for (d, s) in dst.iter_mut().zip(g.row_slice(r)) {
                            *d += s;
                        }
                    }
                });
            }
            Op::AddN(parts) => {
                let parts = parts.clone();
                for p in parts {
                    self.accumulate(p, g.clone());
                }
            }
            Op::SoftmaxRows(a) => {
                let a = *a;
                let y = &node.value;
                let c = y.cols().max(1);
                let mut ga = Tensor::zeros(y.rows(), y.cols());
                for r in 0..y.rows() {
                    let yr = &y.data()[r * c..(r + 1) * c];
                    let gr = &g.data()[r * c..(r + 1) * c];
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for i in 0..c {
                        ga.data_mut()[r * c + i] = yr[i] * (gr[i] - dot);
                    }
                }
                self.accumulate(a, ga);
            }
            Op::RepeatRows(a, n) => {
                let (a, n) = (*a, *n);
                let w = g.len() / n;
                self.accumulate_with(a, |ga| {
                    for chunk in g.data().chunks(w.max(1)) {
                        for (d, s) in ga.data_mut().iter_mut().zip(chunk) {
                            *d += s;
                        }
                    }
                });
            }
            Op::SumRowBlocks(a) => {
                let a = *a;
                let n = self.shape(a)[0] / g.rows().max(1);
                let ga = Tensor::new(g.rows() * n, g.cols(), g.data().repeat(n))?;
                self.accumulate(a, ga);
            }
            Op::Reshape(a) => {
                let a = *a;
                let [r, c] = self.shape(a);
                self.accumulate(a, Tensor::new(r, c, g.data().to_vec())?);
            }
            Op::Transpose(a) => {
                let a = *a;
                self.accumulate(a, g.transpose());
            }
            Op::Reparam { mu, sigma, eps } => {
                let (mu, sigma) = (*mu, *sigma);
                let gs = hadamard(g, eps);
                self.accumulate(mu, g.clone());
                self.accumulate(sigma, gs);
            }
            Op::Bce {
                p,
                targets,
                weights,
                eps,
            } => {
                let p = *p;
                let scale = g.item();
                let vp = self.value(p);
                let data = vp
                    .data()
                    .iter()
                    .zip(targets)
                    .zip(weights)
                    .map(|((&pv, &y), &w)| {
                        if w == 0.0 || pv <= *eps || pv >= 1.0 - *eps {
                            0.0
                        } else {
                            -scale * w * (y / pv - (1.0 - y) / (1.0 - pv))
                        }
                    })
                    .collect();
                let gp = Tensor::new(vp.rows(), 1, data)?;
                self.accumulate(p, gp);
            }
        }
        Ok(())
    }

    /// Gradient of the last backward pass with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Gradients for every parameter touched by this graph. Parameters that
    /// took part in the forward pass but received no signal get zeros.
    /// Gradient of one parameter after [`Graph::backward`]; zeros when the
    /// parameter took no part in the loss.
    pub fn param_grad(&self, id: ParamId) -> Tensor {
        if let Some(g) = self.param_vars.get(&id).and_then(|&v| self.grad(v)) {
            return g.clone();
        }
        let [r, c] = match self.param_vars.get(&id) {
            Some(&v) => self.shape(v),
            None => self
                .store
                .expect("graph has no attached parameter store")
                .value(id)
                .shape(),
        };
        Tensor::zeros(r, c)
    }

    pub fn param_grads(&self) -> Vec<(ParamId, Tensor)> {
        let mut out: Vec<_> = self
            .param_vars
            .iter()
            .map(|(&id, &v)| {
                let g = self.grad(v).cloned().unwrap_or_else(|| {
                    let [r, c] = self.shape(v);
                    Tensor::zeros(r, c)
                });
                (id, g)
            })
            .collect();
        out.sort_by_key(|(id, _)| *id);
        out
    }
}

fn hadamard(a: &Tensor, b: &Tensor) -> Tensor {
    zip_map(a, b, |x, y| x * y)
}

fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.rows(), a.cols(), data).expect("shapes checked at construction")
}

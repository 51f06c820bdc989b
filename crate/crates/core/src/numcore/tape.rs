//! Reverse-mode differentiation over a linear record of ops.
//!
//! Every op appends one node holding its forward value, so the node list is
//! already in topological order and backward is a single reverse sweep.

use std::collections::BTreeMap;
use std::str::FromStr;

use super::array::{self, Array};
use super::params::{GradientMap, ParameterStore, Partition};
use crate::error::{Error, Result};

/// Floor applied to the second argument of [`Tape::kl_divergence`].
pub const KL_EPS: f64 = 1e-10;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    Tanh,
    Linear,
}

impl Activation {
    fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Relu => x.max(0.0),
            Activation::Sigmoid => 1.0 / (1.0 + (-x).exp()),
            Activation::Tanh => x.tanh(),
            Activation::Linear => x,
        }
    }

    /// Derivative expressed through the input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            // subgradient 0 at the kink
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Sigmoid => y * (1.0 - y),
            Activation::Tanh => 1.0 - y * y,
            Activation::Linear => 1.0,
        }
    }
}

impl FromStr for Activation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "linear" | "identity" => Ok(Activation::Linear),
            other => Err(Error::Config(format!("unknown activation `{other}`"))),
        }
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: f64 },
    Act(Var, Activation),
    Softmax(Var),
    Concat(Var, Var),
    Slice { x: Var, start: usize },
    L2Distance(Var, Var),
    Kl { p: Var, q: Var },
    Gather { table: Var, row: usize },
    Stack(Vec<Var>),
    Row { x: Var, row: usize },
    Sum(Var),
    Sharpen(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Array,
    op: Op,
    requires_grad: bool,
}

/// Computation record for one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Names bound onto a tape, so model code can look parameters up by name.
#[derive(Clone, Debug, Default)]
pub struct Bindings {
    vars: BTreeMap<String, Var>,
}

impl Bindings {
    pub fn get(&self, name: &str) -> Result<Var> {
        self.vars
            .get(name)
            .copied()
            .ok_or_else(|| Error::Config(format!("parameter `{name}` is not bound")))
    }

    pub fn contains(&self, name: &str) -> bool {
        self.vars.contains_key(name)
    }

    pub fn insert(&mut self, name: impl Into<String>, var: Var) {
        self.vars.insert(name.into(), var);
    }

    /// Entries of `other` shadow entries of `self`.
    pub fn merged(&self, other: &Bindings) -> Bindings {
        let mut vars = self.vars.clone();
        vars.extend(other.vars.iter().map(|(k, v)| (k.clone(), *v)));
        Bindings { vars }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Var)> {
        self.vars.iter()
    }

    /// Gathers gradients for every bound name; untouched names get zeros.
    pub fn collect(&self, tape: &Tape, grads: &Gradients) -> GradientMap {
        let mut out = GradientMap::new();
        for (name, &var) in &self.vars {
            let g = grads
                .get(var)
                .cloned()
                .unwrap_or_else(|| Array::zeros(tape.value(var).shape()));
            out.insert(name.clone(), g);
        }
        out
    }
}

/// Leaf gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

fn dim_err(op: &str, a: &Array, b: &Array) -> Error {
    Error::Dimension(format!("{op} of {:?} and {:?}", a.shape(), b.shape()))
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

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Array, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Array, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array) -> Var {
        self.leaf(value, false)
    }

    /// Copy of `v` that gradients do not flow through.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    /// Binds every entry of `store` as a leaf; `trainable` decides which
    /// ones record gradients.
    pub fn bind(
        &mut self,
        store: &ParameterStore,
        trainable: impl Fn(&str, Partition) -> bool,
    ) -> Bindings {
        let mut b = Bindings::default();
        for (name, p) in store.iter() {
            let var = self.leaf(p.value.clone(), trainable(name, p.partition));
            b.insert(name.clone(), var);
        }
        b
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = array::matmul(self.value(a), self.value(b))?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    fn zip_same(&self, op: &str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Array> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err(op, x, y));
        }
        let data = x.data().iter().zip(y.data()).map(|(p, q)| f(*p, *q)).collect();
        Array::new(x.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// `scale * x + shift` with constant scale and shift.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let value = self.value(x).map(|v| scale * v + shift);
        let rg = self.rg(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Var {
        let value = self.value(x).map(|v| kind.apply(v));
        let rg = self.rg(&[x]);
        self.push(value, Op::Act(x, kind), rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Tanh)
    }

    /// Softmax of a vector, or of each row of a matrix.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let input = self.value(x);
        if input.is_empty() || input.rank() == 0 || input.cols() == 0 {
            return Err(Error::Domain("softmax of an empty vector".into()));
        }
        if input.rank() > 2 {
            return Err(Error::Dimension(format!(
                "softmax expects rank 1 or 2, got {:?}",
                input.shape()
            )));
        }
        let mut out = input.clone();
        for r in 0..input.rows() {
            let s = array::softmax_slice(input.row(r));
            out.row_mut(r).copy_from_slice(&s);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Softmax(x), rg))
    }

    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() != 1 || y.rank() != 1 {
            return Err(dim_err("concat", x, y));
        }
        let mut data = x.data().to_vec();
        data.extend_from_slice(y.data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::vector(data), Op::Concat(a, b), rg))
    }

    /// Entries `start..start + len` of a vector.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let v = self.value(x);
        if v.rank() != 1 || start + len > v.len() {
            return Err(Error::Dimension(format!(
                "slice {start}..{} of {:?}",
                start + len,
                v.shape()
            )));
        }
        let value = Array::vector(v.data()[start..start + len].to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Slice { x, start }, rg))
    }

    /// Euclidean distance between equally shaped arrays.
    pub fn l2_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(dim_err("l2_distance", x, y));
        }
        let d = array::euclidean(x.data(), y.data());
        let rg = self.rg(&[a, b]);
        Ok(self.push(Array::scalar(d), Op::L2Distance(a, b), rg))
    }

    /// `sum p ln(p / max(q, eps))` with `0 ln 0 = 0`.
    pub fn kl_divergence(&mut self, p: Var, q: Var) -> Result<Var> {
        let (pv, qv) = (self.value(p), self.value(q));
        if pv.shape() != qv.shape() {
            return Err(dim_err("kl_divergence", pv, qv));
        }
        if pv.data().iter().chain(qv.data()).any(|&v| v < 0.0) {
            return Err(Error::Domain("kl_divergence of negative entries".into()));
        }
        let value: f64 = pv
            .data()
            .iter()
            .zip(qv.data())
            .filter(|(pi, _)| **pi > 0.0)
            .map(|(&pi, &qi)| pi * (pi / qi.max(KL_EPS)).ln())
            .sum();
        let rg = self.rg(&[p, q]);
        Ok(self.push(Array::scalar(value), Op::Kl { p, q }, rg))
    }

    /// Row `row` of an embedding table.
    pub fn lookup(&mut self, table: Var, row: usize) -> Result<Var> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::Dimension(format!(
                "lookup needs a matrix table, got {:?}",
                t.shape()
            )));
        }
        if row >= t.rows() {
            return Err(Error::Index(format!(
                "id {row} out of range for table with {} rows",
                t.rows()
            )));
        }
        let value = Array::vector(t.row(row).to_vec());
        let rg = self.rg(&[table]);
        Ok(self.push(value, Op::Gather { table, row }, rg))
    }

    /// Stacks scalars into a vector, or vectors into a matrix.
    pub fn stack(&mut self, items: &[Var]) -> Result<Var> {
        let first = items
            .first()
            .ok_or_else(|| Error::Contract("stack of nothing".into()))?;
        let shape = self.value(*first).shape().to_vec();
        let mut data = Vec::new();
        for v in items {
            let a = self.value(*v);
            if a.shape() != shape.as_slice() {
                return Err(dim_err("stack", self.value(*first), a));
            }
            data.extend_from_slice(a.data());
        }
        let value = match shape.len() {
            0 => Array::vector(data),
            1 => Array::new(vec![items.len(), shape[0]], data)?,
            _ => {
                return Err(Error::Dimension(format!(
                    "stack of rank-{} arrays",
                    shape.len()
                )))
            }
        };
        let rg = self.rg(items);
        Ok(self.push(value, Op::Stack(items.to_vec()), rg))
    }

    /// Row `row` of a matrix as a vector.
    pub fn row(&mut self, x: Var, row: usize) -> Result<Var> {
        let m = self.value(x);
        if m.rank() != 2 || row >= m.rows() {
            return Err(Error::Index(format!("row {row} of {:?}", m.shape())));
        }
        let value = Array::vector(m.row(row).to_vec());
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Row { x, row }, rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Array::scalar(s), Op::Sum(x), rg)
    }

    /// Sum of scalars.
    pub fn add_all(&mut self, items: &[Var]) -> Result<Var> {
        let stacked = self.stack(items)?;
        Ok(self.sum(stacked))
    }

    pub fn mean(&mut self, items: &[Var]) -> Result<Var> {
        let total = self.add_all(items)?;
        Ok(self.affine(total, 1.0 / items.len() as f64, 0.0))
    }

    /// Row-normalized target sharpening of a `B x M` assignment matrix:
    /// `c'_ij ∝ c_ij^2 / f_j` with `f_j = sum_i c_ij`. Columns with `f_j = 0`
    /// get zero target mass.
    pub fn sharpen(&mut self, x: Var) -> Result<Var> {
        let c = self.value(x);
        if c.rank() != 2 {
            return Err(Error::Dimension(format!(
                "sharpen expects a matrix, got {:?}",
                c.shape()
            )));
        }
        let value = sharpen_values(c);
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Sharpen(x), rg))
    }

    /// Gradients of the scalar `loss` with respect to every leaf that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 || lv.shape().iter().any(|&d| d != 1) {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Evaluation("loss is not finite".into()));
        }
        let mut grads: Vec<Option<Array>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Array::filled(lv.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
        }

        // keep only leaves
        for (i, slot) in grads.iter_mut().enumerate() {
            if !matches!(self.nodes[i].op, Op::Leaf) {
                *slot = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Array>], v: Var, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        let slot = grads[v.0].get_or_insert_with(|| Array::zeros(node.value.shape()));
        f(slot.data_mut());
    }

    fn propagate(&self, node: &Node, g: &Array, grads: &mut [Option<Array>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                match (av.rank(), bv.rank()) {
                    (1, 2) => {
                        // y = a W ; da = W g, dW = a ⊗ g
                        if self.nodes[a.0].requires_grad {
                            let da = array::matmul(bv, g)?;
                            self.acc(grads, *a, |s| add_into(s, da.data()));
                        }
                        let m = bv.cols();
                        self.acc(grads, *b, |s| {
                            for (k, &ak) in av.data().iter().enumerate() {
                                for (j, &gj) in gd.iter().enumerate() {
                                    s[k * m + j] += ak * gj;
                                }
                            }
                        });
                    }
                    (2, 2) => {
                        if self.nodes[a.0].requires_grad {
                            let da = array::matmul(g, &bv.transpose()?)?;
                            self.acc(grads, *a, |s| add_into(s, da.data()));
                        }
                        if self.nodes[b.0].requires_grad {
                            let db = array::matmul(&av.transpose()?, g)?;
                            self.acc(grads, *b, |s| add_into(s, db.data()));
                        }
                    }
                    (2, 1) => {
                        // y = A v ; dA = g ⊗ v, dv = Aᵀ g
                        let c = av.cols();
                        self.acc(grads, *a, |s| {
                            for (i, &gi) in gd.iter().enumerate() {
                                for (j, &vj) in bv.data().iter().enumerate() {
                                    s[i * c + j] += gi * vj;
                                }
                            }
                        });
                        if self.nodes[b.0].requires_grad {
                            let db = array::matmul(g, av)?;
                            self.acc(grads, *b, |s| add_into(s, db.data()));
                        }
                    }
                    _ => unreachable!("matmul shapes validated in forward"),
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, |s| add_into(s, gd));
                self.acc(grads, *b, |s| add_into(s, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |s| add_into(s, gd));
                self.acc(grads, *b, |s| {
                    for (x, y) in s.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |s| {
                    for ((x, gi), bi) in s.iter_mut().zip(gd).zip(bv) {
                        *x += gi * bi;
                    }
                });
                self.acc(grads, *b, |s| {
                    for ((x, gi), ai) in s.iter_mut().zip(gd).zip(av) {
                        *x += gi * ai;
                    }
                });
            }
            Op::Affine { x, scale } => {
                self.acc(grads, *x, |s| {
                    for (v, gi) in s.iter_mut().zip(gd) {
                        *v += scale * gi;
                    }
                });
            }
            Op::Act(x, kind) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                self.acc(grads, *x, |s| {
                    for i in 0..s.len() {
                        s[i] += gd[i] * kind.derivative(xv[i], yv[i]);
                    }
                });
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let cols = y.cols();
                self.acc(grads, *x, |s| {
                    for r in 0..y.rows() {
                        let yr = y.row(r);
                        let gr = &gd[r * cols..(r + 1) * cols];
                        let inner = array::dot(yr, gr);
                        for j in 0..cols {
                            s[r * cols + j] += yr[j] * (gr[j] - inner);
                        }
                    }
                });
            }
            Op::Concat(a, b) => {
                let n = self.value(*a).len();
                self.acc(grads, *a, |s| add_into(s, &gd[..n]));
                self.acc(grads, *b, |s| add_into(s, &gd[n..]));
            }
            Op::Slice { x, start } => {
                self.acc(grads, *x, |s| add_into(&mut s[*start..*start + gd.len()], gd));
            }
            Op::L2Distance(a, b) => {
                let d = node.value.item();
                if d > 0.0 {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let scale = gd[0] / d;
                    self.acc(grads, *a, |s| {
                        for i in 0..s.len() {
                            s[i] += scale * (av[i] - bv[i]);
                        }
                    });
                    self.acc(grads, *b, |s| {
                        for i in 0..s.len() {
                            s[i] -= scale * (av[i] - bv[i]);
                        }
                    });
                }
            }
            Op::Kl { p, q } => {
                let (pv, qv) = (self.value(*p).data(), self.value(*q).data());
                let g0 = gd[0];
                self.acc(grads, *p, |s| {
                    for i in 0..s.len() {
                        if pv[i] > 0.0 {
                            s[i] += g0 * ((pv[i] / qv[i].max(KL_EPS)).ln() + 1.0);
                        }
                    }
                });
                self.acc(grads, *q, |s| {
                    for i in 0..s.len() {
                        if qv[i] > KL_EPS {
                            s[i] -= g0 * pv[i] / qv[i];
                        }
                    }
                });
            }
            Op::Gather { table, row } => {
                let cols = self.value(*table).cols();
                self.acc(grads, *table, |s| {
                    add_into(&mut s[row * cols..(row + 1) * cols], gd)
                });
            }
            Op::Stack(items) => {
                let width = gd.len() / items.len();
                for (k, v) in items.iter().enumerate() {
                    self.acc(grads, *v, |s| add_into(s, &gd[k * width..(k + 1) * width]));
                }
            }
            Op::Row { x, row } => {
                let cols = self.value(*x).cols();
                self.acc(grads, *x, |s| {
                    add_into(&mut s[row * cols..(row + 1) * cols], gd)
                });
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                self.acc(grads, *x, |s| s.iter_mut().for_each(|v| *v += g0));
            }
            Op::Sharpen(x) => {
                let c = self.value(*x);
                let dc = sharpen_backward(c, &node.value, g);
                self.acc(grads, *x, |s| add_into(s, dc.data()));
            }
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn column_sums(c: &Array) -> Vec<f64> {
    let cols = c.cols();
    let mut f = vec![0.0; cols];
    for r in 0..c.rows() {
        for (fj, v) in f.iter_mut().zip(c.row(r)) {
            *fj += v;
        }
    }
    f
}

/// Forward value of [`Tape::sharpen`] on a plain matrix.
pub fn sharpen_values(c: &Array) -> Array {
    let f = column_sums(c);
    let mut out = c.clone();
    for r in 0..c.rows() {
        let row = out.row_mut(r);
        for (j, v) in row.iter_mut().enumerate() {
            *v = if f[j] > 0.0 { *v * *v / f[j] } else { 0.0 };
        }
        let total: f64 = row.iter().sum();
        if total > 0.0 {
            row.iter_mut().for_each(|v| *v /= total);
        }
    }
    out
}

// With g_ij = c_ij^2 / f_j and S_i = sum_j g_ij, c'_ij = g_ij / S_i.
// dL/dg_ij = (G_ij - <G_i, c'_i>) / S_i
// dL/dc_ab = dL/dg_ab * 2 c_ab / f_b - sum_i dL/dg_ib * c_ib^2 / f_b^2
fn sharpen_backward(c: &Array, out: &Array, upstream: &Array) -> Array {
    let (rows, cols) = (c.rows(), c.cols());
    let f = column_sums(c);
    let mut dg = Array::zeros(c.shape());
    for i in 0..rows {
        let s_i: f64 = (0..cols)
            .filter(|&j| f[j] > 0.0)
            .map(|j| c.get2(i, j).powi(2) / f[j])
            .sum();
        if s_i <= 0.0 {
            continue;
        }
        let inner = array::dot(upstream.row(i), out.row(i));
        for j in 0..cols {
            dg.row_mut(i)[j] = (upstream.get2(i, j) - inner) / s_i;
        }
    }
    let mut dc = Array::zeros(c.shape());
    for j in 0..cols {
        if f[j] <= 0.0 {
            continue;
        }
        let col_term: f64 = (0..rows)
            .map(|i| dg.get2(i, j) * c.get2(i, j).powi(2))
            .sum::<f64>()
            / (f[j] * f[j]);
        for i in 0..rows {
            dc.row_mut(i)[j] = dg.get2(i, j) * 2.0 * c.get2(i, j) / f[j] - col_term;
        }
    }
    dc
}

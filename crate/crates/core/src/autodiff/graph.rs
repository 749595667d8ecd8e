//! Static computation graph with forward evaluation and reverse-mode
//! differentiation.
//!
//! A graph is built once through the builder methods, which append nodes in
//! topological order. `forward` evaluates every node from bound inputs and
//! `backward` walks the node list in reverse, accumulating adjoints.

use std::collections::{BTreeMap, HashMap};

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input { name: String, trainable: bool },
    Const(Tensor),
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Tanh(Var),
    Silu(Var),
    Softplus(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    Concat(Vec<Var>),
    SelectRows(Var, Vec<usize>),
    StopGrad(Var),
}

impl Op {
    fn kind(&self) -> &'static str {
        match self {
            Op::Input { .. } => "input",
            Op::Const(_) => "const",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Tanh(_) => "tanh",
            Op::Silu(_) => "silu",
            Op::Softplus(_) => "softplus",
            Op::Square(_) => "square",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::RowSum(_) => "row_sum",
            Op::Concat(_) => "concat",
            Op::SelectRows(..) => "select_rows",
            Op::StopGrad(_) => "stop_grad",
        }
    }

    fn parents(&self) -> Vec<Var> {
        match self {
            Op::Input { .. } | Op::Const(_) => vec![],
            Op::MatMul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => vec![*a, *b],
            Op::Scale(a, _)
            | Op::AddScalar(a, _)
            | Op::Tanh(a)
            | Op::Silu(a)
            | Op::Softplus(a)
            | Op::Square(a)
            | Op::Sum(a)
            | Op::Mean(a)
            | Op::RowSum(a)
            | Op::SelectRows(a, _)
            | Op::StopGrad(a) => vec![*a],
            Op::Concat(parts) => parts.clone(),
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    requires_grad: bool,
}

/// Source of named input tensors for [`Graph::forward`].
pub trait Feed {
    fn lookup(&self, name: &str) -> Option<&Tensor>;
}

impl Feed for HashMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

impl Feed for BTreeMap<String, Tensor> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.get(name)
    }
}

/// Several feeds searched in order.
pub struct Feeds<'a>(pub Vec<&'a dyn Feed>);

impl Feed for Feeds<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        self.0.iter().find_map(|f| f.lookup(name))
    }
}

/// Exposes a parameter map under a name prefix, so `"w"` in the map is
/// found as `"{prefix}.w"`.
pub struct Prefixed<'a> {
    pub prefix: &'a str,
    pub params: &'a BTreeMap<String, Tensor>,
}

impl Feed for Prefixed<'_> {
    fn lookup(&self, name: &str) -> Option<&Tensor> {
        let rest = name.strip_prefix(self.prefix)?.strip_prefix('.')?;
        self.params.get(rest)
    }
}

/// Gradients keyed by trainable input name.
pub type Gradients = BTreeMap<String, Tensor>;

#[derive(Clone, Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    inputs: BTreeMap<String, Var>,
    outputs: BTreeMap<String, Var>,
    values: Vec<Option<Tensor>>,
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

    fn push(&mut self, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Input { trainable, .. } => *trainable,
            Op::Const(_) | Op::StopGrad(_) => false,
            other => other
                .parents()
                .iter()
                .any(|p| self.nodes[p.0].requires_grad),
        };
        self.nodes.push(Node { op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn declare(&mut self, name: &str, trainable: bool) -> Var {
        if let Some(&v) = self.inputs.get(name) {
            return v;
        }
        let v = self.push(Op::Input {
            name: name.to_string(),
            trainable,
        });
        self.inputs.insert(name.to_string(), v);
        v
    }

    /// Named non-trainable input. Declaring the same name twice returns the
    /// same node.
    pub fn input(&mut self, name: &str) -> Var {
        self.declare(name, false)
    }

    /// Named trainable input; gradients are reported for it.
    pub fn param(&mut self, name: &str) -> Var {
        self.declare(name, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Const(value))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::Scale(a, s))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        self.push(Op::AddScalar(a, s))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.push(Op::Tanh(a))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        self.push(Op::Silu(a))
    }

    /// `ln(1 + e^x)`.
    pub fn softplus(&mut self, a: Var) -> Var {
        self.push(Op::Softplus(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.push(Op::Square(a))
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Var {
        self.push(Op::Sum(a))
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Var {
        self.push(Op::Mean(a))
    }

    /// Per-row sum, `[n, m] -> [n, 1]`.
    pub fn row_sum(&mut self, a: Var) -> Var {
        self.push(Op::RowSum(a))
    }

    /// Column-wise concatenation of matrices with equal row counts.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        self.push(Op::Concat(parts.to_vec()))
    }

    /// Gather rows of a matrix by index; indices may repeat.
    pub fn select_rows(&mut self, a: Var, idx: &[usize]) -> Var {
        self.push(Op::SelectRows(a, idx.to_vec()))
    }

    pub fn stop_grad(&mut self, a: Var) -> Var {
        self.push(Op::StopGrad(a))
    }

    /// `x · w + b` with `b` broadcast over rows.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Var {
        let xw = self.matmul(x, w);
        self.add(xw, b)
    }

    /// Mean over rows of the squared Euclidean row norm of `a - b`.
    pub fn mean_sq_dist(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.square(d);
        let per_row = self.row_sum(sq);
        self.mean(per_row)
    }

    pub fn set_output(&mut self, name: &str, v: Var) {
        self.outputs.insert(name.to_string(), v);
    }

    pub fn output(&self, name: &str) -> Result<Var> {
        self.outputs
            .get(name)
            .copied()
            .ok_or_else(|| Error::UnknownOutput(name.to_string()))
    }

    /// Names of trainable inputs, in sorted order.
    pub fn param_names(&self) -> Vec<String> {
        self.inputs
            .iter()
            .filter(|(_, v)| matches!(self.nodes[v.0].op, Op::Input { trainable: true, .. }))
            .map(|(k, _)| k.clone())
            .collect()
    }

    fn label(&self, v: Var) -> String {
        match &self.nodes[v.0].op {
            Op::Input { name, .. } => format!("input `{name}`"),
            op => format!("{}#{}", op.kind(), v.0),
        }
    }

    /// Cached value of a node after `forward`.
    pub fn value(&self, v: Var) -> Option<&Tensor> {
        self.values.get(v.0).and_then(Option::as_ref)
    }

    pub fn scalar(&self, v: Var) -> Result<f64> {
        self.value(v).map(Tensor::item).ok_or(Error::NotEvaluated)
    }

    /// Evaluate every node; returns the named outputs.
    pub fn forward(&mut self, feed: &dyn Feed) -> Result<BTreeMap<String, Tensor>> {
        self.run(feed)?;
        Ok(self
            .outputs
            .iter()
            .map(|(k, v)| (k.clone(), self.values[v.0].clone().unwrap()))
            .collect())
    }

    /// Evaluate every node without cloning outputs.
    pub fn run(&mut self, feed: &dyn Feed) -> Result<()> {
        self.values.clear();
        self.values.reserve(self.nodes.len());
        for i in 0..self.nodes.len() {
            let value = self.eval_node(i, feed)?;
            if !value.is_finite() {
                let label = self.label(Var(i));
                self.values.clear();
                return Err(Error::NonFinite(label));
            }
            self.values.push(Some(value));
        }
        Ok(())
    }

    fn val(&self, v: Var) -> &Tensor {
        self.values[v.0].as_ref().expect("parents precede children")
    }

    fn eval_node(&self, i: usize, feed: &dyn Feed) -> Result<Tensor> {
        let here = || self.label(Var(i));
        Ok(match &self.nodes[i].op {
            Op::Input { name, .. } => feed
                .lookup(name)
                .cloned()
                .ok_or_else(|| Error::MissingInput(name.clone()))?,
            Op::Const(t) => t.clone(),
            Op::MatMul(a, b) => matmul(self.val(*a), self.val(*b)).map_err(|d| Error::shape(here(), d))?,
            Op::Add(a, b) => zip_broadcast(self.val(*a), self.val(*b), |x, y| x + y)
                .map_err(|d| Error::shape(here(), d))?,
            Op::Sub(a, b) => zip_broadcast(self.val(*a), self.val(*b), |x, y| x - y)
                .map_err(|d| Error::shape(here(), d))?,
            Op::Mul(a, b) => zip_broadcast(self.val(*a), self.val(*b), |x, y| x * y)
                .map_err(|d| Error::shape(here(), d))?,
            Op::Scale(a, s) => self.val(*a).map(|x| x * s),
            Op::AddScalar(a, s) => self.val(*a).map(|x| x + s),
            Op::Tanh(a) => self.val(*a).map(f64::tanh),
            Op::Silu(a) => self.val(*a).map(|x| x * sigmoid(x)),
            Op::Softplus(a) => self.val(*a).map(softplus),
            Op::Square(a) => self.val(*a).map(|x| x * x),
            Op::Sum(a) => Tensor::scalar(self.val(*a).data().iter().sum()),
            Op::Mean(a) => {
                let t = self.val(*a);
                Tensor::scalar(t.data().iter().sum::<f64>() / t.len() as f64)
            }
            Op::RowSum(a) => {
                let t = self.val(*a);
                let (r, _) = t.as_matrix_dims();
                let sums = (0..r).map(|i| t.row(i).iter().sum()).collect();
                Tensor::matrix(r, 1, sums)?
            }
            Op::Concat(parts) => {
                let ts: Vec<&Tensor> = parts.iter().map(|p| self.val(*p)).collect();
                concat_cols(&ts).map_err(|d| Error::shape(here(), d))?
            }
            Op::SelectRows(a, idx) => self
                .val(*a)
                .select_rows(idx)
                .map_err(|e| Error::shape(here(), e.to_string()))?,
            Op::StopGrad(a) => self.val(*a).clone(),
        })
    }

    /// Reverse-mode gradients of `output` seeded with `seed`, for every
    /// trainable input. Inputs the output does not depend on get zeros.
    pub fn backward(&self, output: Var, seed: &Tensor) -> Result<Gradients> {
        if self.values.len() != self.nodes.len() {
            return Err(Error::NotEvaluated);
        }
        let out_val = self.val(output);
        if out_val.shape() != seed.shape() {
            return Err(Error::shape(
                self.label(output),
                format!("seed shape {:?} != output shape {:?}", seed.shape(), out_val.shape()),
            ));
        }
        if !seed.is_finite() {
            return Err(Error::NonFinite("backward seed".into()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        if self.nodes[output.0].requires_grad {
            grads[output.0] = Some(seed.clone());
        }
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Input { .. } = node.op {
                grads[i] = Some(g);
                continue;
            }
            self.propagate(&node.op, &g, &mut grads);
        }
        let mut out = Gradients::new();
        for (name, v) in &self.inputs {
            if let Op::Input { trainable: true, .. } = self.nodes[v.0].op {
                let g = grads[v.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.val(*v).shape()));
                out.insert(name.clone(), g);
            }
        }
        Ok(out)
    }

    /// Convenience: backward of a named scalar output with seed 1.
    pub fn backward_scalar(&self, output: &str) -> Result<Gradients> {
        let v = self.output(output)?;
        self.backward(v, &Tensor::scalar(1.0))
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn propagate(&self, op: &Op, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let mut acc = |v: Var, contrib: Tensor| match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.data_mut().iter_mut().zip(contrib.data()) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contrib),
        };
        match op {
            Op::Input { .. } | Op::Const(_) | Op::StopGrad(_) => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    acc(*a, matmul_nt(g, bv));
                }
                if self.needs(*b) {
                    acc(*b, matmul_tn(av, g));
                }
            }
            Op::Add(a, b) => {
                if self.needs(*a) {
                    acc(*a, reduce_to(g, self.val(*a)));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to(g, self.val(*b)));
                }
            }
            Op::Sub(a, b) => {
                if self.needs(*a) {
                    acc(*a, reduce_to(g, self.val(*a)));
                }
                if self.needs(*b) {
                    acc(*b, reduce_to(&g.map(|x| -x), self.val(*b)));
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.val(*a), self.val(*b));
                if self.needs(*a) {
                    let ga = zip_broadcast(g, bv, |x, y| x * y).expect("checked in forward");
                    acc(*a, reduce_to(&ga, av));
                }
                if self.needs(*b) {
                    let gb = zip_broadcast(g, av, |x, y| x * y).expect("checked in forward");
                    acc(*b, reduce_to(&gb, bv));
                }
            }
            Op::Scale(a, s) => acc(*a, g.map(|x| x * s)),
            Op::AddScalar(a, _) => acc(*a, g.clone()),
            Op::Tanh(a) => {
                let y = self.val(*a);
                acc(*a, zip_same(g, y, |gi, x| {
                    let t = x.tanh();
                    gi * (1.0 - t * t)
                }));
            }
            Op::Silu(a) => {
                let x = self.val(*a);
                acc(*a, zip_same(g, x, |gi, x| {
                    let s = sigmoid(x);
                    gi * s * (1.0 + x * (1.0 - s))
                }));
            }
            Op::Softplus(a) => {
                let x = self.val(*a);
                acc(*a, zip_same(g, x, |gi, x| gi * sigmoid(x)));
            }
            Op::Square(a) => {
                let x = self.val(*a);
                acc(*a, zip_same(g, x, |gi, x| 2.0 * gi * x));
            }
            Op::Sum(a) => {
                let x = self.val(*a);
                acc(*a, Tensor::full(x.shape(), g.item()));
            }
            Op::Mean(a) => {
                let x = self.val(*a);
                acc(*a, Tensor::full(x.shape(), g.item() / x.len() as f64));
            }
            Op::RowSum(a) => {
                let x = self.val(*a);
                let (r, c) = x.as_matrix_dims();
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    data.extend(std::iter::repeat_n(g.data()[i], c));
                }
                acc(*a, Tensor::new(x.shape().to_vec(), data).unwrap());
            }
            Op::SelectRows(a, idx) => {
                let x = self.val(*a);
                let c = x.cols();
                let mut out = Tensor::zeros(x.shape());
                let od = out.data_mut();
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        od[i * c + j] += g.data()[k * c + j];
                    }
                }
                acc(*a, out);
            }
            Op::Concat(parts) => {
                let (r, total) = g.as_matrix_dims();
                let mut offset = 0;
                for p in parts {
                    let pv = self.val(*p);
                    let c = pv.cols();
                    if self.needs(*p) {
                        let mut data = Vec::with_capacity(r * c);
                        for i in 0..r {
                            data.extend_from_slice(&g.data()[i * total + offset..i * total + offset + c]);
                        }
                        acc(*p, Tensor::new(pv.shape().to_vec(), data).unwrap());
                    }
                    offset += c;
                }
            }
        }
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

/// Numerically stable `ln(1 + e^x)`.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn zip_same(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).unwrap()
}

fn broadcast_dims(a: &Tensor, b: &Tensor) -> Result<(usize, usize), String> {
    if a.rank() > 2 || b.rank() > 2 {
        return Err(format!(
            "broadcasting needs rank <= 2, got {:?} and {:?}",
            a.shape(),
            b.shape()
        ));
    }
    let (ar, ac) = a.as_matrix_dims();
    let (br, bc) = b.as_matrix_dims();
    let dim = |x: usize, y: usize| -> Option<usize> {
        match (x, y) {
            _ if x == y => Some(x),
            (1, y) => Some(y),
            (x, 1) => Some(x),
            _ => None,
        }
    };
    match (dim(ar, br), dim(ac, bc)) {
        (Some(r), Some(c)) => Ok((r, c)),
        _ => Err(format!(
            "cannot broadcast {:?} with {:?}",
            a.shape(),
            b.shape()
        )),
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor, String> {
    if a.shape() == b.shape() {
        return Ok(zip_same(a, b, f));
    }
    let (r, c) = broadcast_dims(a, b)?;
    let (ar, ac) = a.as_matrix_dims();
    let (br, bc) = b.as_matrix_dims();
    let (ad, bd) = (a.data(), b.data());
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let ai = if ar == 1 { 0 } else { i * ac };
        let bi = if br == 1 { 0 } else { i * bc };
        for j in 0..c {
            let x = ad[ai + if ac == 1 { 0 } else { j }];
            let y = bd[bi + if bc == 1 { 0 } else { j }];
            data.push(f(x, y));
        }
    }
    Ok(Tensor::matrix(r, c, data).unwrap())
}

/// Sum `g` over the dims along which `like` was broadcast.
fn reduce_to(g: &Tensor, like: &Tensor) -> Tensor {
    if g.shape() == like.shape() {
        return g.clone();
    }
    let (r, c) = g.as_matrix_dims();
    let (lr, lc) = like.as_matrix_dims();
    let mut data = vec![0.0; lr * lc];
    for i in 0..r {
        let li = if lr == 1 { 0 } else { i };
        for j in 0..c {
            let lj = if lc == 1 { 0 } else { j };
            data[li * lc + lj] += g.data()[i * c + j];
        }
    }
    Tensor::new(like.shape().to_vec(), data).unwrap()
}

fn concat_cols(parts: &[&Tensor]) -> Result<Tensor, String> {
    let Some(first) = parts.first() else {
        return Err("concat of nothing".into());
    };
    let r = first.rows();
    if parts.iter().any(|p| p.rank() > 2 || p.rows() != r) {
        let shapes: Vec<_> = parts.iter().map(|p| p.shape().to_vec()).collect();
        return Err(format!("row counts differ in concat: {shapes:?}"));
    }
    let total: usize = parts.iter().map(|p| p.cols()).sum();
    let mut data = Vec::with_capacity(r * total);
    for i in 0..r {
        for p in parts {
            data.extend_from_slice(p.row(i));
        }
    }
    Ok(Tensor::matrix(r, total, data).unwrap())
}

/// General strided product `c = a · b` for `a: [m, k]`, `b: [k, n]`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: isize,
    csa: isize,
    b: &[f64],
    rsb: isize,
    csb: isize,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    // SAFETY: the strides describe in-bounds views of `a` ([m, k]) and
    // `b` ([k, n]); `c` is a fresh contiguous [m, n] buffer.
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
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    if a.rank() > 2 || b.rank() > 2 {
        return Err(format!("matmul needs rank <= 2, got {:?} and {:?}", a.shape(), b.shape()));
    }
    let (m, k) = a.as_matrix_dims();
    let (k2, n) = b.as_matrix_dims();
    if k != k2 {
        return Err(format!("inner dims differ: {:?} x {:?}", a.shape(), b.shape()));
    }
    let c = gemm(m, k, n, a.data(), k as isize, 1, b.data(), n as isize, 1);
    Ok(Tensor::matrix(m, n, c).unwrap())
}

/// `g · bᵀ`, shaped like the left operand of the original product.
fn matmul_nt(g: &Tensor, b: &Tensor) -> Tensor {
    let (m, n) = g.as_matrix_dims();
    let (k, _) = b.as_matrix_dims();
    let c = gemm(m, n, k, g.data(), n as isize, 1, b.data(), 1, n as isize);
    Tensor::matrix(m, k, c).unwrap()
}

/// `aᵀ · g`, reshaped like the right operand of the original product.
fn matmul_tn(a: &Tensor, g: &Tensor) -> Tensor {
    let (m, k) = a.as_matrix_dims();
    let (_, n) = g.as_matrix_dims();
    let c = gemm(k, m, n, a.data(), 1, k as isize, g.data(), n as isize, 1);
    Tensor::matrix(k, n, c).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn feed(pairs: &[(&str, Tensor)]) -> HashMap<String, Tensor> {
        pairs.iter().map(|(k, v)| (k.to_string(), v.clone())).collect()
    }

    #[test]
    fn doubling() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.add(x, x);
        g.set_output("y", y);
        let out = g
            .forward(&feed(&[("x", Tensor::new(vec![2], vec![1.0, 2.0]).unwrap())]))
            .unwrap();
        assert_eq!(out["y"].data(), &[2.0, 4.0]);
    }

    #[test]
    fn annihilation() {
        let mut g = Graph::new();
        let x = g.input("x");
        let y = g.scale(x, 0.0);
        g.set_output("y", y);
        let out = g
            .forward(&feed(&[("x", Tensor::new(vec![3], vec![1.0, -2.0, 7.5]).unwrap())]))
            .unwrap();
        assert!(out["y"].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn power_rule() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.square(x);
        g.forward(&feed(&[("x", Tensor::scalar(3.0))])).unwrap();
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].item(), 6.0);
    }

    #[test]
    fn constant_output_has_zero_grads() {
        let mut g = Graph::new();
        let w = g.param("w");
        let c = g.constant(Tensor::scalar(4.0));
        let _unused = g.square(w);
        g.forward(&feed(&[("w", Tensor::scalar(2.0))])).unwrap();
        let grads = g.backward(c, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["w"].item(), 0.0);
    }

    #[test]
    fn backward_before_forward_is_an_error() {
        let mut g = Graph::new();
        let x = g.param("x");
        let y = g.square(x);
        assert!(matches!(
            g.backward(y, &Tensor::scalar(1.0)),
            Err(Error::NotEvaluated)
        ));
    }

    #[test]
    fn shape_error_names_the_node() {
        let mut g = Graph::new();
        let a = g.input("a");
        let b = g.input("b");
        let _ = g.matmul(a, b);
        let err = g
            .forward(&feed(&[
                ("a", Tensor::zeros(&[2, 3])),
                ("b", Tensor::zeros(&[2, 3])),
            ]))
            .unwrap_err();
        assert!(err.to_string().contains("matmul#2"), "{err}");
    }

    #[test]
    fn non_finite_is_rejected() {
        let mut g = Graph::new();
        let a = g.input("a");
        let _ = g.scale(a, f64::INFINITY);
        let err = g.forward(&feed(&[("a", Tensor::scalar(1.0))])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
        let err = g.forward(&feed(&[("a", Tensor::scalar(f64::NAN))])).unwrap_err();
        assert!(matches!(err, Error::NonFinite(_)));
    }

    #[test]
    fn missing_input() {
        let mut g = Graph::new();
        let _ = g.input("a");
        assert!(matches!(
            g.forward(&feed(&[])),
            Err(Error::MissingInput(name)) if name == "a"
        ));
    }

    #[test]
    fn stop_grad_blocks_gradient_but_not_value() {
        let mut g = Graph::new();
        let x = g.param("x");
        let sx = g.stop_grad(x);
        let y = g.mul(x, sx);
        g.forward(&feed(&[("x", Tensor::scalar(3.0))])).unwrap();
        assert_eq!(g.scalar(y).unwrap(), 9.0);
        let grads = g.backward(y, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].item(), 3.0);
    }

    #[test]
    fn broadcast_column_times_matrix() {
        let mut g = Graph::new();
        let t = g.param("t");
        let v = g.param("v");
        let y = g.mul(t, v);
        let s = g.sum(y);
        g.forward(&feed(&[
            ("t", Tensor::column(&[2.0, 3.0]).unwrap()),
            ("v", Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap()),
        ]))
        .unwrap();
        assert_eq!(g.value(y).unwrap().data(), &[2.0, 4.0, 9.0, 12.0]);
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["t"].data(), &[3.0, 7.0]);
        assert_eq!(grads["v"].data(), &[2.0, 2.0, 3.0, 3.0]);
    }

    #[test]
    fn softplus_is_stable() {
        assert_eq!(softplus(1000.0), 1000.0);
        assert!(softplus(-1000.0) >= 0.0 && softplus(-1000.0) < 1e-300);
        assert!((softplus(0.0) - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn prefixed_feed_resolves_names() {
        let mut params = BTreeMap::new();
        params.insert("w".to_string(), Tensor::scalar(1.5));
        let f = Prefixed { prefix: "student", params: &params };
        assert_eq!(f.lookup("student.w").unwrap().item(), 1.5);
        assert!(f.lookup("studentw").is_none());
        assert!(f.lookup("ema.w").is_none());
    }

    #[test]
    fn select_rows_gathers_and_scatters() {
        let mut g = Graph::new();
        let x = g.param("x");
        let picked = g.select_rows(x, &[2, 0, 2]);
        let s = g.sum(picked);
        g.forward(&feed(&[(
            "x",
            Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0], vec![5.0, 6.0]]).unwrap(),
        )]))
        .unwrap();
        assert_eq!(g.value(picked).unwrap().data(), &[5.0, 6.0, 1.0, 2.0, 5.0, 6.0]);
        let grads = g.backward(s, &Tensor::scalar(1.0)).unwrap();
        assert_eq!(grads["x"].data(), &[1.0, 1.0, 0.0, 0.0, 2.0, 2.0]);
    }

    #[test]
    fn select_rows_out_of_range_names_node() {
        let mut g = Graph::new();
        let x = g.input("x");
        g.select_rows(x, &[3]);
        let err = g.forward(&feed(&[("x", Tensor::zeros(&[2, 2]))])).unwrap_err();
        assert!(err.to_string().contains("select_rows"), "{err}");
    }
}

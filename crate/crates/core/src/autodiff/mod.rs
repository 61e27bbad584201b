//! Reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] records every primitive applied to [`Var`] handles. Calling
//! [`Tape::backward`] on a scalar walks the record once in reverse and
//! accumulates gradients additively, so a value used twice receives both
//! contributions. Nodes built only from constants are not differentiated.
//!
//! Binary element-wise primitives broadcast the right operand onto the left
//! one when it is a scalar, a `1 x n` row or an `m x 1` column.

mod check;
mod optim;
mod params;
mod tensor;

pub use check::{check_primitives, finite_difference_grad, grad_check, primitive_checks, PrimitiveCheck};
pub use optim::Adam;
pub use params::{read_checkpoint, write_checkpoint, Checkpoint, ParamId, ParamStore, TensorEntry};
pub use tensor::Tensor;

use std::cell::{Ref, RefCell};
use std::rc::Rc;

use crate::error::{RemError, Result};
use tensor::gemm;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Bcast {
    Same,
    Scalar,
    Row,
    Col,
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize, Bcast),
    Sub(usize, usize, Bcast),
    Mul(usize, usize, Bcast),
    Div(usize, usize, Bcast),
    Scale(usize, f64),
    Shift(usize),
    Sum(usize),
    Mean(usize),
    SumAxis(usize, usize),
    Relu(usize),
    LeakyRelu(usize, f64),
    Sigmoid(usize),
    Tanh(usize),
    Softplus(usize),
    Exp(usize),
    Log(usize),
    Softmax(usize, usize),
    GatherRows(usize, Rc<Vec<usize>>),
    ScatterAddRows(usize, Rc<Vec<usize>>),
    GatherCols(usize, Rc<Vec<usize>>),
    MaskFill(usize, Rc<Vec<bool>>),
    Clamp(usize, f64, f64),
    Reshape(usize),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.shape())
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var<'_>) -> Option<&Tensor> {
        self.grads.get(v.id).and_then(Option::as_ref)
    }

    /// Gradient of `v`, zeros when the loss does not depend on it.
    pub fn wrt_or_zeros(&self, v: Var<'_>) -> Tensor {
        self.wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(v.shape().as_slice()))
    }

    pub fn take(&mut self, v: Var<'_>) -> Option<Tensor> {
        self.grads.get_mut(v.id).and_then(Option::take)
    }
}

fn bcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Bcast> {
    if a.shape() == b.shape() {
        return Ok(Bcast::Same);
    }
    if b.len() == 1 {
        return Ok(Bcast::Scalar);
    }
    let (ar, ac) = a.dims2();
    let (br, bc) = b.dims2();
    if a.shape().len() <= 2 && b.shape().len() <= 2 {
        if br == 1 && bc == ac {
            return Ok(Bcast::Row);
        }
        if bc == 1 && br == ar {
            return Ok(Bcast::Col);
        }
    }
    Err(RemError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    })
}

#[inline]
fn bidx(kind: Bcast, i: usize, cols: usize) -> usize {
    match kind {
        Bcast::Same => i,
        Bcast::Scalar => 0,
        Bcast::Row => i % cols,
        Bcast::Col => i / cols,
    }
}

fn binary_map(a: &Tensor, b: &Tensor, kind: Bcast, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let cols = a.cols();
    let bd = b.data();
    let data = a
        .data()
        .iter()
        .enumerate()
        .map(|(i, &x)| f(x, bd[bidx(kind, i, cols)]))
        .collect();
    Tensor::new(a.shape().to_vec(), data).expect("shape preserved")
}

/// Sum a full-size gradient down to the broadcast operand's shape.
fn reduce_to(kind: Bcast, g: &[f64], cols: usize, target: &[usize]) -> Tensor {
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    for (i, &v) in g.iter().enumerate() {
        od[bidx(kind, i, cols)] += v;
    }
    out
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    /// Differentiable leaf.
    pub fn param(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf excluded from differentiation.
    pub fn constant(&self, t: Tensor) -> Var<'_> {
        self.push(t, Op::Leaf, false)
    }

    fn unary(&self, a: usize, f: impl Fn(f64) -> f64, op: Op) -> Var<'_> {
        let (value, rg) = {
            let nodes = self.nodes.borrow();
            (nodes[a].value.map(f), nodes[a].requires_grad)
        };
        self.push(value, op, rg)
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(RemError::Shape {
                op: "backward",
                lhs: nodes[loss.id].value.shape().to_vec(),
                rhs: vec![],
            });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.id + 1];
        grads[loss.id] = Some(Tensor::full(nodes[loss.id].value.shape(), 1.0));
        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                grads[id] = None;
                continue;
            }
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let mut send = |p: usize, t: Tensor| {
                if !nodes[p].requires_grad {
                    return;
                }
                match &mut grads[p] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            let val = |p: usize| &nodes[p].value;
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (m, k) = val(*a).dims2();
                    let n = val(*b).cols();
                    if nodes[*a].requires_grad {
                        let mut ga = vec![0.0; m * k];
                        gemm(m, n, k, g.data(), false, val(*b).data(), true, &mut ga, false);
                        send(*a, Tensor::new(val(*a).shape().to_vec(), ga).unwrap());
                    }
                    if nodes[*b].requires_grad {
                        let mut gb = vec![0.0; k * n];
                        gemm(k, m, n, val(*a).data(), true, g.data(), false, &mut gb, false);
                        send(*b, Tensor::new(val(*b).shape().to_vec(), gb).unwrap());
                    }
                }
                Op::Add(a, b, kind) | Op::Sub(a, b, kind) => {
                    let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                    let cols = val(*a).cols();
                    if nodes[*b].requires_grad {
                        let mut gb = reduce_to(*kind, g.data(), cols, val(*b).shape());
                        if sign < 0.0 {
                            gb.data_mut().iter_mut().for_each(|v| *v = -*v);
                        }
                        send(*b, gb);
                    }
                    send(*a, g);
                }
                Op::Mul(a, b, kind) => {
                    let (av, bv) = (val(*a), val(*b));
                    let cols = av.cols();
                    if nodes[*b].requires_grad {
                        let prod: Vec<f64> =
                            g.data().iter().zip(av.data()).map(|(x, y)| x * y).collect();
                        send(*b, reduce_to(*kind, &prod, cols, bv.shape()));
                    }
                    if nodes[*a].requires_grad {
                        send(*a, binary_map(&g, bv, *kind, |x, y| x * y));
                    }
                }
                Op::Div(a, b, kind) => {
                    let (av, bv) = (val(*a), val(*b));
                    let cols = av.cols();
                    if nodes[*b].requires_grad {
                        let bd = bv.data();
                        let prod: Vec<f64> = g
                            .data()
                            .iter()
                            .zip(av.data())
                            .enumerate()
                            .map(|(i, (x, y))| {
                                let d = bd[bidx(*kind, i, cols)];
                                -x * y / (d * d)
                            })
                            .collect();
                        send(*b, reduce_to(*kind, &prod, cols, bv.shape()));
                    }
                    if nodes[*a].requires_grad {
                        send(*a, binary_map(&g, bv, *kind, |x, y| x / y));
                    }
                }
                Op::Scale(a, s) => send(*a, g.map(|v| v * s)),
                Op::Shift(a) | Op::Reshape(a) => {
                    let shape = val(*a).shape().to_vec();
                    send(*a, g.reshaped(&shape).unwrap());
                }
                Op::Sum(a) => send(*a, Tensor::full(val(*a).shape(), g.item())),
                Op::Mean(a) => {
                    let n = val(*a).len() as f64;
                    send(*a, Tensor::full(val(*a).shape(), g.item() / n));
                }
                Op::SumAxis(a, axis) => {
                    let av = val(*a);
                    let (r, c) = av.dims2();
                    let gd = g.data();
                    let data = (0..r * c)
                        .map(|i| if *axis == 0 { gd[i % c] } else { gd[i / c] })
                        .collect();
                    send(*a, Tensor::new(av.shape().to_vec(), data).unwrap());
                }
                Op::Relu(a) => {
                    let gd = g.data();
                    let data = val(*a)
                        .data()
                        .iter()
                        .zip(gd)
                        .map(|(&x, &d)| if x > 0.0 { d } else { 0.0 })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::LeakyRelu(a, slope) => {
                    let data = val(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &d)| if x > 0.0 { d } else { d * slope })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Sigmoid(a) => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| d * y * (1.0 - y))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Tanh(a) => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| d * (1.0 - y * y))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Softplus(a) => {
                    let data = val(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &d)| d * sigmoid(x))
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Exp(a) => {
                    let data = node
                        .value
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&y, &d)| d * y)
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Log(a) => {
                    let data = val(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &d)| d / x)
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Softmax(a, axis) => {
                    let y = &node.value;
                    let (r, c) = y.dims2();
                    let (yd, gd) = (y.data(), g.data());
                    let mut out = vec![0.0; r * c];
                    let groups: Vec<Vec<usize>> = if *axis == 1 {
                        (0..r).map(|i| (i * c..(i + 1) * c).collect()).collect()
                    } else {
                        (0..c).map(|j| (0..r).map(|i| i * c + j).collect()).collect()
                    };
                    for grp in groups {
                        let dot: f64 = grp.iter().map(|&i| yd[i] * gd[i]).sum();
                        for &i in &grp {
                            out[i] = yd[i] * (gd[i] - dot);
                        }
                    }
                    send(*a, Tensor::new(y.shape().to_vec(), out).unwrap());
                }
                Op::GatherRows(a, idx) => {
                    let av = val(*a);
                    let c = av.cols();
                    let mut out = Tensor::zeros(av.shape());
                    let od = out.data_mut();
                    for (k, &row) in idx.iter().enumerate() {
                        let src = &g.data()[k * c..(k + 1) * c];
                        for (o, s) in od[row * c..(row + 1) * c].iter_mut().zip(src) {
                            *o += s;
                        }
                    }
                    send(*a, out);
                }
                Op::ScatterAddRows(a, idx) => {
                    let av = val(*a);
                    let c = av.cols();
                    let gd = g.data();
                    let mut data = Vec::with_capacity(idx.len() * c);
                    for &row in idx.iter() {
                        data.extend_from_slice(&gd[row * c..(row + 1) * c]);
                    }
                    send(*a, Tensor::new(av.shape().to_vec(), data).unwrap());
                }
                Op::GatherCols(a, idx) => {
                    let av = val(*a);
                    let (r, c) = av.dims2();
                    let k = idx.len();
                    let mut out = Tensor::zeros(av.shape());
                    let od = out.data_mut();
                    for i in 0..r {
                        for (j, &col) in idx.iter().enumerate() {
                            od[i * c + col] += g.data()[i * k + j];
                        }
                    }
                    send(*a, out);
                }
                Op::MaskFill(a, keep) => {
                    let data = g
                        .data()
                        .iter()
                        .zip(keep.iter())
                        .map(|(&d, &k)| if k { d } else { 0.0 })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
                Op::Clamp(a, lo, hi) => {
                    let data = val(*a)
                        .data()
                        .iter()
                        .zip(g.data())
                        .map(|(&x, &d)| if x >= *lo && x <= *hi { d } else { 0.0 })
                        .collect();
                    send(*a, Tensor::new(g.shape().to_vec(), data).unwrap());
                }
            }
        }
        Ok(Gradients { grads })
    }
}

// fallible ops, so the std operator traits do not fit
#[allow(clippy::should_implement_trait)]
impl<'t> Var<'t> {
    pub fn id(&self) -> usize {
        self.id
    }

    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    /// Borrow the recorded value. Release the borrow before recording more
    /// operations on the same tape.
    pub fn value(&self) -> Ref<'t, Tensor> {
        Ref::map(self.tape.nodes.borrow(), |n| &n[self.id].value)
    }

    pub fn to_tensor(&self) -> Tensor {
        self.value().clone()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.nodes.borrow()[self.id].requires_grad
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl Fn(usize, usize, Bcast) -> Op,
    ) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id], &nodes[other.id]);
            let kind = bcast_kind(name, &a.value, &b.value)?;
            (
                (binary_map(&a.value, &b.value, kind, f), kind),
                a.requires_grad || b.requires_grad,
            )
        };
        let (value, kind) = value;
        Ok(self.tape.push(value, op(self.id, other.id, kind), rg))
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let (value, rg) = {
            let nodes = self.tape.nodes.borrow();
            let (a, b) = (&nodes[self.id].value, &nodes[other.id].value);
            let (m, k) = a.dims2();
            let (k2, n) = b.dims2();
            if k != k2 || a.shape().len() > 2 || b.shape().len() > 2 {
                return Err(RemError::Shape {
                    op: "matmul",
                    lhs: a.shape().to_vec(),
                    rhs: b.shape().to_vec(),
                });
            }
            let mut c = vec![0.0; m * n];
            gemm(m, k, n, a.data(), false, b.data(), false, &mut c, false);
            (
                Tensor::matrix(m, n, c).unwrap(),
                nodes[self.id].requires_grad || nodes[other.id].requires_grad,
            )
        };
        Ok(self.tape.push(value, Op::MatMul(self.id, other.id), rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |x, y| x / y, Op::Div)
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        self.tape.unary(self.id, |x| x * s, Op::Scale(self.id, s))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    /// `x + c` for a constant `c`.
    pub fn shift(self, c: f64) -> Var<'t> {
        self.tape.unary(self.id, |x| x + c, Op::Shift(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    pub fn sum(self) -> Var<'t> {
        let (v, rg) = {
            let n = self.tape.nodes.borrow();
            (n[self.id].value.data().iter().sum::<f64>(), n[self.id].requires_grad)
        };
        self.tape.push(Tensor::scalar(v), Op::Sum(self.id), rg)
    }

    pub fn mean(self) -> Var<'t> {
        let (v, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            (t.data().iter().sum::<f64>() / t.len() as f64, n[self.id].requires_grad)
        };
        self.tape.push(Tensor::scalar(v), Op::Mean(self.id), rg)
    }

    /// Sum over `axis` of a matrix: axis 0 gives `1 x c`, axis 1 gives `r x 1`.
    pub fn sum_axis(self, axis: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            if axis > 1 || t.shape().len() > 2 {
                return Err(RemError::Shape {
                    op: "sum_axis",
                    lhs: t.shape().to_vec(),
                    rhs: vec![axis],
                });
            }
            let (r, c) = t.dims2();
            let d = t.data();
            let value = if axis == 0 {
                let mut out = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        out[j] += d[i * c + j];
                    }
                }
                Tensor::matrix(1, c, out).unwrap()
            } else {
                Tensor::matrix(r, 1, (0..r).map(|i| d[i * c..(i + 1) * c].iter().sum()).collect())
                    .unwrap()
            };
            (value, n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::SumAxis(self.id, axis), rg))
    }

    pub fn relu(self) -> Var<'t> {
        self.tape.unary(self.id, |x| x.max(0.0), Op::Relu(self.id))
    }

    pub fn leaky_relu(self, slope: f64) -> Var<'t> {
        self.tape.unary(
            self.id,
            move |x| if x > 0.0 { x } else { slope * x },
            Op::LeakyRelu(self.id, slope),
        )
    }

    pub fn sigmoid(self) -> Var<'t> {
        self.tape.unary(self.id, sigmoid, Op::Sigmoid(self.id))
    }

    pub fn tanh(self) -> Var<'t> {
        self.tape.unary(self.id, f64::tanh, Op::Tanh(self.id))
    }

    pub fn softplus(self) -> Var<'t> {
        self.tape.unary(self.id, softplus, Op::Softplus(self.id))
    }

    pub fn exp(self) -> Var<'t> {
        self.tape.unary(self.id, f64::exp, Op::Exp(self.id))
    }

    pub fn log(self) -> Var<'t> {
        self.tape.unary(self.id, f64::ln, Op::Log(self.id))
    }

    pub fn clamp(self, lo: f64, hi: f64) -> Var<'t> {
        self.tape
            .unary(self.id, move |x| x.clamp(lo, hi), Op::Clamp(self.id, lo, hi))
    }

    /// Softmax of a matrix along `axis` (1: within each row, 0: within each
    /// column). Entries equal to `-inf` receive probability zero.
    pub fn softmax(self, axis: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            if axis > 1 || t.shape().len() > 2 {
                return Err(RemError::Shape {
                    op: "softmax",
                    lhs: t.shape().to_vec(),
                    rhs: vec![axis],
                });
            }
            let (r, c) = t.dims2();
            let d = t.data();
            let mut out = vec![0.0; r * c];
            let (outer, inner, stride_o, stride_i) = if axis == 1 { (r, c, c, 1) } else { (c, r, 1, c) };
            for o in 0..outer {
                let idx = |k: usize| o * stride_o + k * stride_i;
                let mx = (0..inner).map(|k| d[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let mut z = 0.0;
                for k in 0..inner {
                    let e = if d[idx(k)] == f64::NEG_INFINITY { 0.0 } else { (d[idx(k)] - mx).exp() };
                    out[idx(k)] = e;
                    z += e;
                }
                for k in 0..inner {
                    out[idx(k)] /= z;
                }
            }
            (Tensor::new(t.shape().to_vec(), out).unwrap(), n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Softmax(self.id, axis), rg))
    }

    /// Rows `idx[k]` of a matrix, stacked in order (repeats allowed).
    pub fn gather_rows(self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            let (r, c) = t.dims2();
            if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
                return Err(RemError::Shape {
                    op: "gather_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![bad],
                });
            }
            let mut data = Vec::with_capacity(idx.len() * c);
            for &i in idx.iter() {
                data.extend_from_slice(&t.data()[i * c..(i + 1) * c]);
            }
            (Tensor::matrix(idx.len(), c, data).unwrap(), n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::GatherRows(self.id, idx), rg))
    }

    /// Row `k` of the input is added into row `idx[k]` of a zero
    /// `rows x c` output.
    pub fn scatter_add_rows(self, idx: Rc<Vec<usize>>, rows: usize) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            let (r, c) = t.dims2();
            if r != idx.len() || idx.iter().any(|&i| i >= rows) {
                return Err(RemError::Shape {
                    op: "scatter_add_rows",
                    lhs: t.shape().to_vec(),
                    rhs: vec![idx.len(), rows],
                });
            }
            let mut out = vec![0.0; rows * c];
            for (k, &i) in idx.iter().enumerate() {
                for (o, s) in out[i * c..(i + 1) * c].iter_mut().zip(&t.data()[k * c..(k + 1) * c]) {
                    *o += s;
                }
            }
            (Tensor::matrix(rows, c, out).unwrap(), n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::ScatterAddRows(self.id, idx), rg))
    }

    /// Columns `idx[k]` of a matrix, in order.
    pub fn gather_cols(self, idx: Rc<Vec<usize>>) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            let (r, c) = t.dims2();
            if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
                return Err(RemError::Shape {
                    op: "gather_cols",
                    lhs: t.shape().to_vec(),
                    rhs: vec![bad],
                });
            }
            let k = idx.len();
            let mut data = Vec::with_capacity(r * k);
            for i in 0..r {
                for &j in idx.iter() {
                    data.push(t.data()[i * c + j]);
                }
            }
            (Tensor::matrix(r, k, data).unwrap(), n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::GatherCols(self.id, idx), rg))
    }

    /// Keep entries where `keep` is true, replace the rest with `fill`.
    /// Gradients only reach kept entries.
    pub fn mask_fill(self, keep: Rc<Vec<bool>>, fill: f64) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            let t = &n[self.id].value;
            if keep.len() != t.len() {
                return Err(RemError::Shape {
                    op: "mask_fill",
                    lhs: t.shape().to_vec(),
                    rhs: vec![keep.len()],
                });
            }
            let data = t
                .data()
                .iter()
                .zip(keep.iter())
                .map(|(&x, &k)| if k { x } else { fill })
                .collect();
            (Tensor::new(t.shape().to_vec(), data).unwrap(), n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::MaskFill(self.id, keep), rg))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let (value, rg) = {
            let n = self.tape.nodes.borrow();
            (n[self.id].value.clone().reshaped(shape)?, n[self.id].requires_grad)
        };
        Ok(self.tape.push(value, Op::Reshape(self.id), rg))
    }
}

/// Boolean mask of the `m` largest entries in each row (ties: lower column).
pub fn top_m_mask(t: &Tensor, m: usize) -> Vec<bool> {
    let (r, c) = t.dims2();
    let mut keep = vec![false; r * c];
    for i in 0..r {
        let row = t.row_slice(i);
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
        for &j in order.iter().take(m) {
            keep[i * c + j] = true;
        }
    }
    keep
}

#[cfg(test)]
mod tests;

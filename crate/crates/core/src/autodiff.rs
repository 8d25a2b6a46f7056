//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation on a [`Var`] evaluates eagerly, appends one node holding its
//! value and a backward rule, and returns a handle to that node. [`Tape::backward`]
//! walks the nodes in reverse creation order and accumulates gradients additively.
//! A tape and its variables belong to a single thread.

use std::cell::{Cell, RefCell};
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::tensor::{broadcast_index_map, broadcast_shape, matmul_raw, Tensor};

/// Number of per-channel statistics produced by [`Var::channel_stats`].
pub const CHANNEL_STATS: usize = 6;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Scale(usize, f64),
    Offset(usize),
    Exp(usize),
    Log(usize),
    Relu(usize),
    Sigmoid(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin(usize, f64),
    MatMul(usize, usize),
    Transpose(usize),
    Reshape(usize),
    Sum(usize),
    SumLast(usize),
    /// Reduction that routes the gradient to one selected input per row.
    PickLast(usize, Vec<usize>),
    SoftmaxLast(usize),
    LogSoftmaxLast(usize),
    LogSumExpLast(usize),
    Conv2d {
        input: usize,
        kernel: usize,
        bias: usize,
    },
    AvgPool2(usize),
    Upsample2(usize),
    Gather(usize, Vec<usize>),
    Concat(Vec<usize>),
    ChannelStats(usize),
}

struct Node {
    value: Rc<Tensor>,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    backward_passes: Cell<usize>,
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy)]
pub struct Var<'t> {
    tape: &'t Tape,
    id: usize,
}

impl std::fmt::Debug for Var<'_> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("id", &self.id)
            .field("shape", &self.shape())
            .finish()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A differentiable leaf.
    pub fn param(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, value: Tensor) -> Var<'_> {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&self, value: f64) -> Var<'_> {
        self.constant(Tensor::scalar(value))
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// How many times [`Tape::backward`] has run on this tape.
    pub fn backward_passes(&self) -> usize {
        self.backward_passes.get()
    }

    fn push(&self, value: Tensor, op: Op, requires_grad: bool) -> Var<'_> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
        });
        Var {
            tape: self,
            id: nodes.len() - 1,
        }
    }

    fn value(&self, id: usize) -> Rc<Tensor> {
        Rc::clone(&self.nodes.borrow()[id].value)
    }

    fn tracked(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Back-propagates from a single-element `loss`.
    pub fn backward(&self, loss: Var<'_>) -> Result<Gradients> {
        if !std::ptr::eq(loss.tape, self) {
            return Err(Error::Usage("loss belongs to a different tape".into()));
        }
        let nodes = self.nodes.borrow();
        if nodes[loss.id].value.len() != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                nodes[loss.id].value.shape()
            )));
        }
        self.backward_passes.set(self.backward_passes.get() + 1);

        let mut grads: Vec<Option<Tensor>> = vec![None; nodes.len()];
        grads[loss.id] = Some(Tensor::ones(nodes[loss.id].value.shape()));

        for id in (0..=loss.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(nodes: &[Node], grads: &mut [Option<Tensor>], id: usize, contrib: Tensor) {
    if !nodes[id].requires_grad {
        return;
    }
    match &mut grads[id] {
        Some(g) => {
            for (a, b) in g.data_mut().iter_mut().zip(contrib.data()) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Sums a broadcast gradient back down to `target` shape.
fn reduce_to(g: &Tensor, target: &[usize]) -> Tensor {
    if g.shape() == target {
        return g.clone();
    }
    let map = broadcast_index_map(target, g.shape());
    let mut out = Tensor::zeros(target);
    let od = out.data_mut();
    for (k, &src) in map.iter().enumerate() {
        od[src] += g.data()[k];
    }
    out
}

/// Values of `t` broadcast up to `out_shape`, as a flat vector.
fn broadcast_data(t: &Tensor, out_shape: &[usize]) -> Vec<f64> {
    if t.shape() == out_shape {
        return t.data().to_vec();
    }
    broadcast_index_map(t.shape(), out_shape)
        .into_iter()
        .map(|i| t.data()[i])
        .collect()
}

fn last_dim(shape: &[usize]) -> (usize, usize) {
    let cols = *shape.last().expect("non-empty shape");
    let rows = shape.iter().product::<usize>() / cols;
    (rows, cols)
}

fn reduced_shape(shape: &[usize]) -> Vec<usize> {
    if shape.len() <= 1 {
        vec![1]
    } else {
        shape[..shape.len() - 1].to_vec()
    }
}

fn backprop_node(nodes: &[Node], id: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
    let out = &nodes[id].value;
    let val = |i: usize| &nodes[i].value;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g, val(*a).shape()));
            accumulate(nodes, grads, *b, reduce_to(g, val(*b).shape()));
        }
        Op::Sub(a, b) => {
            accumulate(nodes, grads, *a, reduce_to(g, val(*a).shape()));
            accumulate(nodes, grads, *b, reduce_to(&g.scale(-1.0), val(*b).shape()));
        }
        Op::Mul(a, b) => {
            let av = broadcast_data(val(*a), g.shape());
            let bv = broadcast_data(val(*b), g.shape());
            if nodes[*a].requires_grad {
                let ga = Tensor::new(g.shape(), mul_slices(g.data(), &bv)).expect("shape");
                accumulate(nodes, grads, *a, reduce_to(&ga, val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                let gb = Tensor::new(g.shape(), mul_slices(g.data(), &av)).expect("shape");
                accumulate(nodes, grads, *b, reduce_to(&gb, val(*b).shape()));
            }
        }
        Op::Div(a, b) => {
            let bv = broadcast_data(val(*b), g.shape());
            if nodes[*a].requires_grad {
                let d: Vec<f64> = g.data().iter().zip(&bv).map(|(g, b)| g / b).collect();
                let ga = Tensor::new(g.shape(), d).expect("shape");
                accumulate(nodes, grads, *a, reduce_to(&ga, val(*a).shape()));
            }
            if nodes[*b].requires_grad {
                // d(a/b)/db = -(a/b)/b
                let d: Vec<f64> = g
                    .data()
                    .iter()
                    .zip(out.data())
                    .zip(&bv)
                    .map(|((g, q), b)| -g * q / b)
                    .collect();
                let gb = Tensor::new(g.shape(), d).expect("shape");
                accumulate(nodes, grads, *b, reduce_to(&gb, val(*b).shape()));
            }
        }
        Op::Scale(a, s) => accumulate(nodes, grads, *a, g.scale(*s)),
        Op::Offset(a) => accumulate(nodes, grads, *a, g.clone()),
        Op::Exp(a) => accumulate(nodes, grads, *a, g.zip_map(out, |g, y| g * y).expect("shape")),
        Op::Log(a) => accumulate(nodes, grads, *a, g.zip_map(val(*a), |g, x| g / x).expect("shape")),
        Op::Relu(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > 0.0 { g } else { 0.0 })
                .expect("shape"),
        ),
        Op::Sigmoid(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(out, |g, y| g * y * (1.0 - y)).expect("shape"),
        ),
        Op::Sqrt(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(out, |g, y| if y > 0.0 { 0.5 * g / y } else { 0.0 })
                .expect("shape"),
        ),
        Op::Abs(a) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| g * sign(x)).expect("shape"),
        ),
        Op::ClampMin(a, lo) => accumulate(
            nodes,
            grads,
            *a,
            g.zip_map(val(*a), |g, x| if x > *lo { g } else { 0.0 })
                .expect("shape"),
        ),
        Op::MatMul(a, b) => {
            let (av, bv) = (val(*a), val(*b));
            let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
            if nodes[*a].requires_grad {
                let bt = bv.transpose2().expect("rank 2");
                let ga = matmul_raw(g.data(), bt.data(), m, n, k);
                accumulate(nodes, grads, *a, Tensor::new(&[m, k], ga).expect("shape"));
            }
            if nodes[*b].requires_grad {
                let at = av.transpose2().expect("rank 2");
                let gb = matmul_raw(at.data(), g.data(), k, m, n);
                accumulate(nodes, grads, *b, Tensor::new(&[k, n], gb).expect("shape"));
            }
        }
        Op::Transpose(a) => accumulate(nodes, grads, *a, g.transpose2().expect("rank 2")),
        Op::Reshape(a) => accumulate(
            nodes,
            grads,
            *a,
            g.reshape(val(*a).shape()).expect("same element count"),
        ),
        Op::Sum(a) => accumulate(nodes, grads, *a, Tensor::full(val(*a).shape(), g.item())),
        Op::SumLast(a) => {
            let (rows, cols) = last_dim(val(*a).shape());
            let mut d = Vec::with_capacity(rows * cols);
            for r in 0..rows {
                d.extend(std::iter::repeat_n(g.data()[r], cols));
            }
            accumulate(nodes, grads, *a, Tensor::new(val(*a).shape(), d).expect("shape"));
        }
        Op::PickLast(a, picks) => {
            let (_, cols) = last_dim(val(*a).shape());
            let mut d = Tensor::zeros(val(*a).shape());
            for (r, &p) in picks.iter().enumerate() {
                d.data_mut()[r * cols + p] += g.data()[r];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::SoftmaxLast(a) => {
            let (rows, cols) = last_dim(out.shape());
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let y = &out.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                for c in 0..cols {
                    d[r * cols + c] = y[c] * (gr[c] - dot);
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape(), d).expect("shape"));
        }
        Op::LogSoftmaxLast(a) => {
            let (rows, cols) = last_dim(out.shape());
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let ls = &out.data()[r * cols..(r + 1) * cols];
                let gr = &g.data()[r * cols..(r + 1) * cols];
                let gsum: f64 = gr.iter().sum();
                for c in 0..cols {
                    d[r * cols + c] = gr[c] - ls[c].exp() * gsum;
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(out.shape(), d).expect("shape"));
        }
        Op::LogSumExpLast(a) => {
            let x = val(*a);
            let (rows, cols) = last_dim(x.shape());
            let mut d = vec![0.0; rows * cols];
            for r in 0..rows {
                let lse = out.data()[r];
                for c in 0..cols {
                    d[r * cols + c] = g.data()[r] * (x.data()[r * cols + c] - lse).exp();
                }
            }
            accumulate(nodes, grads, *a, Tensor::new(x.shape(), d).expect("shape"));
        }
        Op::Conv2d {
            input,
            kernel,
            bias,
        } => {
            let (gi, gk, gb) = conv2d_backward(val(*input), val(*kernel), g);
            accumulate(nodes, grads, *input, gi);
            accumulate(nodes, grads, *kernel, gk);
            accumulate(nodes, grads, *bias, gb);
        }
        Op::AvgPool2(a) => {
            let s = val(*a).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut d = Tensor::zeros(s);
            for ch in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        let gv = g.data()[(ch * (h / 2) + y / 2) * (w / 2) + x / 2];
                        d.data_mut()[(ch * h + y) * w + x] = 0.25 * gv;
                    }
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Upsample2(a) => {
            let s = val(*a).shape();
            let (c, h, w) = (s[0], s[1], s[2]);
            let mut d = Tensor::zeros(s);
            for ch in 0..c {
                for y in 0..2 * h {
                    for x in 0..2 * w {
                        d.data_mut()[(ch * h + y / 2) * w + x / 2] +=
                            g.data()[(ch * 2 * h + y) * 2 * w + x];
                    }
                }
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Gather(a, idx) => {
            let mut d = Tensor::zeros(val(*a).shape());
            for (k, &i) in idx.iter().enumerate() {
                d.data_mut()[i] += g.data()[k];
            }
            accumulate(nodes, grads, *a, d);
        }
        Op::Concat(parts) => {
            let mut offset = 0;
            for &p in parts {
                let n = val(p).len();
                let d = Tensor::new(val(p).shape(), g.data()[offset..offset + n].to_vec())
                    .expect("shape");
                accumulate(nodes, grads, p, d);
                offset += n;
            }
        }
        Op::ChannelStats(a) => {
            accumulate(nodes, grads, *a, channel_stats_backward(val(*a), out, g));
        }
    }
}

fn mul_slices(a: &[f64], b: &[f64]) -> Vec<f64> {
    a.iter().zip(b).map(|(x, y)| x * y).collect()
}

fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

impl<'t> Var<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn id(&self) -> usize {
        self.id
    }

    pub fn value(&self) -> Rc<Tensor> {
        self.tape.value(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.tape.nodes.borrow()[self.id].value.shape().to_vec()
    }

    pub fn item(&self) -> f64 {
        self.value().item()
    }

    pub fn requires_grad(&self) -> bool {
        self.tape.tracked(self.id)
    }

    fn unary(self, value: Tensor, op: Op) -> Var<'t> {
        let rg = self.requires_grad();
        self.tape.push(value, op, rg)
    }

    fn binary(
        self,
        other: Var<'t>,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var<'t>> {
        let (a, b) = (self.value(), other.value());
        let shape = broadcast_shape(a.shape(), b.shape())
            .ok_or_else(|| Error::shape(name, a.shape(), b.shape()))?;
        let av = broadcast_data(&a, &shape);
        let bv = broadcast_data(&b, &shape);
        let data = av.iter().zip(&bv).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(Tensor::new(&shape, data)?, op, rg))
    }

    pub fn add(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "add", |a, b| a + b, Op::Add(self.id, other.id))
    }

    pub fn sub(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "sub", |a, b| a - b, Op::Sub(self.id, other.id))
    }

    pub fn mul(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "mul", |a, b| a * b, Op::Mul(self.id, other.id))
    }

    /// Unguarded elementwise quotient; callers that need an epsilon add it explicitly.
    pub fn div(self, other: Var<'t>) -> Result<Var<'t>> {
        self.binary(other, "div", |a, b| a / b, Op::Div(self.id, other.id))
    }

    pub fn scale(self, s: f64) -> Var<'t> {
        let v = self.value().scale(s);
        self.unary(v, Op::Scale(self.id, s))
    }

    pub fn add_scalar(self, s: f64) -> Var<'t> {
        let v = self.value().map(|x| x + s);
        self.unary(v, Op::Offset(self.id))
    }

    pub fn neg(self) -> Var<'t> {
        self.scale(-1.0)
    }

    pub fn exp(self) -> Var<'t> {
        let v = self.value().map(f64::exp);
        self.unary(v, Op::Exp(self.id))
    }

    /// Natural logarithm; non-positive entries are a domain error.
    pub fn log(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v <= 0.0 || v.is_nan()) {
            return Err(Error::Domain {
                op: "log",
                detail: format!("non-positive input {bad}"),
            });
        }
        Ok(self.unary(x.map(f64::ln), Op::Log(self.id)))
    }

    pub fn relu(self) -> Var<'t> {
        let v = self.value().map(|x| x.max(0.0));
        self.unary(v, Op::Relu(self.id))
    }

    pub fn sigmoid(self) -> Var<'t> {
        let v = self.value().map(|x| 1.0 / (1.0 + (-x).exp()));
        self.unary(v, Op::Sigmoid(self.id))
    }

    /// Square root with a zero subgradient at the origin.
    pub fn sqrt(self) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(bad) = x.data().iter().find(|&&v| v < 0.0) {
            return Err(Error::Domain {
                op: "sqrt",
                detail: format!("negative input {bad}"),
            });
        }
        Ok(self.unary(x.map(f64::sqrt), Op::Sqrt(self.id)))
    }

    pub fn abs(self) -> Var<'t> {
        let v = self.value().map(f64::abs);
        self.unary(v, Op::Abs(self.id))
    }

    pub fn square(self) -> Var<'t> {
        self.mul(self).expect("same shape")
    }

    /// `max(x, lo)`; the gradient is cut where the clamp is active.
    pub fn clamp_min(self, lo: f64) -> Var<'t> {
        let v = self.value().map(|x| x.max(lo));
        self.unary(v, Op::ClampMin(self.id, lo))
    }

    /// Identity on values, zero gradient.
    pub fn stop_gradient(self) -> Var<'t> {
        let v = (*self.value()).clone();
        self.tape.constant(v)
    }

    pub fn matmul(self, other: Var<'t>) -> Result<Var<'t>> {
        let v = self.value().matmul(&other.value())?;
        let rg = self.requires_grad() || other.requires_grad();
        Ok(self.tape.push(v, Op::MatMul(self.id, other.id), rg))
    }

    pub fn transpose(self) -> Result<Var<'t>> {
        let v = self.value().transpose2()?;
        Ok(self.unary(v, Op::Transpose(self.id)))
    }

    pub fn reshape(self, shape: &[usize]) -> Result<Var<'t>> {
        let v = self.value().reshape(shape)?;
        Ok(self.unary(v, Op::Reshape(self.id)))
    }

    pub fn sum(self) -> Var<'t> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(self) -> Var<'t> {
        let n = self.value().len() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sum over the last axis; a vector reduces to shape `[1]`.
    pub fn sum_lastdim(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = last_dim(x.shape());
        let d = (0..rows)
            .map(|r| x.data()[r * cols..(r + 1) * cols].iter().sum())
            .collect();
        let v = Tensor::new(&reduced_shape(x.shape()), d).expect("shape");
        self.unary(v, Op::SumLast(self.id))
    }

    pub fn mean_lastdim(self) -> Var<'t> {
        let cols = *self.shape().last().expect("rank >= 1") as f64;
        self.sum_lastdim().scale(1.0 / cols)
    }

    fn pick_lastdim(self, better: impl Fn(f64, f64) -> bool) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = last_dim(x.shape());
        let mut picks = Vec::with_capacity(rows);
        let mut d = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let mut best = 0;
            for c in 1..cols {
                if better(row[c], row[best]) {
                    best = c;
                }
            }
            picks.push(best);
            d.push(row[best]);
        }
        let v = Tensor::new(&reduced_shape(x.shape()), d).expect("shape");
        self.unary(v, Op::PickLast(self.id, picks))
    }

    /// Max over the last axis; the gradient goes to the first maximiser.
    pub fn max_lastdim(self) -> Var<'t> {
        self.pick_lastdim(|a, b| a > b)
    }

    pub fn min_lastdim(self) -> Var<'t> {
        self.pick_lastdim(|a, b| a < b)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax_lastdim(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = last_dim(x.shape());
        let mut d = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            d.extend(softmax(&x.data()[r * cols..(r + 1) * cols]));
        }
        let v = Tensor::new(x.shape(), d).expect("shape");
        self.unary(v, Op::SoftmaxLast(self.id))
    }

    pub fn log_softmax_lastdim(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = last_dim(x.shape());
        let mut d = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let row = &x.data()[r * cols..(r + 1) * cols];
            let lse = logsumexp(row);
            d.extend(row.iter().map(|v| v - lse));
        }
        let v = Tensor::new(x.shape(), d).expect("shape");
        self.unary(v, Op::LogSoftmaxLast(self.id))
    }

    pub fn logsumexp_lastdim(self) -> Var<'t> {
        let x = self.value();
        let (rows, cols) = last_dim(x.shape());
        let d = (0..rows)
            .map(|r| logsumexp(&x.data()[r * cols..(r + 1) * cols]))
            .collect();
        let v = Tensor::new(&reduced_shape(x.shape()), d).expect("shape");
        self.unary(v, Op::LogSumExpLast(self.id))
    }

    /// Same-padded 2-D cross-correlation (no kernel flip).
    ///
    /// `self` is `C_in×H×W`, `kernel` is `C_out×C_in×k×k` with odd `k`, `bias` is `C_out`.
    pub fn conv2d(self, kernel: Var<'t>, bias: Var<'t>) -> Result<Var<'t>> {
        let (x, w, b) = (self.value(), kernel.value(), bias.value());
        check_conv_shapes(&x, &w, &b)?;
        let v = conv2d_forward(&x, &w, &b);
        let rg = self.requires_grad() || kernel.requires_grad() || bias.requires_grad();
        Ok(self.tape.push(
            v,
            Op::Conv2d {
                input: self.id,
                kernel: kernel.id,
                bias: bias.id,
            },
            rg,
        ))
    }

    /// Per-channel spatial mean of a `C×H×W` tensor.
    pub fn global_avg_pool(self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 3 {
            return Err(Error::shape("global_avg_pool", &s, &[]));
        }
        self.reshape(&[s[0], s[1] * s[2]]).map(Var::mean_lastdim)
    }

    /// 2×2 average pooling of a `C×H×W` tensor with even `H`, `W`.
    pub fn avg_pool2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 || s[1] % 2 != 0 || s[2] % 2 != 0 {
            return Err(Error::shape("avg_pool2", s, &[]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[c, h / 2, w / 2]);
        for ch in 0..c {
            for y in 0..h {
                for xx in 0..w {
                    out.data_mut()[(ch * (h / 2) + y / 2) * (w / 2) + xx / 2] +=
                        0.25 * x.data()[(ch * h + y) * w + xx];
                }
            }
        }
        Ok(self.unary(out, Op::AvgPool2(self.id)))
    }

    /// Nearest-neighbour 2× upsampling of a `C×H×W` tensor.
    pub fn upsample2(self) -> Result<Var<'t>> {
        let x = self.value();
        let s = x.shape();
        if s.len() != 3 {
            return Err(Error::shape("upsample2", s, &[]));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let mut out = Tensor::zeros(&[c, 2 * h, 2 * w]);
        for ch in 0..c {
            for y in 0..2 * h {
                for xx in 0..2 * w {
                    out.data_mut()[(ch * 2 * h + y) * 2 * w + xx] =
                        x.data()[(ch * h + y / 2) * w + xx / 2];
                }
            }
        }
        Ok(self.unary(out, Op::Upsample2(self.id)))
    }

    /// Selects flat elements into a vector of `indices.len()` entries.
    pub fn gather(self, indices: &[usize]) -> Result<Var<'t>> {
        let x = self.value();
        if let Some(&bad) = indices.iter().find(|&&i| i >= x.len()) {
            return Err(Error::input(format!("gather index {bad} out of range {}", x.len())));
        }
        let v = Tensor::from_vec(indices.iter().map(|&i| x.data()[i]).collect());
        Ok(self.unary(v, Op::Gather(self.id, indices.to_vec())))
    }

    /// Per-channel (mean, std, min, max, mean |∂H|, mean |∂W|) of a `C×H×W` tensor,
    /// returned as `C×6`.
    pub fn channel_stats(self) -> Result<Var<'t>> {
        let x = self.value();
        if x.rank() != 3 {
            return Err(Error::shape("channel_stats", x.shape(), &[]));
        }
        let v = channel_stats_forward(&x);
        Ok(self.unary(v, Op::ChannelStats(self.id)))
    }
}

/// Concatenates along the first axis. All parts must agree on trailing dimensions.
pub fn concat<'t>(parts: &[Var<'t>]) -> Result<Var<'t>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::input("concat of zero tensors"))?;
    let tape = first.tape;
    let head = first.shape();
    let mut rows = 0;
    let mut data = Vec::new();
    for p in parts {
        let v = p.value();
        if v.shape()[1..] != head[1..] {
            return Err(Error::shape("concat", &head, v.shape()));
        }
        rows += v.shape()[0];
        data.extend_from_slice(v.data());
    }
    let mut shape = head.clone();
    shape[0] = rows;
    let rg = parts.iter().any(Var::requires_grad);
    Ok(tape.push(
        Tensor::new(&shape, data)?,
        Op::Concat(parts.iter().map(|p| p.id).collect()),
        rg,
    ))
}

/// Gradients produced by one backward pass.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when `var` was not reached or does not require a gradient.
    pub fn get(&self, var: Var<'_>) -> Option<&Tensor> {
        self.grads.get(var.id).and_then(Option::as_ref)
    }

    /// Gradient of `var`, or zeros when nothing flowed into it.
    pub fn wrt(&self, var: Var<'_>) -> Tensor {
        self.get(var)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(&var.shape()))
    }
}

pub fn softmax(row: &[f64]) -> Vec<f64> {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = row.iter().map(|v| (v - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

pub fn logsumexp(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn check_conv_shapes(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<()> {
    if w.rank() != 4 || w.shape()[2] != w.shape()[3] {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    if w.shape()[2] % 2 == 0 {
        return Err(Error::config(format!(
            "conv2d: kernel size {} must be odd",
            w.shape()[2]
        )));
    }
    if x.rank() != 3 || x.shape()[0] != w.shape()[1] {
        return Err(Error::shape("conv2d", x.shape(), w.shape()));
    }
    if b.shape() != [w.shape()[0]] {
        return Err(Error::shape("conv2d bias", b.shape(), &w.shape()[..1]));
    }
    Ok(())
}

/// Output/input index ranges for a kernel offset `d` over an axis of length `n`.
fn valid_range(n: usize, d: isize) -> (usize, usize) {
    let lo = (-d).max(0) as usize;
    let hi = (n as isize - d).min(n as isize).max(0) as usize;
    (lo, hi.max(lo))
}

fn conv2d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Tensor {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut out = vec![0.0; cout * h * wd];
    let xd = x.data();
    for o in 0..cout {
        let plane = &mut out[o * h * wd..(o + 1) * h * wd];
        plane.iter_mut().for_each(|v| *v = b.data()[o]);
        for i in 0..cin {
            let src = &xd[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let wv = w.data()[((o * cin + i) * k + ky) * k + kx];
                    if wv == 0.0 {
                        continue;
                    }
                    let (x0, x1) = valid_range(wd, dx);
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let orow = &mut plane[y * wd + x0..y * wd + x1];
                        let srow = &src[sy * wd + (x0 as isize + dx) as usize
                            ..sy * wd + (x1 as isize + dx) as usize];
                        for (ov, sv) in orow.iter_mut().zip(srow) {
                            *ov += wv * sv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(&[cout, h, wd], out).expect("shape")
}

fn conv2d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (cin, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (cout, k) = (w.shape()[0], w.shape()[2]);
    let pad = (k / 2) as isize;
    let mut gx = vec![0.0; x.len()];
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; cout];
    let (xd, gd) = (x.data(), g.data());
    for o in 0..cout {
        let gplane = &gd[o * h * wd..(o + 1) * h * wd];
        gb[o] = gplane.iter().sum();
        for i in 0..cin {
            let src = &xd[i * h * wd..(i + 1) * h * wd];
            let dst = &mut gx[i * h * wd..(i + 1) * h * wd];
            for ky in 0..k {
                let dy = ky as isize - pad;
                let (y0, y1) = valid_range(h, dy);
                for kx in 0..k {
                    let dx = kx as isize - pad;
                    let widx = ((o * cin + i) * k + ky) * k + kx;
                    let wv = w.data()[widx];
                    let (x0, x1) = valid_range(wd, dx);
                    let mut acc = 0.0;
                    for y in y0..y1 {
                        let sy = (y as isize + dy) as usize;
                        let s0 = sy * wd + (x0 as isize + dx) as usize;
                        let grow = &gplane[y * wd + x0..y * wd + x1];
                        let srow = &src[s0..s0 + (x1 - x0)];
                        acc += grow.iter().zip(srow).map(|(a, b)| a * b).sum::<f64>();
                        let drow = &mut dst[s0..s0 + (x1 - x0)];
                        for (dv, gv) in drow.iter_mut().zip(grow) {
                            *dv += wv * gv;
                        }
                    }
                    gw[widx] += acc;
                }
            }
        }
    }
    (
        Tensor::new(x.shape(), gx).expect("shape"),
        Tensor::new(w.shape(), gw).expect("shape"),
        Tensor::new(&[cout], gb).expect("shape"),
    )
}

fn channel_stats_forward(x: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (h * w) as f64;
    let mut out = Vec::with_capacity(c * CHANNEL_STATS);
    for ch in 0..c {
        let p = x.channel(ch);
        let mean = p.iter().sum::<f64>() / n;
        let var = p.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        let min = p.iter().copied().fold(f64::INFINITY, f64::min);
        let max = p.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let (mut gh, mut gw) = (0.0, 0.0);
        for y in 0..h {
            for xx in 0..w {
                if y + 1 < h {
                    gh += (p[(y + 1) * w + xx] - p[y * w + xx]).abs();
                }
                if xx + 1 < w {
                    gw += (p[y * w + xx + 1] - p[y * w + xx]).abs();
                }
            }
        }
        let gh = if h > 1 { gh / ((h - 1) * w) as f64 } else { 0.0 };
        let gw = if w > 1 { gw / (h * (w - 1)) as f64 } else { 0.0 };
        out.extend_from_slice(&[mean, var.sqrt(), min, max, gh, gw]);
    }
    Tensor::new(&[c, CHANNEL_STATS], out).expect("shape")
}

fn channel_stats_backward(x: &Tensor, out: &Tensor, g: &Tensor) -> Tensor {
    let (c, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let n = (h * w) as f64;
    let mut d = Tensor::zeros(x.shape());
    for ch in 0..c {
        let p = x.channel(ch);
        let s = &out.data()[ch * CHANNEL_STATS..(ch + 1) * CHANNEL_STATS];
        let gs = &g.data()[ch * CHANNEL_STATS..(ch + 1) * CHANNEL_STATS];
        let (mean, std) = (s[0], s[1]);
        let argmin = first_index(p, |a, b| a < b);
        let argmax = first_index(p, |a, b| a > b);
        let dp = d.channel_mut(ch);
        for (i, v) in p.iter().enumerate() {
            dp[i] += gs[0] / n;
            if std > 0.0 {
                dp[i] += gs[1] * (v - mean) / (n * std);
            }
        }
        dp[argmin] += gs[2];
        dp[argmax] += gs[3];
        if h > 1 {
            let cnt = ((h - 1) * w) as f64;
            for y in 0..h - 1 {
                for xx in 0..w {
                    let sg = sign(p[(y + 1) * w + xx] - p[y * w + xx]) * gs[4] / cnt;
                    dp[(y + 1) * w + xx] += sg;
                    dp[y * w + xx] -= sg;
                }
            }
        }
        if w > 1 {
            let cnt = (h * (w - 1)) as f64;
            for y in 0..h {
                for xx in 0..w - 1 {
                    let sg = sign(p[y * w + xx + 1] - p[y * w + xx]) * gs[5] / cnt;
                    dp[y * w + xx + 1] += sg;
                    dp[y * w + xx] -= sg;
                }
            }
        }
    }
    d
}

fn first_index(p: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let mut best = 0;
    for i in 1..p.len() {
        if better(p[i], p[best]) {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn t(shape: &[usize], d: &[f64]) -> Tensor {
        Tensor::new(shape, d.to_vec()).unwrap()
    }

    #[test]
    fn add_vectors() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        assert_eq!(a.add(b).unwrap().value().data(), &[4.0, 6.0]);
    }

    #[test]
    fn exp_of_zeros() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[3]));
        assert_eq!(a.exp().value().data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2]));
        match a.add(b) {
            Err(Error::Shape { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn log_rejects_non_positive() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 0.0]));
        assert!(matches!(a.log(), Err(Error::Domain { .. })));
    }

    #[test]
    fn matmul_hand_sum_and_identity() {
        let tape = Tape::new();
        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        assert_eq!(a.matmul(b).unwrap().value().data(), &[3.0, 7.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = Tensor::randn(&[3, 3], 1.0, &mut rng);
        let i3 = tape.constant(Tensor::eye(3));
        let xv = tape.constant(x.clone());
        assert_eq!(*i3.matmul(xv).unwrap().value(), x);
    }

    #[test]
    fn matmul_inner_mismatch() {
        let tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        assert!(matches!(a.matmul(b), Err(Error::Shape { .. })));
    }

    #[test]
    fn conv_delta_kernel_is_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = Tensor::randn(&[2, 5, 6], 1.0, &mut rng);
        let mut k = Tensor::zeros(&[2, 2, 3, 3]);
        k.set(&[0, 0, 1, 1], 1.0);
        k.set(&[1, 1, 1, 1], 1.0);
        let tape = Tape::new();
        let y = tape
            .constant(x.clone())
            .conv2d(tape.constant(k), tape.constant(Tensor::zeros(&[2])))
            .unwrap();
        assert_eq!(*y.value(), x);
    }

    #[test]
    fn conv_ones_kernel_on_constant() {
        let v = 0.7;
        let tape = Tape::new();
        let y = tape
            .constant(Tensor::full(&[1, 6, 6], v))
            .conv2d(
                tape.constant(Tensor::ones(&[1, 1, 3, 3])),
                tape.constant(Tensor::zeros(&[1])),
            )
            .unwrap()
            .value();
        for yy in 1..5 {
            for xx in 1..5 {
                assert!((y.at(&[0, yy, xx]) - 9.0 * v).abs() < 1e-12);
            }
        }
        // corner sees a 2×2 window under zero padding
        assert!((y.at(&[0, 0, 0]) - 4.0 * v).abs() < 1e-12);
    }

    #[test]
    fn conv_even_kernel_is_config_error() {
        let tape = Tape::new();
        let r = tape.constant(Tensor::zeros(&[1, 4, 4])).conv2d(
            tape.constant(Tensor::zeros(&[1, 1, 2, 2])),
            tape.constant(Tensor::zeros(&[1])),
        );
        assert!(matches!(r, Err(Error::Config(_))));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let tape = Tape::new();
        let s = tape.constant(Tensor::zeros(&[4])).softmax_lastdim().value();
        assert_eq!(s.data(), &[0.25; 4]);
        let s = tape.constant(t(&[2], &[1000.0, 0.0])).softmax_lastdim().value();
        assert!(s.all_finite());
        assert!((s.data()[0] - 1.0).abs() < 1e-12 && s.data()[1] < 1e-300);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let tape = Tape::new();
        let s = tape
            .constant(Tensor::randn(&[5, 7], 10.0, &mut rng))
            .softmax_lastdim()
            .value();
        for r in 0..5 {
            assert!((s.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn global_avg_pool_values_and_gradient() {
        let tape = Tape::new();
        let x = tape.param(t(&[2, 2, 2], &[0.0, 2.0, 4.0, 6.0, 5.0, 5.0, 5.0, 5.0]));
        let p = x.global_avg_pool().unwrap();
        assert_eq!(p.value().data(), &[3.0, 5.0]);
        let g = tape.backward(p.sum()).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.25; 8]);
    }

    #[test]
    fn quadratic_gradient() {
        let tape = Tape::new();
        let xv = t(&[3], &[1.0, -2.0, 0.5]);
        let x = tape.param(xv.clone());
        let g = tape.backward(x.square().sum()).unwrap();
        assert_eq!(*g.get(x).unwrap(), xv.scale(2.0));
    }

    #[test]
    fn stop_gradient_blocks_flow() {
        let tape = Tape::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let y = tape.param(t(&[2], &[3.0, 4.0]));
        let loss = x.stop_gradient().mul(y).unwrap().sum();
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[0.0, 0.0]);
        assert_eq!(g.wrt(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn gradients_accumulate_over_reuse() {
        let tape = Tape::new();
        let x = tape.param(t(&[1], &[3.0]));
        let loss = x.add(x).unwrap().mul(x).unwrap().sum(); // 2x²
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(x).data(), &[12.0]);
    }

    #[test]
    fn backward_requires_scalar() {
        let tape = Tape::new();
        let x = tape.param(Tensor::zeros(&[2]));
        assert!(matches!(tape.backward(x), Err(Error::Usage(_))));
        assert_eq!(tape.backward_passes(), 0);
    }

    #[test]
    fn channel_stats_constant_channel() {
        let tape = Tape::new();
        let s = tape
            .constant(Tensor::full(&[1, 4, 4], 0.3))
            .channel_stats()
            .unwrap()
            .value();
        let expect = [0.3, 0.0, 0.3, 0.3, 0.0, 0.0];
        for (a, b) in s.data().iter().zip(expect) {
            assert!((a - b).abs() < 1e-12, "{:?}", s.data());
        }
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let tape = Tape::new();
        let x = tape.constant(Tensor::ones(&[3, 4, 6]));
        let p = x.avg_pool2().unwrap();
        assert_eq!(p.shape(), vec![3, 2, 3]);
        assert_eq!(p.upsample2().unwrap().shape(), vec![3, 4, 6]);
        assert!(tape.constant(Tensor::ones(&[1, 3, 4])).avg_pool2().is_err());
    }
}

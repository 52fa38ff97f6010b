//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation pushes a new
//! node whose parents have smaller indices, so the arena order is already a
//! topological order and the backward pass is a single reverse sweep.

use super::kernels::{self, ConvDims};
use super::tensor::Tensor;
use crate::error::{Error, Result};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_8;

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Neg,
    Exp,
    Log,
    Tanh,
    Elu,
    Square,
    Scale(f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceOp {
    Sum,
    Mean,
    LogSumExp,
    Max,
}

/// Which axes a reduction collapses.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Axes {
    All,
    Dim(usize),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Exp(Var),
    Log(Var),
    Tanh(Var),
    Elu(Var),
    Square(Var),
    Scale(Var, f64),
    BiasAdd(Var, Var),
    Reduce(ReduceOp, Var, Layout),
    Conv2d {
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        dims: ConvDims,
    },
    GaussianLogProb {
        x: Var,
        mean: Var,
        log_std: Var,
    },
    Clamp(Var, f64, f64),
    Concat(Vec<Var>),
    Slice {
        x: Var,
        start: usize,
        len: usize,
    },
    Reshape(Var),
    GatherRows(Var, Vec<usize>),
}

/// `outer × len × inner` view of a reduction.
#[derive(Clone, Copy, Debug)]
struct Layout {
    outer: usize,
    len: usize,
    inner: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`; `None` when the loss does
    /// not depend on `v` through differentiable nodes.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Like [`get`](Self::get) but yields zeros shaped like `like`.
    pub fn get_or_zeros(&self, v: Var, like: &Tensor) -> Tensor {
        self.get(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(like.shape()))
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    backward_done: bool,
}

fn numel_one(t: &Tensor) -> bool {
    t.numel() == 1
}

fn broadcast_shape(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Vec<usize>> {
    if a.shape() == b.shape() || numel_one(b) {
        Ok(a.shape().to_vec())
    } else if numel_one(a) {
        Ok(b.shape().to_vec())
    } else {
        Err(Error::shape(
            op,
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ))
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match (a.numel(), b.numel()) {
        (x, y) if x == y => a.data().iter().zip(b.data()).map(|(&p, &q)| f(p, q)).collect(),
        (_, 1) => {
            let q = b.data()[0];
            a.data().iter().map(|&p| f(p, q)).collect()
        }
        _ => {
            let p = a.data()[0];
            b.data().iter().map(|&q| f(p, q)).collect()
        }
    }
}

/// Reduces a broadcast gradient back onto an operand of `target` elements.
fn unbroadcast(grad: Vec<f64>, target: &Tensor) -> Vec<f64> {
    if grad.len() == target.numel() {
        grad
    } else {
        vec![grad.iter().sum()]
    }
}

fn elu(x: f64) -> f64 {
    if x >= 0.0 {
        x
    } else {
        x.exp_m1()
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

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Leaf treated as a constant.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    // ---- linear algebra ------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.rank() != 2 || bv.rank() != 2 || av.shape()[1] != bv.shape()[0] {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", av.shape(), bv.shape()),
            ));
        }
        let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
        let out = kernels::matmul(av.data(), bv.data(), m, k, n);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), needs))
    }

    /// Adds a vector along the last axis of `x` (a bias row).
    pub fn bias_add(&mut self, x: Var, b: Var) -> Result<Var> {
        let (xv, bv) = (self.value(x), self.value(b));
        let n = *xv.shape().last().unwrap_or(&1);
        if bv.rank() != 1 || bv.shape()[0] != n || xv.rank() == 0 {
            return Err(Error::shape(
                "bias_add",
                format!("{:?} + {:?}", xv.shape(), bv.shape()),
            ));
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bb) in row.iter_mut().zip(bv.data()) {
                *o += bb;
            }
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        let needs = self.needs(x) || self.needs(b);
        Ok(self.push(t, Op::BiasAdd(x, b), needs))
    }

    // ---- elementwise ---------------------------------------------------

    /// Dispatches on `op`; binary ops require `y` and accept equal shapes or
    /// a one-element operand on either side.
    pub fn elementwise(&mut self, op: ElementwiseOp, x: Var, y: Option<Var>) -> Result<Var> {
        use ElementwiseOp::*;
        let need_y = || Error::Contract(format!("{op:?} needs a second operand"));
        match op {
            Add => self.add(x, y.ok_or_else(need_y)?),
            Sub => self.sub(x, y.ok_or_else(need_y)?),
            Mul => self.mul(x, y.ok_or_else(need_y)?),
            Neg => Ok(self.neg(x)),
            Exp => Ok(self.exp(x)),
            Log => self.log(x),
            Tanh => Ok(self.tanh(x)),
            Elu => Ok(self.elu(x)),
            Square => Ok(self.square(x)),
            Scale(c) => Ok(self.scale(x, c)),
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let shape = broadcast_shape(name, av, bv)?;
        let out = zip_broadcast(av, bv, f);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::new(shape, out)?, op, needs))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |p, q| p * q, Op::Mul(a, b))
    }

    fn unary(&mut self, x: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(x).map(f);
        let needs = self.needs(x);
        self.push(t, op, needs)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.unary(x, |v| -v, Op::Neg(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(x, f64::exp, Op::Exp(x))
    }

    /// Natural log; errors on any non-positive entry.
    pub fn log(&mut self, x: Var) -> Result<Var> {
        if let Some(index) = self.value(x).data().iter().position(|&v| !(v > 0.0)) {
            return Err(Error::Domain { op: "log", index });
        }
        Ok(self.unary(x, f64::ln, Op::Log(x)))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, f64::tanh, Op::Tanh(x))
    }

    pub fn elu(&mut self, x: Var) -> Var {
        self.unary(x, elu, Op::Elu(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.unary(x, |v| v * v, Op::Square(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    /// Clips into `[lo, hi]`; the gradient is passed through only where the
    /// input already lies inside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        self.unary(x, |v| v.clamp(lo, hi), Op::Clamp(x, lo, hi))
    }

    // ---- reductions ----------------------------------------------------

    pub fn reduce(&mut self, op: ReduceOp, x: Var, axes: Axes) -> Result<Var> {
        let xv = self.value(x);
        let (layout, shape) = match axes {
            Axes::All => (
                Layout {
                    outer: 1,
                    len: xv.numel(),
                    inner: 1,
                },
                Vec::new(),
            ),
            Axes::Dim(d) => {
                if d >= xv.rank() {
                    return Err(Error::Contract(format!(
                        "reduction axis {d} on a rank-{} tensor",
                        xv.rank()
                    )));
                }
                let s = xv.shape();
                let mut shape = s.to_vec();
                shape.remove(d);
                (
                    Layout {
                        outer: s[..d].iter().product(),
                        len: s[d],
                        inner: s[d + 1..].iter().product(),
                    },
                    shape,
                )
            }
        };
        if layout.len == 0 {
            return Err(Error::Contract("empty reduction axis".into()));
        }
        let data = xv.data();
        let mut out = Vec::with_capacity(layout.outer * layout.inner);
        for o in 0..layout.outer {
            for i in 0..layout.inner {
                let at = |l: usize| data[(o * layout.len + l) * layout.inner + i];
                let v = match op {
                    ReduceOp::Sum => (0..layout.len).map(at).sum(),
                    ReduceOp::Mean => (0..layout.len).map(at).sum::<f64>() / layout.len as f64,
                    ReduceOp::Max => (0..layout.len).map(at).fold(f64::NEG_INFINITY, f64::max),
                    ReduceOp::LogSumExp => {
                        let m = (0..layout.len).map(at).fold(f64::NEG_INFINITY, f64::max);
                        if m == f64::NEG_INFINITY {
                            m
                        } else {
                            m + (0..layout.len).map(|l| (at(l) - m).exp()).sum::<f64>().ln()
                        }
                    }
                };
                out.push(v);
            }
        }
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Reduce(op, x, layout), needs))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Sum, x, Axes::All)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::Mean, x, Axes::All)
    }

    pub fn logsumexp(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceOp::LogSumExp, x, Axes::All)
    }

    // ---- structured ops ------------------------------------------------

    /// Valid cross-correlation of `input` (`C×H×W`, or `N×C×H×W` for a batch)
    /// with `kernel` (`O×C×k×k`) and an optional per-channel bias.
    pub fn conv2d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Option<Var>,
        stride: usize,
    ) -> Result<Var> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let batched = iv.rank() == 4;
        let s = iv.shape();
        let (batch, c_in, h, w) = match s.len() {
            3 => (1, s[0], s[1], s[2]),
            4 => (s[0], s[1], s[2], s[3]),
            _ => return Err(Error::shape("conv2d", format!("input {s:?}"))),
        };
        let ks = kv.shape();
        if ks.len() != 4 || ks[1] != c_in || ks[2] != ks[3] || stride == 0 {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {ks:?} for input {s:?}, stride {stride}"),
            ));
        }
        let (c_out, k) = (ks[0], ks[2]);
        if k > h || k > w {
            return Err(Error::Contract(format!(
                "conv2d kernel {k} larger than input {h}x{w}"
            )));
        }
        if let Some(b) = bias {
            if self.value(b).shape() != [c_out] {
                return Err(Error::shape("conv2d", "bias must have one entry per output channel"));
            }
        }
        let dims = ConvDims {
            batch,
            c_in,
            h,
            w,
            c_out,
            k,
            stride,
            h_out: (h - k) / stride + 1,
            w_out: (w - k) / stride + 1,
        };
        let out = kernels::conv2d(
            iv.data(),
            kv.data(),
            bias.map(|b| self.value(b).data()),
            &dims,
        );
        let shape = if batched {
            vec![batch, c_out, dims.h_out, dims.w_out]
        } else {
            vec![c_out, dims.h_out, dims.w_out]
        };
        let needs = self.needs(input) || self.needs(kernel) || bias.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            },
            needs,
        ))
    }

    /// Log-density of a diagonal Gaussian, summed over the last axis.
    pub fn gaussian_logprob(&mut self, x: Var, mean: Var, log_std: Var) -> Result<Var> {
        let (xv, mv, sv) = (self.value(x), self.value(mean), self.value(log_std));
        if xv.shape() != mv.shape() || xv.shape() != sv.shape() || xv.rank() == 0 {
            return Err(Error::shape(
                "gaussian_logprob",
                format!("{:?}, {:?}, {:?}", xv.shape(), mv.shape(), sv.shape()),
            ));
        }
        let d = *xv.shape().last().unwrap();
        let mut out = Vec::with_capacity(xv.numel() / d);
        for ((xr, mr), sr) in xv
            .data()
            .chunks(d)
            .zip(mv.data().chunks(d))
            .zip(sv.data().chunks(d))
        {
            let mut acc = 0.0;
            for i in 0..d {
                let z = (xr[i] - mr[i]) * (-sr[i]).exp();
                acc += -sr[i] - HALF_LN_2PI - 0.5 * z * z;
            }
            out.push(acc);
        }
        let shape = xv.shape()[..xv.rank() - 1].to_vec();
        let needs = self.needs(x) || self.needs(mean) || self.needs(log_std);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::GaussianLogProb { x, mean, log_std },
            needs,
        ))
    }

    /// Concatenates along the last axis; all leading extents must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of nothing".into()))?;
        let lead = {
            let s = self.shape(*first);
            s[..s.len().saturating_sub(1)].to_vec()
        };
        let outer: usize = lead.iter().product();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("{s:?} vs leading {lead:?}")));
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(outer * total);
        for o in 0..outer {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[o * w..(o + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let needs = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::new(shape, out)?, Op::Concat(parts.to_vec()), needs))
    }

    /// `x[..., start..start + len]`.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let w = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::shape("slice", "scalar input"))?;
        if len == 0 || start + len > w {
            return Err(Error::shape("slice", format!("{start}+{len} of width {w}")));
        }
        let out: Vec<f64> = xv
            .data()
            .chunks(w)
            .flat_map(|r| r[start..start + len].iter().copied())
            .collect();
        let mut shape = xv.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let needs = self.needs(x);
        Ok(self.push(Tensor::new(shape, out)?, Op::Slice { x, start, len }, needs))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::Reshape(x), needs))
    }

    /// Rows of `x` (leading axis) in the order given by `indices`.
    pub fn gather_rows(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let t = self.value(x).select_rows(indices)?;
        let needs = self.needs(x);
        Ok(self.push(t, Op::GatherRows(x, indices.to_vec()), needs))
    }

    // ---- backward ------------------------------------------------------

    /// Reverse sweep from a one-element `loss`. A graph supports a single
    /// backward pass until [`reset_backward`](Self::reset_backward).
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.backward_done {
            return Err(Error::Contract(
                "backward called twice without reset".into(),
            ));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::full(self.shape(loss), 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    pub fn reset_backward(&mut self) {
        self.backward_done = false;
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) -> Result<()> {
        if !self.needs(v) {
            return Ok(());
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(self.shape(v).to_vec(), g)?);
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let out = &node.value;
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                if self.needs(*a) {
                    self.accumulate(grads, *a, kernels::matmul_nt(gd, bv.data(), m, k, n))?;
                }
                if self.needs(*b) {
                    self.accumulate(grads, *b, kernels::matmul_tn(av.data(), gd, m, k, n))?;
                }
            }
            Op::BiasAdd(x, b) => {
                self.accumulate(grads, *x, gd.to_vec())?;
                if self.needs(*b) {
                    let n = self.value(*b).numel();
                    let mut gb = vec![0.0; n];
                    for row in gd.chunks(n) {
                        for (s, v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    self.accumulate(grads, *b, gb)?;
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if self.needs(*a) {
                    self.accumulate(grads, *a, unbroadcast(gd.to_vec(), self.value(*a)))?;
                }
                if self.needs(*b) {
                    let gb = gd.iter().map(|v| sign * v).collect();
                    self.accumulate(grads, *b, unbroadcast(gb, self.value(*b)))?;
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let pick = |t: &Tensor, j: usize| {
                    if t.numel() == 1 {
                        t.data()[0]
                    } else {
                        t.data()[j]
                    }
                };
                if self.needs(*a) {
                    let ga = gd.iter().enumerate().map(|(j, v)| v * pick(bv, j)).collect();
                    self.accumulate(grads, *a, unbroadcast(ga, av))?;
                }
                if self.needs(*b) {
                    let gb = gd.iter().enumerate().map(|(j, v)| v * pick(av, j)).collect();
                    self.accumulate(grads, *b, unbroadcast(gb, bv))?;
                }
            }
            Op::Neg(x) => self.accumulate(grads, *x, gd.iter().map(|v| -v).collect())?,
            Op::Exp(x) => {
                let gx = gd.iter().zip(out.data()).map(|(g, y)| g * y).collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Log(x) => {
                let xv = self.value(*x);
                let gx = gd.iter().zip(xv.data()).map(|(g, x)| g / x).collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Tanh(x) => {
                let gx = gd
                    .iter()
                    .zip(out.data())
                    .map(|(g, y)| g * (1.0 - y * y))
                    .collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Elu(x) => {
                let xv = self.value(*x);
                let gx = gd
                    .iter()
                    .zip(xv.data().iter().zip(out.data()))
                    .map(|(g, (&x, &y))| if x >= 0.0 { *g } else { g * (y + 1.0) })
                    .collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Square(x) => {
                let xv = self.value(*x);
                let gx = gd.iter().zip(xv.data()).map(|(g, x)| 2.0 * g * x).collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Scale(x, c) => self.accumulate(grads, *x, gd.iter().map(|v| v * c).collect())?,
            Op::Clamp(x, lo, hi) => {
                let xv = self.value(*x);
                let gx = gd
                    .iter()
                    .zip(xv.data())
                    .map(|(g, &x)| if x >= *lo && x <= *hi { *g } else { 0.0 })
                    .collect();
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reduce(op, x, l) => {
                let xv = self.value(*x);
                let xd = xv.data();
                let mut gx = vec![0.0; xd.len()];
                for o in 0..l.outer {
                    for inn in 0..l.inner {
                        let gi = gd[o * l.inner + inn];
                        let yi = out.data()[o * l.inner + inn];
                        let idx = |q: usize| (o * l.len + q) * l.inner + inn;
                        match op {
                            ReduceOp::Sum => (0..l.len).for_each(|q| gx[idx(q)] = gi),
                            ReduceOp::Mean => {
                                let s = gi / l.len as f64;
                                (0..l.len).for_each(|q| gx[idx(q)] = s);
                            }
                            ReduceOp::LogSumExp => {
                                for q in 0..l.len {
                                    gx[idx(q)] = gi * (xd[idx(q)] - yi).exp();
                                }
                            }
                            ReduceOp::Max => {
                                if let Some(q) = (0..l.len).find(|&q| xd[idx(q)] == yi) {
                                    gx[idx(q)] = gi;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Conv2d {
                input,
                kernel,
                bias,
                dims,
            } => {
                let (g_in, g_k, g_b) = kernels::conv2d_backward(
                    self.value(*input).data(),
                    self.value(*kernel).data(),
                    gd,
                    dims,
                );
                self.accumulate(grads, *input, g_in)?;
                self.accumulate(grads, *kernel, g_k)?;
                if let Some(b) = bias {
                    self.accumulate(grads, *b, g_b)?;
                }
            }
            Op::GaussianLogProb { x, mean, log_std } => {
                let (xv, mv, sv) = (self.value(*x), self.value(*mean), self.value(*log_std));
                let d = *xv.shape().last().unwrap();
                let n = xv.numel();
                let (mut gx, mut gm, mut gs) = (vec![0.0; n], vec![0.0; n], vec![0.0; n]);
                for j in 0..n {
                    let inv = (-sv.data()[j]).exp();
                    let z = (xv.data()[j] - mv.data()[j]) * inv;
                    let gr = gd[j / d];
                    gx[j] = -gr * z * inv;
                    gm[j] = gr * z * inv;
                    gs[j] = gr * (z * z - 1.0);
                }
                self.accumulate(grads, *x, gx)?;
                self.accumulate(grads, *mean, gm)?;
                self.accumulate(grads, *log_std, gs)?;
            }
            Op::Concat(parts) => {
                let widths: Vec<usize> = parts
                    .iter()
                    .map(|&p| *self.shape(p).last().unwrap())
                    .collect();
                let total: usize = widths.iter().sum();
                let outer = gd.len() / total;
                let mut offset = 0;
                for (&p, &w) in parts.iter().zip(&widths) {
                    if self.needs(p) {
                        let mut gp = Vec::with_capacity(outer * w);
                        for o in 0..outer {
                            gp.extend_from_slice(&gd[o * total + offset..o * total + offset + w]);
                        }
                        self.accumulate(grads, p, gp)?;
                    }
                    offset += w;
                }
            }
            Op::Slice { x, start, len } => {
                let w = *self.shape(*x).last().unwrap();
                let mut gx = vec![0.0; self.value(*x).numel()];
                for (r, gr) in gd.chunks(*len).enumerate() {
                    gx[r * w + start..r * w + start + len].copy_from_slice(gr);
                }
                self.accumulate(grads, *x, gx)?;
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec())?,
            Op::GatherRows(x, idx) => {
                let xv = self.value(*x);
                let w = xv.row_len();
                let mut gx = vec![0.0; xv.numel()];
                for (r, &src) in idx.iter().enumerate() {
                    for c in 0..w {
                        gx[src * w + c] += gd[r * w + c];
                    }
                }
                self.accumulate(grads, *x, gx)?;
            }
        }
        Ok(())
    }
}

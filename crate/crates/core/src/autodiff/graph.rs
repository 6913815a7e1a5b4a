//! Tape of executed operations and the reverse sweep over it.
//!
//! Every operation appends one node holding its output value and whatever it
//! needs for the adjoint computation. Node indices are execution order, so the
//! backward sweep simply walks the node list from the end. Adjoints live in a
//! separate buffer, which keeps forward values immutable during the sweep.

use crate::error::{Error, Result};

use super::tensor::numel;
use super::{Scalar, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy)]
pub(crate) struct ConvGeom {
    pub batch: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub filters: usize,
    pub kh: usize,
    pub kw: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn patch(&self) -> usize {
        self.channels * self.kh * self.kw
    }

    pub fn out_plane(&self) -> usize {
        self.out_h * self.out_w
    }
}

pub(crate) enum Op<T> {
    Leaf,
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    Conv2d {
        x: Var,
        k: Var,
        geom: ConvGeom,
        cols: Vec<T>,
    },
    ChannelBias {
        x: Var,
        b: Var,
    },
    Prelu {
        x: Var,
        slope: Var,
    },
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: T,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Square {
        x: Var,
    },
    SqrtEps {
        x: Var,
    },
    Center {
        x: Var,
    },
    MeanRows {
        x: Var,
    },
    PairwiseSqDist {
        a: Var,
        b: Var,
    },
    PickRows {
        x: Var,
        idx: Vec<usize>,
    },
    LogSumExpRows {
        x: Var,
    },
}

impl<T> Op<T> {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Linear { .. } => "linear",
            Op::Conv2d { .. } => "conv2d",
            Op::ChannelBias { .. } => "channel_bias",
            Op::Prelu { .. } => "prelu",
            Op::MaxPool { .. } => "maxpool2d",
            Op::Reshape { .. } => "reshape",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::Mean { .. } => "mean",
            Op::Square { .. } => "square",
            Op::SqrtEps { .. } => "sqrt_eps",
            Op::Center { .. } => "center",
            Op::MeanRows { .. } => "mean_rows",
            Op::PairwiseSqDist { .. } => "pairwise_sq_dist",
            Op::PickRows { .. } => "pick_rows",
            Op::LogSumExpRows { .. } => "logsumexp_rows",
        }
    }

    fn inputs(&self) -> Vec<Var> {
        match *self {
            Op::Leaf => vec![],
            Op::Linear { x, w, b } => vec![x, w, b],
            Op::Conv2d { x, k, .. } => vec![x, k],
            Op::ChannelBias { x, b } | Op::Prelu { x, slope: b } => vec![x, b],
            Op::Add { a, b } | Op::Sub { a, b } | Op::Mul { a, b } => vec![a, b],
            Op::PairwiseSqDist { a, b } => vec![a, b],
            Op::MaxPool { x, .. }
            | Op::Reshape { x }
            | Op::Scale { x, .. }
            | Op::Sum { x }
            | Op::Mean { x }
            | Op::Square { x }
            | Op::SqrtEps { x }
            | Op::Center { x }
            | Op::MeanRows { x }
            | Op::PickRows { x, .. }
            | Op::LogSumExpRows { x } => vec![x],
        }
    }
}

pub(crate) struct Node<T> {
    pub shape: Vec<usize>,
    pub value: Vec<T>,
    pub requires_grad: bool,
    pub op: Op<T>,
}

/// Record of one forward computation; owned by exactly one run at a time.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    adjoints: Vec<Option<Vec<T>>>,
    visit_order: Vec<usize>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            adjoints: Vec::new(),
            visit_order: Vec::new(),
        }
    }

    /// Number of recorded operations, leaves included.
    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a constant input; no gradient flows into it.
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        let shape = t.shape().to_vec();
        self.push_unchecked(shape, t.into_data(), false, Op::Leaf)
    }

    /// Records a copy of a learnable tensor. Its gradient is available after
    /// [`Graph::backward`] through [`Graph::grad`].
    pub fn param(&mut self, t: &Tensor<T>) -> Var {
        self.push_unchecked(t.shape().to_vec(), t.data().to_vec(), true, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape matches value")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value[0]
    }

    /// d(loss)/d(v) after [`Graph::backward`]; `None` if nothing flowed into `v`.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.adjoints.get(v.0).and_then(|a| a.as_deref())
    }

    /// Node indices in the order the last backward sweep visited them.
    pub fn backward_order(&self) -> &[usize] {
        &self.visit_order
    }

    /// Operation names in execution order.
    pub fn op_names(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.op.name()).collect()
    }

    fn push_unchecked(&mut self, shape: Vec<usize>, value: Vec<T>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    /// Appends an operation result after checking that every value is finite.
    pub(crate) fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>) -> Result<Var> {
        if let Some(pos) = value.iter().position(|v| !v.is_finite()) {
            return Err(Error::Numeric(format!(
                "{} produced a non-finite value at element {}",
                op.name(),
                pos
            )));
        }
        let requires_grad = op.inputs().iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push_unchecked(shape, value, requires_grad, op))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Reverse sweep from a scalar `loss`. Adjoints accumulate additively
    /// wherever a value feeds more than one operation.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let n = &self.nodes[loss.0];
        if n.value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                n.shape
            )));
        }
        self.adjoints = (0..self.nodes.len()).map(|_| None).collect();
        self.visit_order.clear();
        self.adjoints[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.adjoints[i].take() else {
                continue;
            };
            self.visit_order.push(i);
            self.propagate(i, &g);
            self.adjoints[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let adj = &mut self.adjoints;
        {
            let node = &nodes[i];
            let val = |v: Var| nodes[v.0].value.as_slice();
            let shp = |v: Var| nodes[v.0].shape.as_slice();
            match &node.op {
                Op::Leaf => {}
                Op::Linear { x, w, b } => {
                    let (batch, inp) = (shp(*x)[0], shp(*x)[1]);
                    let out = shp(*w)[0];
                    super::nn::linear_backward(adj, nodes, (*x, *w, *b), val(*x), val(*w), g, (batch, inp, out));
                }
                Op::Conv2d { x, k, geom, cols } => {
                    super::nn::conv2d_backward(adj, nodes, *x, *k, val(*k), cols, g, geom);
                }
                Op::ChannelBias { x, b } => {
                    let (c, inner) = super::nn::channel_layout(shp(*x));
                    accumulate(adj, nodes, *x, g);
                    if let Some(gb) = slot(adj, nodes, *b) {
                        for (p, plane) in g.chunks(inner.max(1)).enumerate() {
                            let part = plane.iter().fold(T::zero(), |acc, &v| acc + v);
                            gb[p % c] = gb[p % c] + part;
                        }
                    }
                }
                Op::Prelu { x, slope } => {
                    let (c, inner) = super::nn::channel_layout(shp(*x));
                    let xs = val(*x);
                    let a = val(*slope);
                    let per_channel = a.len() != 1;
                    let inner = inner.max(1);
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (p, ((gp, xp), dp)) in g
                            .chunks(inner)
                            .zip(xs.chunks(inner))
                            .zip(gx.chunks_mut(inner))
                            .enumerate()
                        {
                            let s = if per_channel { a[p % c] } else { a[0] };
                            for ((d, &gj), &xj) in dp.iter_mut().zip(gp).zip(xp) {
                                *d = *d + if xj > T::zero() { gj } else { s * gj };
                            }
                        }
                    }
                    if let Some(ga) = slot(adj, nodes, *slope) {
                        for (p, (gp, xp)) in g.chunks(inner).zip(xs.chunks(inner)).enumerate() {
                            let part =
                                gp.iter().zip(xp).fold(
                                    T::zero(),
                                    |acc, (&gj, &xj)| if xj <= T::zero() { acc + gj * xj } else { acc },
                                );
                            let ch = if per_channel { p % c } else { 0 };
                            ga[ch] = ga[ch] + part;
                        }
                    }
                }
                Op::MaxPool { x, argmax } => {
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (o, &src) in argmax.iter().enumerate() {
                            gx[src] = gx[src] + g[o];
                        }
                    }
                }
                Op::Reshape { x } => {
                    accumulate(adj, nodes, *x, g);
                }
                Op::Add { a, b } => {
                    accumulate(adj, nodes, *a, g);
                    accumulate(adj, nodes, *b, g);
                }
                Op::Sub { a, b } => {
                    accumulate(adj, nodes, *a, g);
                    if let Some(gb) = slot(adj, nodes, *b) {
                        for (d, &s) in gb.iter_mut().zip(g) {
                            *d = *d - s;
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let (va, vb) = (val(*a), val(*b));
                    if let Some(ga) = slot(adj, nodes, *a) {
                        for j in 0..g.len() {
                            ga[j] = ga[j] + g[j] * vb[j];
                        }
                    }
                    if let Some(gb) = slot(adj, nodes, *b) {
                        for j in 0..g.len() {
                            gb[j] = gb[j] + g[j] * va[j];
                        }
                    }
                }
                Op::Scale { x, c } => {
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (d, &s) in gx.iter_mut().zip(g) {
                            *d = *d + *c * s;
                        }
                    }
                }
                Op::Sum { x } => {
                    if let Some(gx) = slot(adj, nodes, *x) {
                        gx.iter_mut().for_each(|d| *d = *d + g[0]);
                    }
                }
                Op::Mean { x } => {
                    let n = T::from_usize(val(*x).len());
                    if let Some(gx) = slot(adj, nodes, *x) {
                        let s = g[0] / n;
                        gx.iter_mut().for_each(|d| *d = *d + s);
                    }
                }
                Op::Square { x } => {
                    let xs = val(*x);
                    let two = T::from_f64(2.0);
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for j in 0..g.len() {
                            gx[j] = gx[j] + two * xs[j] * g[j];
                        }
                    }
                }
                Op::SqrtEps { x } => {
                    let out = &node.value;
                    let two = T::from_f64(2.0);
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for j in 0..g.len() {
                            gx[j] = gx[j] + g[j] / (two * out[j]);
                        }
                    }
                }
                Op::Center { x } => {
                    let mean_g = g.iter().copied().sum::<T>() / T::from_usize(g.len());
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for j in 0..g.len() {
                            gx[j] = gx[j] + g[j] - mean_g;
                        }
                    }
                }
                Op::MeanRows { x } => {
                    let (rows, cols) = (shp(*x)[0], shp(*x)[1]);
                    let n = T::from_usize(rows);
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for r in 0..rows {
                            for c in 0..cols {
                                gx[r * cols + c] = gx[r * cols + c] + g[c] / n;
                            }
                        }
                    }
                }
                Op::PairwiseSqDist { a, b } => {
                    super::ops::pairwise_sq_dist_backward(adj, nodes, *a, *b, val(*a), val(*b), shp(*a)[1], g);
                }
                Op::PickRows { x, idx } => {
                    let cols = shp(*x)[1];
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (r, &c) in idx.iter().enumerate() {
                            gx[r * cols + c] = gx[r * cols + c] + g[r];
                        }
                    }
                }
                Op::LogSumExpRows { x } => {
                    let cols = shp(*x)[1];
                    let xs = val(*x);
                    let out = &node.value;
                    if let Some(gx) = slot(adj, nodes, *x) {
                        for (r, &lse) in out.iter().enumerate() {
                            for c in 0..cols {
                                let j = r * cols + c;
                                gx[j] = gx[j] + g[r] * (xs[j] - lse).exp();
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Adjoint buffer of `v`, allocated on first use; `None` when `v` needs no gradient.
pub(crate) fn slot<'a, T: Scalar>(
    adjoints: &'a mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'a mut [T]> {
    if !nodes[v.0].requires_grad {
        return None;
    }
    let len = nodes[v.0].value.len();
    Some(adjoints[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

/// Adds `g` into the adjoint of `v`, copying when the buffer does not exist yet.
pub(crate) fn accumulate<T: Scalar>(adjoints: &mut [Option<Vec<T>>], nodes: &[Node<T>], v: Var, g: &[T]) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match adjoints[v.0].as_mut() {
        Some(dst) => add_assign(dst, g),
        None => adjoints[v.0] = Some(g.to_vec()),
    }
}

pub(crate) fn add_assign<T: Scalar>(dst: &mut [T], src: &[T]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op applied to its [`Var`]s. Values are computed
//! eagerly; [`Graph::backward`] walks the tape in reverse. Parameters are read
//! from a [`ParamStore`] and only receive gradients when their group is listed
//! as trainable for this graph, so the same network can be run as a frozen
//! feature extractor in one graph and trained in another.

use std::cell::RefCell;
use std::collections::HashMap;
use std::sync::Arc;

use crate::kernels::{self, ConvGeom};
use crate::param::{GroupId, ParamId, ParamKey, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// An op whose forward value is computed by the caller and whose backward is
/// supplied here. Returns one optional gradient per input.
pub trait CustomOp<T: Scalar> {
    fn backward(&self, inputs: &[&Tensor<T>], output: &Tensor<T>, grad: &Tensor<T>) -> Vec<Option<Tensor<T>>>;
}

enum Op<T: Scalar> {
    Leaf,
    Param(ParamKey),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Offset(Var),
    Square(Var),
    Abs(Var),
    Exp(Var),
    Log(Var),
    Clamp(Var, T, T),
    LeakyRelu(Var, T),
    Tanh(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    Upsample2x(Var),
    AvgPool2x(Var),
    Concat(Vec<Var>),
    Narrow { x: Var, start: usize },
    Broadcast(Var),
    Reshape(Var),
    SoftmaxXent { logits: Var, labels: Arc<Vec<usize>> },
    Custom { inputs: Vec<Var>, op: Arc<dyn CustomOp<T>> },
}

struct Node<T: Scalar> {
    value: Arc<Tensor<T>>,
    op: Op<T>,
    needs_grad: bool,
}

pub struct Graph<T: Scalar = f32> {
    nodes: RefCell<Vec<Node<T>>>,
    trainable: Vec<GroupId>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Default)]
pub struct Gradients<T: Scalar = f32> {
    params: HashMap<ParamKey, Tensor<T>>,
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, key: ParamKey) -> Option<&Tensor<T>> {
        self.params.get(&key)
    }

    pub fn of(&self, store: &ParamStore<T>, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&store.key(id))
    }

    /// Gradient with respect to a leaf created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&v)
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamKey, &Tensor<T>)> {
        self.params.iter()
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph in which no parameter group is trainable.
    pub fn new() -> Self {
        Self::with_trainable(&[])
    }

    pub fn with_trainable(groups: &[GroupId]) -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
            trainable: groups.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value: Arc::new(value), op, needs_grad });
        Var(nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> Arc<Tensor<T>> {
        self.nodes.borrow()[v.0].value.clone()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.needs(v)
    }

    /// A leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// A leaf whose gradient is reported by [`Gradients::wrt`].
    pub fn input(&self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let value = self.value(v);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Leaf, needs_grad: false });
        Var(nodes.len() - 1)
    }

    pub fn param(&self, store: &ParamStore<T>, id: ParamId) -> Var {
        let key = store.key(id);
        let needs = self.trainable.contains(&key.group);
        let value = store.shared(id);
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { value, op: Op::Param(key), needs_grad: needs });
        Var(nodes.len() - 1)
    }

    pub fn add(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x + y);
        self.push(out, Op::Add(a, b), self.needs(a) || self.needs(b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x - y);
        self.push(out, Op::Sub(a, b), self.needs(a) || self.needs(b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Var {
        let out = self.value(a).zip_map(&self.value(b), |x, y| x * y);
        self.push(out, Op::Mul(a, b), self.needs(a) || self.needs(b))
    }

    pub fn scale(&self, a: Var, s: f64) -> Var {
        let s = T::cst(s);
        let out = self.value(a).map(|x| x * s);
        self.push(out, Op::Scale(a, s), self.needs(a))
    }

    pub fn offset(&self, a: Var, c: f64) -> Var {
        let c = T::cst(c);
        let out = self.value(a).map(|x| x + c);
        self.push(out, Op::Offset(a), self.needs(a))
    }

    pub fn square(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x * x);
        self.push(out, Op::Square(a), self.needs(a))
    }

    pub fn abs(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.abs());
        self.push(out, Op::Abs(a), self.needs(a))
    }

    pub fn exp(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.exp());
        self.push(out, Op::Exp(a), self.needs(a))
    }

    pub fn log(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.ln());
        self.push(out, Op::Log(a), self.needs(a))
    }

    pub fn clamp(&self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::cst(lo), T::cst(hi));
        let out = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(out, Op::Clamp(a, lo, hi), self.needs(a))
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        let s = T::cst(slope);
        let out = self.value(a).map(|x| if x > T::zero() { x } else { x * s });
        self.push(out, Op::LeakyRelu(a, s), self.needs(a))
    }

    pub fn tanh(&self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        self.push(out, Op::Tanh(a), self.needs(a))
    }

    pub fn sigmoid(&self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(out, Op::Sigmoid(a), self.needs(a))
    }

    pub fn sum(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).sum());
        self.push(out, Op::Sum(a), self.needs(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let out = Tensor::scalar(self.value(a).mean());
        self.push(out, Op::Mean(a), self.needs(a))
    }

    pub fn conv2d(&self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let out = {
            let bv = b.map(|b| self.value(b));
            kernels::conv2d(&self.value(x), &self.value(w), bv.as_deref(), stride, pad)
        };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// `x: [N, I]`, `w: [O, I]`, `b: [O]` → `x·wᵀ + b`.
    pub fn linear(&self, x: Var, w: Var, b: Option<Var>) -> Var {
        let out = {
            let xv = self.value(x);
            let wv = self.value(w);
            let (n, i) = xv.dims2();
            let (o, wi) = wv.dims2();
            assert_eq!(i, wi, "linear input width {i} != weight width {wi}");
            let mut out = Tensor::zeros(&[n, o]);
            T::gemm(n, i, o, xv.data(), i as isize, 1, wv.data(), 1, i as isize, T::zero(), out.data_mut(), o as isize, 1);
            if let Some(b) = b {
                let bv = self.value(b);
                for row in out.data_mut().chunks_mut(o) {
                    for (v, &bb) in row.iter_mut().zip(bv.data()) {
                        *v = *v + bb;
                    }
                }
            }
            out
        };
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(out, Op::Linear { x, w, b }, needs)
    }

    pub fn upsample2x(&self, x: Var) -> Var {
        let out = kernels::upsample2x(&self.value(x));
        self.push(out, Op::Upsample2x(x), self.needs(x))
    }

    pub fn avgpool2x(&self, x: Var) -> Var {
        let out = kernels::avgpool2x(&self.value(x));
        self.push(out, Op::AvgPool2x(x), self.needs(x))
    }

    /// Concatenates along axis 1 (channels or features).
    pub fn concat(&self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let values: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
        let first = values[0].shape().to_vec();
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total_c = 0;
        for v in &values {
            let s = v.shape();
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            assert_eq!(s[0], n, "concat batch mismatch");
            assert_eq!(&s[2..], &first[2..], "concat trailing dims mismatch");
            total_c += s[1];
        }
        let mut data = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for v in &values {
                let c = v.shape()[1];
                data.extend_from_slice(&v.data()[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let needs = parts.iter().any(|&p| self.needs(p));
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), needs)
    }

    /// Slice `start..start+len` along axis 1.
    pub fn narrow(&self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let s = xv.shape().to_vec();
        assert!(start + len <= s[1], "narrow {start}+{len} exceeds axis of {}", s[1]);
        let inner: usize = s[2..].iter().product();
        let mut data = Vec::with_capacity(s[0] * len * inner);
        for b in 0..s[0] {
            let base = (b * s[1] + start) * inner;
            data.extend_from_slice(&xv.data()[base..base + len * inner]);
        }
        let mut shape = s.clone();
        shape[1] = len;
        self.push(Tensor::new(&shape, data), Op::Narrow { x, start }, self.needs(x))
    }

    /// `[N, C]` → `[N, C, h, w]`, constant over space.
    pub fn broadcast_spatial(&self, x: Var, h: usize, w: usize) -> Var {
        let xv = self.value(x);
        let (n, c) = xv.dims2();
        let mut data = Vec::with_capacity(n * c * h * w);
        for &v in xv.data() {
            data.extend(std::iter::repeat(v).take(h * w));
        }
        self.push(Tensor::new(&[n, c, h, w], data), Op::Broadcast(x), self.needs(x))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Var {
        let out = (*self.value(x)).clone().reshape(shape);
        self.push(out, Op::Reshape(x), self.needs(x))
    }

    /// Mean softmax cross-entropy of `logits: [N, K]` against class labels.
    pub fn softmax_cross_entropy(&self, logits: Var, labels: &[usize]) -> Var {
        let lv = self.value(logits);
        let (n, k) = lv.dims2();
        assert_eq!(labels.len(), n);
        let mut loss = T::zero();
        for (row, &label) in lv.data().chunks(k).zip(labels) {
            assert!(label < k, "label {label} out of range {k}");
            let m = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<T>().ln() + m;
            loss = loss + lse - row[label];
        }
        let out = Tensor::scalar(loss / T::cst(n as f64));
        self.push(
            out,
            Op::SoftmaxXent { logits, labels: Arc::new(labels.to_vec()) },
            self.needs(logits),
        )
    }

    /// Records a caller-computed value whose backward is given by `op`.
    pub fn custom(&self, inputs: &[Var], output: Tensor<T>, op: Arc<dyn CustomOp<T>>) -> Var {
        let needs = inputs.iter().any(|&v| self.needs(v));
        self.push(output, Op::Custom { inputs: inputs.to_vec(), op }, needs)
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        let nodes = self.nodes.borrow();
        assert_eq!(nodes[loss.0].value.len(), 1, "backward needs a scalar loss");
        let mut grads: Vec<Option<Tensor<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(nodes[loss.0].value.shape(), T::one()));
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &nodes[i];
            if !node.needs_grad {
                continue;
            }
            let val = |v: Var| nodes[v.0].value.clone();
            let needs = |v: Var| nodes[v.0].needs_grad;
            let mut acc = |v: Var, t: Tensor<T>| {
                if !nodes[v.0].needs_grad {
                    return;
                }
                match &mut grads[v.0] {
                    Some(existing) => existing.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(Var(i), g);
                }
                Op::Param(key) => match out.params.get_mut(key) {
                    Some(existing) => existing.add_assign(&g),
                    None => {
                        out.params.insert(*key, g);
                    }
                },
                Op::Add(a, b) => {
                    if needs(*b) {
                        acc(*b, g.clone());
                    }
                    acc(*a, g);
                }
                Op::Sub(a, b) => {
                    if needs(*b) {
                        acc(*b, g.map(|x| -x));
                    }
                    acc(*a, g);
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        acc(*a, g.zip_map(&val(*b), |x, y| x * y));
                    }
                    if needs(*b) {
                        acc(*b, g.zip_map(&val(*a), |x, y| x * y));
                    }
                }
                Op::Scale(a, s) => {
                    let s = *s;
                    acc(*a, g.map(|x| x * s));
                }
                Op::Offset(a) => acc(*a, g),
                Op::Square(a) => {
                    let two = T::cst(2.0);
                    acc(*a, g.zip_map(&val(*a), |gg, x| gg * two * x));
                }
                Op::Abs(a) => acc(
                    *a,
                    g.zip_map(&val(*a), |gg, x| {
                        if x > T::zero() {
                            gg
                        } else if x < T::zero() {
                            -gg
                        } else {
                            T::zero()
                        }
                    }),
                ),
                Op::Exp(a) => acc(*a, g.zip_map(&node.value, |gg, y| gg * y)),
                Op::Log(a) => acc(*a, g.zip_map(&val(*a), |gg, x| gg / x)),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    acc(*a, g.zip_map(&val(*a), |gg, x| if x >= lo && x <= hi { gg } else { T::zero() }));
                }
                Op::LeakyRelu(a, s) => {
                    let s = *s;
                    acc(*a, g.zip_map(&val(*a), |gg, x| if x > T::zero() { gg } else { gg * s }));
                }
                Op::Tanh(a) => acc(*a, g.zip_map(&node.value, |gg, y| gg * (T::one() - y * y))),
                Op::Sigmoid(a) => acc(*a, g.zip_map(&node.value, |gg, y| gg * y * (T::one() - y))),
                Op::Sum(a) => {
                    let gv = g[0];
                    acc(*a, Tensor::full(val(*a).shape(), gv));
                }
                Op::Mean(a) => {
                    let xv = val(*a);
                    let gv = g[0] / T::cst(xv.len() as f64);
                    acc(*a, Tensor::full(xv.shape(), gv));
                }
                Op::Conv2d { x, w, b, stride, pad } => {
                    let (gx, gw, gb) = conv2d_backward(
                        &val(*x),
                        &val(*w),
                        &g,
                        *stride,
                        *pad,
                        needs(*x),
                        needs(*w),
                        b.is_some_and(needs),
                    );
                    if let Some(t) = gx {
                        acc(*x, t);
                    }
                    if let Some(t) = gw {
                        acc(*w, t);
                    }
                    if let (Some(b), Some(t)) = (b, gb) {
                        acc(*b, t);
                    }
                }
                Op::Linear { x, w, b } => {
                    let xv = val(*x);
                    let wv = val(*w);
                    let (n, i) = xv.dims2();
                    let (o, _) = wv.dims2();
                    if needs(*x) {
                        let mut gx = Tensor::zeros(&[n, i]);
                        T::gemm(n, o, i, g.data(), o as isize, 1, wv.data(), i as isize, 1, T::zero(), gx.data_mut(), i as isize, 1);
                        acc(*x, gx);
                    }
                    if needs(*w) {
                        let mut gw = Tensor::zeros(&[o, i]);
                        T::gemm(o, n, i, g.data(), 1, o as isize, xv.data(), i as isize, 1, T::zero(), gw.data_mut(), i as isize, 1);
                        acc(*w, gw);
                    }
                    if let Some(b) = b {
                        if needs(*b) {
                            let mut gb = Tensor::zeros(&[o]);
                            for row in g.data().chunks(o) {
                                for (d, &s) in gb.data_mut().iter_mut().zip(row) {
                                    *d = *d + s;
                                }
                            }
                            acc(*b, gb);
                        }
                    }
                }
                Op::Upsample2x(x) => {
                    let (n, c, h, w) = val(*x).dims4();
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    let gd = g.data();
                    let dst = gx.data_mut();
                    for p in 0..n * c {
                        for y in 0..2 * h {
                            for xo in 0..2 * w {
                                let d = &mut dst[(p * h + y / 2) * w + xo / 2];
                                *d = *d + gd[(p * 2 * h + y) * 2 * w + xo];
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::AvgPool2x(x) => {
                    let (n, c, h, w) = val(*x).dims4();
                    let (ho, wo) = (h / 2, w / 2);
                    let q = T::cst(0.25);
                    let mut gx = Tensor::zeros(&[n, c, h, w]);
                    let gd = g.data();
                    let dst = gx.data_mut();
                    for p in 0..n * c {
                        for y in 0..h {
                            for xi in 0..w {
                                dst[(p * h + y) * w + xi] = gd[(p * ho + y / 2) * wo + xi / 2] * q;
                            }
                        }
                    }
                    acc(*x, gx);
                }
                Op::Concat(parts) => {
                    let shape = node.value.shape();
                    let n = shape[0];
                    let total_c = shape[1];
                    let inner: usize = shape[2..].iter().product();
                    let mut offset = 0;
                    for &p in parts {
                        let ps = val(p).shape().to_vec();
                        let c = ps[1];
                        if needs(p) {
                            let mut data = Vec::with_capacity(n * c * inner);
                            for b in 0..n {
                                let base = (b * total_c + offset) * inner;
                                data.extend_from_slice(&g.data()[base..base + c * inner]);
                            }
                            acc(p, Tensor::new(&ps, data));
                        }
                        offset += c;
                    }
                }
                Op::Narrow { x, start } => {
                    let xs = val(*x).shape().to_vec();
                    let len = node.value.shape()[1];
                    let inner: usize = xs[2..].iter().product();
                    let mut gx = Tensor::zeros(&xs);
                    for b in 0..xs[0] {
                        let dst = (b * xs[1] + start) * inner;
                        let src = b * len * inner;
                        gx.data_mut()[dst..dst + len * inner].copy_from_slice(&g.data()[src..src + len * inner]);
                    }
                    acc(*x, gx);
                }
                Op::Broadcast(x) => {
                    let xs = val(*x).shape().to_vec();
                    let (_, _, h, w) = node.value.dims4();
                    let gx = Tensor::new(&xs, g.data().chunks(h * w).map(|c| c.iter().copied().sum()).collect());
                    acc(*x, gx);
                }
                Op::Reshape(x) => {
                    let xs = val(*x).shape().to_vec();
                    acc(*x, g.reshape(&xs));
                }
                Op::SoftmaxXent { logits, labels } => {
                    let lv = val(*logits);
                    let (n, k) = lv.dims2();
                    let scale = g[0] / T::cst(n as f64);
                    let mut gl = Tensor::zeros(&[n, k]);
                    for ((row, grow), &label) in lv.data().chunks(k).zip(gl.data_mut().chunks_mut(k)).zip(labels.iter()) {
                        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                        let z: T = row.iter().map(|&v| (v - m).exp()).sum();
                        for (j, (gv, &v)) in grow.iter_mut().zip(row).enumerate() {
                            let p = (v - m).exp() / z;
                            let t = if j == label { T::one() } else { T::zero() };
                            *gv = (p - t) * scale;
                        }
                    }
                    acc(*logits, gl);
                }
                Op::Custom { inputs, op } => {
                    let vals: Vec<_> = inputs.iter().map(|&v| val(v)).collect();
                    let refs: Vec<&Tensor<T>> = vals.iter().map(|v| v.as_ref()).collect();
                    let gs = op.backward(&refs, &node.value, &g);
                    assert_eq!(gs.len(), inputs.len(), "custom op returned wrong gradient count");
                    for (&v, gv) in inputs.iter().zip(gs) {
                        if let Some(gv) = gv {
                            acc(v, gv);
                        }
                    }
                }
            }
        }
        out
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[allow(clippy::too_many_arguments, clippy::type_complexity)]
fn conv2d_backward<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> (Option<Tensor<T>>, Option<Tensor<T>>, Option<Tensor<T>>) {
    let (n, ci, h, wd) = x.dims4();
    let (co, _, k, _) = w.dims4();
    let geom = ConvGeom { c_in: ci, h, w: wd, kernel: k, stride, pad };
    let (ho, wo) = geom.out_size();
    let hw = ho * wo;
    let kk = geom.patch_len();
    let mut gx = want_x.then(|| Tensor::zeros(&[n, ci, h, wd]));
    let mut gw = want_w.then(|| Tensor::zeros(&[co, ci, k, k]));
    let mut gb = want_b.then(|| Tensor::zeros(&[co]));
    let mut cols = vec![T::zero(); kk * hw];
    let item = ci * h * wd;
    for b in 0..n {
        let gy = &g.data()[b * co * hw..(b + 1) * co * hw];
        if let Some(gw) = gw.as_mut() {
            kernels::im2col(x.item(b), &geom, &mut cols);
            T::gemm(co, hw, kk, gy, hw as isize, 1, &cols, 1, hw as isize, T::one(), gw.data_mut(), kk as isize, 1);
        }
        if let Some(gx) = gx.as_mut() {
            T::gemm(kk, co, hw, w.data(), 1, kk as isize, gy, hw as isize, 1, T::zero(), &mut cols, hw as isize, 1);
            kernels::col2im(&cols, &geom, &mut gx.data_mut()[b * item..(b + 1) * item]);
        }
        if let Some(gb) = gb.as_mut() {
            for (c, plane) in gy.chunks(hw).enumerate() {
                gb[c] = gb[c] + plane.iter().copied().sum::<T>();
            }
        }
    }
    (gx, gw, gb)
}

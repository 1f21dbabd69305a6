//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every forward operation as a node. Leaves are inserted
//! with [`Graph::leaf`]; a leaf whose tensor has `requires_grad` set gets an
//! entry in the [`GradientMap`] returned by [`Graph::backward`] when the loss
//! depends on it.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::kernels::{self, ConvGeom};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    Gelu,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, T),
    AddScalar(NodeId),
    Act(NodeId, Activation),
    Log(NodeId),
    Square(NodeId),
    Recip(NodeId),
    Sum(NodeId),
    Mean(NodeId),
    Reshape(NodeId),
    Permute(NodeId, Vec<usize>),
    Narrow {
        input: NodeId,
        axis: usize,
        start: usize,
    },
    Conv2d {
        input: NodeId,
        kernel: NodeId,
        geom: ConvGeom,
    },
    Attention {
        q: NodeId,
        k: NodeId,
        v: NodeId,
        probs: Vec<T>,
        groups: usize,
    },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// Gradients of a scalar loss with respect to the tracked leaves it reaches.
#[derive(Clone, Debug, Default)]
pub struct GradientMap<T> {
    grads: BTreeMap<NodeId, Tensor<T>>,
}

impl<T: Scalar> GradientMap<T> {
    pub fn get(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: NodeId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (NodeId, &Tensor<T>)> {
        self.grads.iter().map(|(&k, v)| (k, v))
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor<T>> {
        self.grads.remove(&id)
    }
}

/// How a binary op lines up its operands.
#[derive(Clone, Copy, Debug)]
enum Broadcast {
    Same,
    /// Right operand repeats over the left; `usize` is the right operand's length.
    Right(usize),
    Left(usize),
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() <= big.len() && big[big.len() - small.len()..] == *small
}

fn broadcast_rule(a: &[usize], b: &[usize], op: &'static str) -> Result<(Broadcast, Vec<usize>)> {
    let na: usize = a.iter().product();
    let nb: usize = b.iter().product();
    if a == b {
        Ok((Broadcast::Same, a.to_vec()))
    } else if nb == 1 || is_suffix(b, a) {
        Ok((Broadcast::Right(nb), a.to_vec()))
    } else if na == 1 || is_suffix(a, b) {
        Ok((Broadcast::Left(na), b.to_vec()))
    } else {
        Err(Error::dim(op, a, b))
    }
}

/// Sums `grad` (full length) down to a broadcast operand of length `len`.
fn reduce_to<T: Scalar>(grad: &[T], len: usize) -> Vec<T> {
    let mut out = vec![T::zero(); len];
    for chunk in grad.chunks(len) {
        for (o, &g) in out.iter_mut().zip(chunk) {
            *o += g;
        }
    }
    out
}

fn gelu<T: Scalar>(x: T) -> (T, T) {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t)
        + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x);
    (y, dy)
}

fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    /// Inserts a leaf; it is differentiated iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> NodeId {
        let tracked = tensor.requires_grad();
        self.push(tensor, Op::Leaf, tracked)
    }

    pub fn constant(&mut self, mut tensor: Tensor<T>) -> NodeId {
        tensor.set_requires_grad(false);
        self.leaf(tensor)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = match av.shape() {
            &[m, k] => (m, k),
            s => return Err(Error::dim("matmul", s, bv.shape())),
        };
        let n = match bv.shape() {
            &[k2, n] if k2 == k => n,
            s => return Err(Error::dim("matmul", av.shape(), s)),
        };
        let out = Tensor::new([m, n], kernels::matmul(av.data(), bv.data(), m, k, n))?;
        let tracked = self.tracked(a) || self.tracked(b);
        Ok(self.push(out, Op::MatMul(a, b), tracked))
    }

    fn binary(
        &mut self,
        a: NodeId,
        b: NodeId,
        name: &'static str,
        f: impl Fn(T, T) -> T,
    ) -> Result<(Tensor<T>, bool)> {
        let (av, bv) = (self.value(a), self.value(b));
        let (rule, shape) = broadcast_rule(av.shape(), bv.shape(), name)?;
        let (x, y) = (av.data(), bv.data());
        let data: Vec<T> = match rule {
            Broadcast::Same => x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect(),
            Broadcast::Right(len) => x.iter().enumerate().map(|(i, &p)| f(p, y[i % len])).collect(),
            Broadcast::Left(len) => y.iter().enumerate().map(|(i, &q)| f(x[i % len], q)).collect(),
        };
        Ok((Tensor::new(shape, data)?, self.tracked(a) || self.tracked(b)))
    }

    /// Element-wise sum with scalar or trailing-dimension broadcasting.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, tracked) = self.binary(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), tracked))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, tracked) = self.binary(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), tracked))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (out, tracked) = self.binary(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), tracked))
    }

    pub fn scale(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).scale(s);
        let tracked = self.tracked(a);
        self.push(out, Op::Scale(a, s), tracked)
    }

    pub fn add_scalar(&mut self, a: NodeId, s: T) -> NodeId {
        let out = self.value(a).map(|v| v + s);
        let tracked = self.tracked(a);
        self.push(out, Op::AddScalar(a), tracked)
    }

    pub fn activation(&mut self, a: NodeId, act: Activation) -> NodeId {
        let out = match act {
            Activation::Relu => self.value(a).map(|v| v.max(T::zero())),
            Activation::Sigmoid => self.value(a).map(sigmoid),
            Activation::Gelu => self.value(a).map(|v| gelu(v).0),
        };
        let tracked = self.tracked(a);
        self.push(out, Op::Act(a, act), tracked)
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Relu)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Sigmoid)
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        self.activation(a, Activation::Gelu)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if let Some(bad) = v.data().iter().find(|&&x| !(x > T::zero())) {
            return Err(Error::Domain(format!("log of non-positive value {bad}")));
        }
        let out = v.map(|x| x.ln());
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Log(a), tracked))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        let out = self.value(a).map(|x| x * x);
        let tracked = self.tracked(a);
        self.push(out, Op::Square(a), tracked)
    }

    pub fn recip(&mut self, a: NodeId) -> Result<NodeId> {
        let v = self.value(a);
        if v.data().iter().any(|&x| x == T::zero()) {
            return Err(Error::Domain("reciprocal of zero".into()));
        }
        let out = v.map(|x| T::one() / x);
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Recip(a), tracked))
    }

    /// Sum of all elements, as a scalar.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s: T = self.value(a).data().iter().copied().sum();
        let tracked = self.tracked(a);
        self.push(Tensor::scalar(s), Op::Sum(a), tracked)
    }

    pub fn mean(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a);
        let s: T = v.data().iter().copied().sum();
        let out = Tensor::scalar(s / T::of(v.numel() as f64));
        let tracked = self.tracked(a);
        self.push(out, Op::Mean(a), tracked)
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let mut out = self.value(a).reshape(shape.to_vec())?;
        out.set_requires_grad(false);
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Reshape(a), tracked))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: NodeId, perm: &[usize]) -> Result<NodeId> {
        let v = self.value(a);
        let mut seen = vec![false; v.rank()];
        if perm.len() != v.rank() || perm.iter().any(|&p| p >= seen.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::dim("permute", v.shape(), perm));
        }
        let (data, shape) = kernels::permute(v.data(), v.shape(), perm);
        let out = Tensor::new(shape, data)?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Permute(a, perm.to_vec()), tracked))
    }

    /// Slice `[start, start+len)` along `axis`.
    pub fn narrow(&mut self, a: NodeId, axis: usize, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(a);
        let shape = v.shape();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::dim("narrow", shape, &[axis, start, len]));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * shape[axis] + start) * inner;
            data.extend_from_slice(&v.data()[base..base + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let out = Tensor::new(out_shape, data)?;
        let tracked = self.tracked(a);
        Ok(self.push(out, Op::Narrow { input: a, axis, start }, tracked))
    }

    /// Cross-correlation of `input[B×C×H×W]` with `kernel[O×C×kh×kw]`, zero padding.
    pub fn conv2d(&mut self, input: NodeId, kernel: NodeId, stride: usize, pad: usize) -> Result<NodeId> {
        let (iv, kv) = (self.value(input), self.value(kernel));
        let (b, c, h, w) = match iv.shape() {
            &[b, c, h, w] => (b, c, h, w),
            s => return Err(Error::dim("conv2d", s, kv.shape())),
        };
        let (o, kh, kw) = match kv.shape() {
            &[o, kc, kh, kw] if kc == c => (o, kh, kw),
            s => return Err(Error::dim("conv2d", iv.shape(), s)),
        };
        let geom = ConvGeom::new(c, h, w, kh, kw, stride, pad).ok_or_else(|| {
            Error::Config(format!(
                "conv2d output extent not integral: input {h}×{w}, kernel {kh}×{kw}, stride {stride}, pad {pad}"
            ))
        })?;
        let img_len = c * h * w;
        let out_len = o * geom.out_len();
        let mut data = Vec::with_capacity(b * out_len);
        for bi in 0..b {
            let cols = kernels::im2col(&iv.data()[bi * img_len..(bi + 1) * img_len], &geom);
            data.extend(kernels::matmul(kv.data(), &cols, o, geom.patch_len(), geom.out_len()));
        }
        let out = Tensor::new([b, o, geom.out_h, geom.out_w], data)?;
        let tracked = self.tracked(input) || self.tracked(kernel);
        Ok(self.push(out, Op::Conv2d { input, kernel, geom }, tracked))
    }

    /// `softmax(q·kᵀ/√d)·v` per query row. Accepts `q[L×d]`, `k[S×d]`, `v[S×dv]`,
    /// or the same with a shared leading group axis.
    pub fn scaled_dot_attention(&mut self, q: NodeId, k: NodeId, v: NodeId) -> Result<NodeId> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (groups, l, d, s, dv) = match (qv.shape(), kv.shape(), vv.shape()) {
            (&[l, d], &[s, d2], &[s2, dv]) if d == d2 && s == s2 => (1, l, d, s, dv),
            (&[g, l, d], &[g2, s, d2], &[g3, s2, dv]) if g == g2 && g == g3 && d == d2 && s == s2 => {
                (g, l, d, s, dv)
            }
            (qs, ks, _) => return Err(Error::dim("attention", qs, ks)),
        };
        if s == 0 {
            return Err(Error::Contract("attention over empty context".into()));
        }
        let mut out = Vec::with_capacity(groups * l * dv);
        let mut probs = Vec::with_capacity(groups * l * s);
        for gi in 0..groups {
            let (o, p) = kernels::attention_forward(
                &qv.data()[gi * l * d..(gi + 1) * l * d],
                &kv.data()[gi * s * d..(gi + 1) * s * d],
                &vv.data()[gi * s * dv..(gi + 1) * s * dv],
                l,
                s,
                d,
                dv,
            );
            out.extend(o);
            probs.extend(p);
        }
        let shape = if qv.rank() == 2 { vec![l, dv] } else { vec![groups, l, dv] };
        let out = Tensor::new(shape, out)?;
        let tracked = self.tracked(q) || self.tracked(k) || self.tracked(v);
        Ok(self.push(out, Op::Attention { q, k, v, probs, groups }, tracked))
    }

    /// Attention weights recorded by an attention node (`[groups·L×S]`).
    pub fn attention_weights(&self, id: NodeId) -> Option<&[T]> {
        match &self.nodes[id.0].op {
            Op::Attention { probs, .. } => Some(probs),
            _ => None,
        }
    }

    /// Reverse-mode sweep from a scalar loss.
    pub fn backward(&self, loss: NodeId) -> Result<GradientMap<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !lv.item().is_finite() {
            return Err(Error::Contract("backward from a non-finite loss".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = GradientMap::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.tracked {
                continue;
            }
            let y = node.value.data();
            match &node.op {
                Op::Leaf => {
                    out.grads.insert(NodeId(idx), Tensor::new(node.value.shape().to_vec(), g)?);
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k) = av.dims2()?;
                    let n = bv.shape()[1];
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, kernels::matmul_nt(&g, bv.data(), m, n, k));
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, kernels::matmul_tn(av.data(), &g, m, k, n));
                    }
                }
                Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (rule, _) = broadcast_rule(av.shape(), bv.shape(), "backward")?;
                    let (x, yv) = (av.data(), bv.data());
                    let n = g.len();
                    let at = |i: usize, src: &[T], len: usize| src[i % len];
                    let (la, lb) = match rule {
                        Broadcast::Same => (n, n),
                        Broadcast::Right(len) => (n, len),
                        Broadcast::Left(len) => (len, n),
                    };
                    let (ga, gb): (Vec<T>, Vec<T>) = match &node.op {
                        Op::Add(..) => (g.clone(), g.clone()),
                        Op::Sub(..) => (g.clone(), g.iter().map(|&v| -v).collect()),
                        _ => (
                            (0..n).map(|i| g[i] * at(i, yv, lb)).collect(),
                            (0..n).map(|i| g[i] * at(i, x, la)).collect(),
                        ),
                    };
                    if self.tracked(*a) {
                        accumulate(&mut grads, *a, if la == n { ga } else { reduce_to(&ga, la) });
                    }
                    if self.tracked(*b) {
                        accumulate(&mut grads, *b, if lb == n { gb } else { reduce_to(&gb, lb) });
                    }
                }
                Op::Scale(a, s) => accumulate(&mut grads, *a, g.iter().map(|&v| v * *s).collect()),
                Op::AddScalar(a) | Op::Reshape(a) => accumulate(&mut grads, *a, g),
                Op::Act(a, act) => {
                    let x = self.value(*a).data();
                    let d: Vec<T> = match act {
                        Activation::Relu => x
                            .iter()
                            .zip(&g)
                            .map(|(&xi, &gi)| if xi > T::zero() { gi } else { T::zero() })
                            .collect(),
                        Activation::Sigmoid => {
                            y.iter().zip(&g).map(|(&yi, &gi)| gi * yi * (T::one() - yi)).collect()
                        }
                        Activation::Gelu => x.iter().zip(&g).map(|(&xi, &gi)| gi * gelu(xi).1).collect(),
                    };
                    accumulate(&mut grads, *a, d);
                }
                Op::Log(a) => {
                    let x = self.value(*a).data();
                    accumulate(&mut grads, *a, x.iter().zip(&g).map(|(&xi, &gi)| gi / xi).collect());
                }
                Op::Square(a) => {
                    let x = self.value(*a).data();
                    let two = T::of(2.0);
                    accumulate(&mut grads, *a, x.iter().zip(&g).map(|(&xi, &gi)| two * xi * gi).collect());
                }
                Op::Recip(a) => {
                    accumulate(&mut grads, *a, y.iter().zip(&g).map(|(&yi, &gi)| -gi * yi * yi).collect());
                }
                Op::Sum(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).numel();
                    accumulate(&mut grads, *a, vec![g[0] / T::of(n as f64); n]);
                }
                Op::Permute(a, perm) => {
                    let inv = kernels::inverse_permutation(perm);
                    let (back, _) = kernels::permute(&g, node.value.shape(), &inv);
                    accumulate(&mut grads, *a, back);
                }
                Op::Narrow { input, axis, start } => {
                    let shape = self.value(*input).shape();
                    let outer: usize = shape[..*axis].iter().product();
                    let inner: usize = shape[axis + 1..].iter().product();
                    let len = node.value.shape()[*axis];
                    let mut full = vec![T::zero(); self.value(*input).numel()];
                    for o in 0..outer {
                        let dst = (o * shape[*axis] + start) * inner;
                        let src = o * len * inner;
                        full[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                    }
                    accumulate(&mut grads, *input, full);
                }
                Op::Conv2d { input, kernel, geom } => {
                    let (iv, kv) = (self.value(*input), self.value(*kernel));
                    let o = kv.shape()[0];
                    let b = iv.shape()[0];
                    let img_len = geom.channels * geom.height * geom.width;
                    let out_len = o * geom.out_len();
                    let want_in = self.tracked(*input);
                    let want_k = self.tracked(*kernel);
                    let mut gk = vec![T::zero(); kv.numel()];
                    let mut gi = if want_in { vec![T::zero(); iv.numel()] } else { Vec::new() };
                    for bi in 0..b {
                        let gout = &g[bi * out_len..(bi + 1) * out_len];
                        if want_k {
                            let cols = kernels::im2col(&iv.data()[bi * img_len..(bi + 1) * img_len], geom);
                            let part = kernels::matmul_nt(gout, &cols, o, geom.out_len(), geom.patch_len());
                            for (acc, p) in gk.iter_mut().zip(part) {
                                *acc += p;
                            }
                        }
                        if want_in {
                            let dcols = kernels::matmul_tn(kv.data(), gout, o, geom.patch_len(), geom.out_len());
                            kernels::col2im_add(&dcols, geom, &mut gi[bi * img_len..(bi + 1) * img_len]);
                        }
                    }
                    if want_k {
                        accumulate(&mut grads, *kernel, gk);
                    }
                    if want_in {
                        accumulate(&mut grads, *input, gi);
                    }
                }
                Op::Attention { q, k, v, probs, groups } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let r = qv.rank();
                    let (l, d) = (qv.shape()[r - 2], qv.shape()[r - 1]);
                    let s = kv.shape()[r - 2];
                    let dv = vv.shape()[r - 1];
                    let mut gq = Vec::with_capacity(qv.numel());
                    let mut gk = Vec::with_capacity(kv.numel());
                    let mut gv = Vec::with_capacity(vv.numel());
                    for gi in 0..*groups {
                        let (a, b, c) = kernels::attention_backward(
                            &qv.data()[gi * l * d..(gi + 1) * l * d],
                            &kv.data()[gi * s * d..(gi + 1) * s * d],
                            &vv.data()[gi * s * dv..(gi + 1) * s * dv],
                            &probs[gi * l * s..(gi + 1) * l * s],
                            &g[gi * l * dv..(gi + 1) * l * dv],
                            l,
                            s,
                            d,
                            dv,
                        );
                        gq.extend(a);
                        gk.extend(b);
                        gv.extend(c);
                    }
                    if self.tracked(*q) {
                        accumulate(&mut grads, *q, gq);
                    }
                    if self.tracked(*k) {
                        accumulate(&mut grads, *k, gk);
                    }
                    if self.tracked(*v) {
                        accumulate(&mut grads, *v, gv);
                    }
                }
            }
        }
        Ok(out)
    }
}

fn accumulate<T: Scalar>(grads: &mut [Option<Vec<T>>], id: NodeId, contribution: Vec<T>) {
    match &mut grads[id.0] {
        Some(existing) => {
            for (e, c) in existing.iter_mut().zip(contribution) {
                *e += c;
            }
        }
        slot @ None => *slot = Some(contribution),
    }
}

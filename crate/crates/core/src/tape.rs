//! Reverse-mode gradient tape.
//!
//! Every operation appends a node holding its forward value and enough saved
//! state to run its vector-Jacobian product. Nodes are stored in creation
//! order, which is a topological order, so `backward` is a single reverse
//! sweep that visits each node once and sums gradients across fan-out.
//!
//! The token axis is the second-to-last dimension throughout; channels are last.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{numel, Real, Tensor};

/// GELU tanh-approximation constant, sqrt(2/pi).
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
/// GELU tanh-approximation cubic coefficient.
const GELU_CUBIC: f64 = 0.044_715;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn node_id(self) -> usize {
        self.0
    }
}

enum Value<T> {
    Owned(Tensor<T>),
    Param(ParamId),
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    AddSuffix(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    MatMul { a: Var, b: Var, shared_rhs: bool },
    Permute { x: Var, perm: Vec<usize> },
    Reshape(Var),
    Softmax(Var),
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { x: Var, axis: usize, start: usize },
    Mean { x: Var, axis: usize },
    SumAll(Var),
    ExpandLeading(Var),
    CrossEntropy { logits: Var, probs: Vec<T>, labels: Vec<usize> },
}

struct Node<T> {
    value: Value<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// A recording of one forward computation.
///
/// Parameters are read from a borrowed [`ParamStore`]; each parameter enters
/// the tape at most once, so its gradient is the sum over every use.
pub struct Tape<'p, T: Real = f32> {
    params: Option<&'p ParamStore<T>>,
    nodes: Vec<Node<T>>,
    param_vars: BTreeMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients<T = f32> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, Var)>,
}

impl<T: Real> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.iter().find(|(p, _)| *p == id).and_then(|(_, v)| self.wrt(*v))
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.params.iter().filter_map(move |&(id, v)| self.wrt(v).map(|g| (id, g)))
    }
}

fn split_last2(shape: &[usize]) -> (usize, usize, usize) {
    let r = shape.len();
    (numel(&shape[..r - 2]), shape[r - 2], shape[r - 1])
}

// out[r×c] += a[r×k] · b[k×c]
fn mm_nn<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let orow = &mut out[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * c..(p + 1) * c];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

// out[r×k] += a[r×c] · b[k×c]ᵀ
fn mm_nt<T: Real>(a: &[T], b: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let arow = &a[i * c..(i + 1) * c];
        for p in 0..k {
            let brow = &b[p * c..(p + 1) * c];
            let dot: T = arow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
            out[i * k + p] += dot;
        }
    }
}

// out[k×c] += a[r×k]ᵀ · g[r×c]
fn mm_tn<T: Real>(a: &[T], g: &[T], out: &mut [T], r: usize, k: usize, c: usize) {
    for i in 0..r {
        let grow = &g[i * c..(i + 1) * c];
        for p in 0..k {
            let av = a[i * k + p];
            let orow = &mut out[p * c..(p + 1) * c];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}

fn permute_data<T: Real>(data: &[T], shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    // stride in the input buffer for each output axis
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..rank).rev() {
            idx[ax] += 1;
            offset += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, out_shape)
}

fn gelu_parts<T: Real>(x: T) -> (T, T) {
    let c = T::lit(GELU_SQRT_2_OVER_PI);
    let a = T::lit(GELU_CUBIC);
    let half = T::lit(0.5);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::lit(3.0) * a * x * x);
    (y, dy)
}

fn axis_blocks(shape: &[usize], axis: usize) -> (usize, usize) {
    (numel(&shape[..axis]), numel(&shape[axis + 1..]))
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Self { params: None, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn with_params(params: &'p ParamStore<T>) -> Self {
        Self { params: Some(params), nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        match &self.nodes[var.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => self.params.expect("param node implies a store").value(*id),
        }
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        self.value(var).shape()
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value: Value::Owned(value), op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Brings a stored parameter onto the tape; repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Result<Var> {
        if let Some(&v) = self.param_vars.get(&id) {
            return Ok(v);
        }
        let store = self.params.ok_or_else(|| Error::Contract("tape has no parameter store".into()))?;
        if id.index() >= store.len() {
            return Err(Error::Contract(format!("unknown parameter id {}", id.index())));
        }
        let requires_grad = store.get(id).requires_grad;
        self.nodes.push(Node { value: Value::Param(id), op: Op::Leaf, requires_grad });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        Ok(v)
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        if cfg!(debug_assertions) && !value.is_finite() && inputs.iter().all(|&v| self.value(v).is_finite()) {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value: Value::Owned(value), op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("add", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p + q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("add", out, Op::Add(a, b), &[a, b])
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape.
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        let (ra, rb) = (x.rank(), y.rank());
        if rb > ra || x.shape()[ra - rb..] != *y.shape() {
            return Err(Error::shape("add_broadcast", x.shape(), y.shape()));
        }
        let nb = y.numel();
        let data =
            x.data().chunks_exact(nb).flat_map(|chunk| chunk.iter().zip(y.data()).map(|(&p, &q)| p + q)).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("add_broadcast", out, Op::AddSuffix(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.shape() != y.shape() {
            return Err(Error::shape("mul", x.shape(), y.shape()));
        }
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| p * q).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        self.push("mul", out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, factor: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * factor);
        self.push("scale", out, Op::Scale(x, factor), &[x])
    }

    /// Matrix product over the last two axes.
    ///
    /// `a` is `[..., r, k]`; `b` is either `[k, c]` (shared across every leading
    /// index of `a`) or `[..., k, c]` with the same leading dims as `a`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (x, y) = (self.value(a), self.value(b));
        if x.rank() < 2 || y.rank() < 2 {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let (batch, r, k) = split_last2(x.shape());
        let (_, k2, c) = split_last2(y.shape());
        let shared_rhs = y.rank() == 2;
        let lead_ok = shared_rhs || x.shape()[..x.rank() - 2] == y.shape()[..y.rank() - 2];
        if k != k2 || !lead_ok {
            return Err(Error::shape("matmul", x.shape(), y.shape()));
        }
        let mut out = vec![T::zero(); batch * r * c];
        for i in 0..batch {
            let bs = if shared_rhs { 0 } else { i * k * c };
            mm_nn(
                &x.data()[i * r * k..(i + 1) * r * k],
                &y.data()[bs..bs + k * c],
                &mut out[i * r * c..(i + 1) * r * c],
                r,
                k,
                c,
            );
        }
        let mut shape = x.shape().to_vec();
        let last = shape.len() - 1;
        shape[last] = c;
        let out = Tensor::from_parts(shape, out);
        self.push("matmul", out, Op::MatMul { a, b, shared_rhs }, &[a, b])
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let rank = t.rank();
        let mut seen = vec![false; rank];
        let valid = perm.len() == rank && perm.iter().all(|&p| p < rank && !core::mem::replace(&mut seen[p], true));
        if !valid {
            return Err(Error::dim("permute", format!("{perm:?} is not a permutation of rank {rank}")));
        }
        let (data, shape) = permute_data(t.data(), t.shape(), perm);
        let out = Tensor::from_parts(shape, data);
        self.push("permute", out, Op::Permute { x, perm: perm.to_vec() }, &[x])
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).rank();
        if rank < 2 {
            return Err(Error::dim("transpose_last2", "rank < 2"));
        }
        let mut perm: Vec<usize> = (0..rank).collect();
        perm.swap(rank - 2, rank - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(x), &[x])
    }

    /// Max-subtracted softmax over the last axis.
    pub fn softmax_lastdim(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let Some(&d) = t.shape().last() else {
            return Err(Error::dim("softmax_lastdim", "tensor has no last dimension"));
        };
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(d) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let start = out.len();
            let mut total = T::zero();
            for &v in row {
                let e = (v - max).exp();
                total += e;
                out.push(e);
            }
            for e in &mut out[start..] {
                *e /= total;
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("softmax_lastdim", out, Op::Softmax(x), &[x])
    }

    /// Per-token standardization over the last axis followed by an affine map.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        if eps <= T::zero() {
            return Err(Error::Config(format!("layernorm eps must be positive, got {eps}")));
        }
        let t = self.value(x);
        let Some(&d) = t.shape().last() else {
            return Err(Error::dim("layernorm", "tensor has no last dimension"));
        };
        let (g, b) = (self.value(gamma), self.value(beta));
        if g.shape() != [d] || b.shape() != [d] {
            let bad = if g.shape() != [d] { g.shape() } else { b.shape() };
            return Err(Error::shape("layernorm", &[d], bad));
        }
        let dn = T::lit(d as f64);
        let rows = t.numel() / d;
        let mut xhat = Vec::with_capacity(t.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(t.numel());
        for row in t.data().chunks_exact(d) {
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + eps).sqrt();
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(g.data()[j] * h + b.data()[j]);
            }
        }
        let out = Tensor::from_parts(t.shape().to_vec(), out);
        self.push("layernorm", out, Op::LayerNorm { x, gamma, beta, xhat, rstd }, &[x, gamma, beta])
    }

    /// GELU, tanh approximation: `0.5·x·(1 + tanh(sqrt(2/pi)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| gelu_parts(v).0);
        self.push("gelu", out, Op::Gelu(x), &[x])
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let Some(&first) = inputs.first() else {
            return Err(Error::dim("concat", "no inputs"));
        };
        let base = self.value(first).shape().to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let compatible =
                s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, inner) = axis_blocks(&base, axis);
        let mut shape = base;
        shape[axis] = total;
        let mut out = Vec::with_capacity(numel(&shape));
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let block = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let out = Tensor::from_parts(shape, out);
        self.push("concat", out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs)
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() || len == 0 || start + len > t.shape()[axis] {
            return Err(Error::dim("slice", format!("[{start}, {}) on axis {axis} of {:?}", start + len, t.shape())));
        }
        let (outer, inner) = axis_blocks(t.shape(), axis);
        let full = t.shape()[axis] * inner;
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            out.extend_from_slice(&t.data()[base..base + len * inner]);
        }
        let mut shape = t.shape().to_vec();
        shape[axis] = len;
        let out = Tensor::from_parts(shape, out);
        self.push("slice", out, Op::Slice { x, axis, start }, &[x])
    }

    /// Splits along `axis` into consecutive pieces of the given sizes.
    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let extent = self.value(x).shape().get(axis).copied().unwrap_or(0);
        if sizes.iter().sum::<usize>() != extent {
            return Err(Error::dim("split", format!("sizes {sizes:?} do not cover extent {extent} of axis {axis}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.slice(x, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    /// Mean over `axis`; the axis is removed from the shape.
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::dim("mean", format!("axis {axis} out of range for {:?}", t.shape())));
        }
        let (outer, inner) = axis_blocks(t.shape(), axis);
        let len = t.shape()[axis];
        let scale = T::one() / T::lit(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..len {
                let src = &t.data()[(o * len + a) * inner..(o * len + a + 1) * inner];
                for (dst, &v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        for v in &mut out {
            *v *= scale;
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let out = Tensor::from_parts(shape, out);
        self.push("mean", out, Op::Mean { x, axis }, &[x])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum());
        self.push("sum_all", out, Op::SumAll(x), &[x])
    }

    /// Repeats `x` along a new leading axis of length `count`.
    pub fn expand_leading(&mut self, x: Var, count: usize) -> Result<Var> {
        if count == 0 {
            return Err(Error::dim("expand_leading", "count must be positive"));
        }
        let t = self.value(x);
        let mut shape = Vec::with_capacity(t.rank() + 1);
        shape.push(count);
        shape.extend_from_slice(t.shape());
        let mut data = Vec::with_capacity(count * t.numel());
        for _ in 0..count {
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(shape, data);
        self.push("expand_leading", out, Op::ExpandLeading(x), &[x])
    }

    /// Mean softmax cross-entropy of `[batch, classes]` logits against integer labels.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::shape("cross_entropy", t.shape(), &[labels.len()]));
        }
        let k = t.shape()[1];
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Input(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = Vec::with_capacity(t.numel());
        let mut loss = T::zero();
        for (row, &label) in t.data().chunks_exact(k).zip(labels) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<T>().ln() + max;
            loss += lse - row[label];
            probs.extend(row.iter().map(|&v| (v - lse).exp()));
        }
        let out = Tensor::scalar(loss / T::lit(labels.len() as f64));
        self.push("cross_entropy", out, Op::CrossEntropy { logits, probs, labels: labels.to_vec() }, &[logits])
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!("backward needs a scalar loss, got shape {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::ones(self.shape(loss).to_vec()));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if self.nodes[i].requires_grad {
                self.backprop(Var(i), &g, &mut grads)?;
            }
            grads[i] = Some(g);
        }
        let params = self.param_vars.iter().map(|(&id, &v)| (id, v)).collect();
        Ok(Gradients { grads, params })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], var: Var, g: Tensor<T>) -> Result<()> {
        if !self.nodes[var.0].requires_grad {
            return Ok(());
        }
        match &mut grads[var.0] {
            Some(acc) => acc.add_assign(&g),
            slot @ None => {
                *slot = Some(g);
                Ok(())
            }
        }
    }

    fn backprop(&self, out: Var, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &self.nodes[out.0].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                self.accumulate(grads, *b, g.clone())?;
            }
            Op::AddSuffix(a, b) => {
                self.accumulate(grads, *a, g.clone())?;
                let shape = self.shape(*b).to_vec();
                let nb = numel(&shape);
                let mut gb = vec![T::zero(); nb];
                for chunk in gd.chunks_exact(nb) {
                    for (acc, &v) in gb.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *b, Tensor::from_parts(shape, gb))?;
            }
            Op::Mul(a, b) => {
                let (x, y) = (self.value(*a), self.value(*b));
                let ga = gd.iter().zip(y.data()).map(|(&u, &v)| u * v).collect();
                let gb = gd.iter().zip(x.data()).map(|(&u, &v)| u * v).collect();
                self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga))?;
                self.accumulate(grads, *b, Tensor::from_parts(y.shape().to_vec(), gb))?;
            }
            Op::Scale(x, factor) => {
                let f = *factor;
                self.accumulate(grads, *x, g.map(|v| v * f))?;
            }
            Op::MatMul { a, b, shared_rhs } => {
                let (x, y) = (self.value(*a), self.value(*b));
                let (batch, r, k) = split_last2(x.shape());
                let c = y.shape()[y.rank() - 1];
                if self.requires_grad(*a) {
                    let mut ga = vec![T::zero(); x.numel()];
                    for i in 0..batch {
                        let bs = if *shared_rhs { 0 } else { i * k * c };
                        mm_nt(
                            &gd[i * r * c..(i + 1) * r * c],
                            &y.data()[bs..bs + k * c],
                            &mut ga[i * r * k..(i + 1) * r * k],
                            r,
                            k,
                            c,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::from_parts(x.shape().to_vec(), ga))?;
                }
                if self.requires_grad(*b) {
                    let mut gb = vec![T::zero(); y.numel()];
                    for i in 0..batch {
                        let bs = if *shared_rhs { 0 } else { i * k * c };
                        mm_tn(
                            &x.data()[i * r * k..(i + 1) * r * k],
                            &gd[i * r * c..(i + 1) * r * c],
                            &mut gb[bs..bs + k * c],
                            r,
                            k,
                            c,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::from_parts(y.shape().to_vec(), gb))?;
                }
            }
            Op::Permute { x, perm } => {
                let mut inverse = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inverse[p] = i;
                }
                let (data, shape) = permute_data(gd, g.shape(), &inverse);
                self.accumulate(grads, *x, Tensor::from_parts(shape, data))?;
            }
            Op::Reshape(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, g.clone().reshape(shape)?)?;
            }
            Op::Softmax(x) => {
                let y = self.value(out);
                let d = y.shape()[y.rank() - 1];
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks_exact(d).zip(gd.chunks_exact(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&p, &q)| p * q).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&p, &q)| p * (q - dot)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(y.shape().to_vec(), gx))?;
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gm = self.value(*gamma).data();
                let d = gm.len();
                let dn = T::lit(d as f64);
                let mut gx = Vec::with_capacity(xhat.len());
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                for ((gr, hr), &rs) in gd.chunks_exact(d).zip(xhat.chunks_exact(d)).zip(rstd) {
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        mean_dh += dh;
                        mean_dh_h += dh * hr[j];
                        ggamma[j] += gr[j] * hr[j];
                        gbeta[j] += gr[j];
                    }
                    mean_dh /= dn;
                    mean_dh_h /= dn;
                    gx.extend((0..d).map(|j| rs * (gr[j] * gm[j] - mean_dh - hr[j] * mean_dh_h)));
                }
                self.accumulate(grads, *x, Tensor::from_parts(g.shape().to_vec(), gx))?;
                self.accumulate(grads, *gamma, Tensor::from_parts(vec![d], ggamma))?;
                self.accumulate(grads, *beta, Tensor::from_parts(vec![d], gbeta))?;
            }
            Op::Gelu(x) => {
                let xv = self.value(*x);
                let gx = xv.data().iter().zip(gd).map(|(&v, &u)| u * gelu_parts(v).1).collect();
                self.accumulate(grads, *x, Tensor::from_parts(xv.shape().to_vec(), gx))?;
            }
            Op::Concat { inputs, axis } => {
                let (outer, inner) = axis_blocks(g.shape(), *axis);
                let full = g.shape()[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let shape = self.shape(v).to_vec();
                    let block = shape[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut part = Vec::with_capacity(outer * block);
                        for o in 0..outer {
                            let base = o * full + offset;
                            part.extend_from_slice(&gd[base..base + block]);
                        }
                        self.accumulate(grads, v, Tensor::from_parts(shape, part))?;
                    }
                    offset += block;
                }
            }
            Op::Slice { x, axis, start } => {
                let shape = self.shape(*x).to_vec();
                let (outer, inner) = axis_blocks(&shape, *axis);
                let full = shape[*axis] * inner;
                let block = g.shape()[*axis] * inner;
                let mut gx = vec![T::zero(); numel(&shape)];
                for o in 0..outer {
                    let base = o * full + start * inner;
                    gx[base..base + block].copy_from_slice(&gd[o * block..(o + 1) * block]);
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, gx))?;
            }
            Op::Mean { x, axis } => {
                let shape = self.shape(*x).to_vec();
                let (outer, inner) = axis_blocks(&shape, *axis);
                let len = shape[*axis];
                let scale = T::one() / T::lit(len as f64);
                let mut gx = Vec::with_capacity(numel(&shape));
                for o in 0..outer {
                    for _ in 0..len {
                        gx.extend(gd[o * inner..(o + 1) * inner].iter().map(|&v| v * scale));
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, gx))?;
            }
            Op::SumAll(x) => {
                let shape = self.shape(*x).to_vec();
                self.accumulate(grads, *x, Tensor::full(shape, gd[0]))?;
            }
            Op::ExpandLeading(x) => {
                let shape = self.shape(*x).to_vec();
                let n = numel(&shape);
                let mut gx = vec![T::zero(); n];
                for chunk in gd.chunks_exact(n) {
                    for (acc, &v) in gx.iter_mut().zip(chunk) {
                        *acc += v;
                    }
                }
                self.accumulate(grads, *x, Tensor::from_parts(shape, gx))?;
            }
            Op::CrossEntropy { logits, probs, labels } => {
                let shape = self.shape(*logits).to_vec();
                let k = shape[1];
                let scale = gd[0] / T::lit(labels.len() as f64);
                let mut gx: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (row, &label) in labels.iter().enumerate() {
                    gx[row * k + label] -= scale;
                }
                self.accumulate(grads, *logits, Tensor::from_parts(shape, gx))?;
            }
        }
        Ok(())
    }
}

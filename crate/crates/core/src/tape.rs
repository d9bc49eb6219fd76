//! Eager reverse-mode differentiation.
//!
//! A [`Tape`] records each op as it executes. [`Tape::backward`] consumes the
//! tape, replays adjoints in exact reverse order, and returns the gradients of
//! every grad-enabled leaf. A tape is built per forward pass and never reused.
//!
//! Every op checks its output for NaN/Inf and fails with [`Error::NonFinite`]
//! naming the op; backward applies the same check to each propagated adjoint.

use std::borrow::Cow;

use crate::par::Execution;
use crate::tensor::{Real, Tensor};
use crate::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Elementwise function pointer pair used by [`Tape::unary`].
pub type ScalarFn<T> = fn(T) -> T;

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    SliceLast { x: Var, start: usize },
    GatherRows { x: Var, idx: Vec<usize> },
    Sum(Var),
    Mean(Var),
    Sqrt(Var),
    Softmax(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, rstd: Vec<T> },
    Gelu(Var),
    Unary { x: Var, df: ScalarFn<T> },
}

/// Names of every differentiable op the tape records.
pub const OP_NAMES: [&str; 18] = [
    "add", "sub", "mul", "scale", "add_bias", "matmul", "transpose", "reshape", "concat",
    "slice_last", "gather_rows", "sum", "mean", "sqrt", "softmax", "layer_norm", "gelu", "unary",
];

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::Transpose(..) => "transpose",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::SliceLast { .. } => "slice_last",
            Op::GatherRows { .. } => "gather_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Sqrt(..) => "sqrt",
            Op::Softmax(..) => "softmax",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Gelu(..) => "gelu",
            Op::Unary { .. } => "unary",
        }
    }
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real = f32> {
    nodes: Vec<Node<'a, T>>,
    record: bool,
    exec: Execution,
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            record: true,
            exec: Execution::Sequential,
        }
    }

    /// A tape that evaluates ops without recording adjoint information.
    pub fn no_grad() -> Self {
        Tape {
            record: false,
            ..Self::new()
        }
    }

    /// Execution mode used inside large kernels (matmul).
    pub fn with_execution(mut self, exec: Execution) -> Self {
        self.exec = exec;
        self
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Constant input: no gradient is tracked.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), false)
    }

    pub fn constant_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), false)
    }

    /// Grad-enabled leaf that owns its value.
    pub fn param(&mut self, t: Tensor<T>) -> Var {
        self.leaf(Cow::Owned(t), true)
    }

    /// Grad-enabled leaf borrowing its value (no copy of large weights).
    pub fn param_ref(&mut self, t: &'a Tensor<T>) -> Var {
        self.leaf(Cow::Borrowed(t), true)
    }

    fn leaf(&mut self, value: Cow<'a, Tensor<T>>, grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: grad && self.record,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite { op: op.name() });
        }
        let requires_grad = self.record && parents.iter().any(|p| self.nodes[p.0].requires_grad);
        let op = if requires_grad { op } else { Op::Leaf };
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    fn zip(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.zip(a, b, |x, y| x + y);
        self.push(out, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.zip(a, b, |x, y| x - y);
        self.push(out, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.zip(a, b, |x, y| x * y);
        self.push(out, Op::Mul(a, b), &[a, b])
    }

    pub fn scale(&mut self, x: Var, s: T) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    /// `x[..., d] + bias[d]`, broadcasting the bias over all leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        if tb.rank() != 1 || tb.numel() != tx.last_dim() {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let d = tx.last_dim();
        let data = tx
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v + tb.data()[i % d])
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        self.push(out, Op::AddBias(x, bias), &[x, bias])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul_with(self.value(b), self.exec)?;
        self.push(out, Op::MatMul(a, b), &[a, b])
    }

    /// `x @ w + b` for `x: [n, in]`, `w: [in, out]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).transpose_last2()?;
        self.push(out, Op::Transpose(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshape(shape)?;
        self.push(out, Op::Reshape(x), &[x])
    }

    /// Concatenates tensors whose shapes agree everywhere except `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::contract("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::contract(format!("concat axis {axis} out of range for {base:?}")));
        }
        for p in parts {
            let s = self.shape(*p);
            let agree = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !agree {
                return Err(Error::shape("concat", &base, s));
            }
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let total_axis: usize = parts.iter().map(|p| self.shape(*p)[axis]).sum();
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for p in parts {
                let t = self.value(*p);
                let block = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * block..(o + 1) * block]);
            }
        }
        let mut shape = base;
        shape[axis] = total_axis;
        let out = Tensor::new(shape, data)?;
        self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Columns `start..start+len` of the last axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(x);
        let d = t.last_dim();
        if len == 0 || start + len > d {
            return Err(Error::Index {
                op: "slice_last",
                index: start + len,
                len: d,
            });
        }
        let mut data = Vec::with_capacity(t.outer() * len);
        for row in t.data().chunks(d) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        self.push(out, Op::SliceLast { x, start }, &[x])
    }

    /// Rows of a 2-D tensor in `idx` order. Duplicates are allowed.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::contract(format!("gather_rows needs rank 2, got {:?}", t.shape())));
        }
        if idx.is_empty() {
            return Err(Error::contract("gather_rows with empty index"));
        }
        let (n, d) = (t.shape()[0], t.shape()[1]);
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::Index {
                    op: "gather_rows",
                    index: i,
                    len: n,
                });
            }
            data.extend_from_slice(t.row(i));
        }
        let out = Tensor::new(vec![idx.len(), d], data)?;
        self.push(out, Op::GatherRows { x, idx: idx.to_vec() }, &[x])
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let out = Tensor::scalar(self.value(x).sum_all());
        self.push(out, Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out = Tensor::scalar(t.sum_all() / T::of(t.numel() as f64));
        self.push(out, Op::Mean(x), &[x])
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(|v| v.sqrt());
        self.push(out, Op::Sqrt(x), &[x])
    }

    /// Softmax over the last axis, computed with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let out = softmax_lastdim(self.value(x));
        self.push(out, Op::Softmax(x), &[x])
    }

    /// Layer normalization over the last axis with population variance.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.last_dim();
        if tg.numel() != d || tb.numel() != d {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.outer();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(tx.numel());
        let inv_d = T::of(1.0 / d as f64);
        for row in tx.data().chunks(d) {
            let mu = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() * inv_d;
            let r = (var + eps).sqrt().recip();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * r;
                xhat.push(h);
                data.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        let (xhat, rstd) = if self.record { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, rstd }, &[x, gain, bias])
    }

    /// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu_value);
        self.push(out, Op::Gelu(x), &[x])
    }

    /// Elementwise `f` with caller-supplied derivative `df`.
    pub fn unary(&mut self, x: Var, f: ScalarFn<T>, df: ScalarFn<T>) -> Result<Var> {
        let out = self.value(x).map(f);
        self.push(out, Op::Unary { x, df }, &[x])
    }

    /// Consumes the tape, propagating adjoints from a scalar `loss`.
    pub fn backward(self, loss: Var) -> Result<Grads<T>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Err(Error::contract("loss is not connected to any grad-enabled input"));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), T::one()));

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            for (parent, pg) in self.adjoints(id, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                if !pg.all_finite() {
                    return Err(Error::NonFinite { op: node.op.name() });
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        // Only grad-enabled leaves keep their adjoints.
        for (id, node) in self.nodes.iter().enumerate() {
            if !(matches!(node.op, Op::Leaf) && node.requires_grad) {
                grads[id] = None;
            }
        }
        Ok(Grads { grads })
    }

    /// Adjoint contributions of node `id` to its parents, given its output adjoint `g`.
    fn adjoints(&self, id: usize, g: &Tensor<T>) -> Result<Vec<(Var, Tensor<T>)>> {
        let node = &self.nodes[id];
        let y = &node.value;
        let val = |v: Var| self.value(v);
        let out = match &node.op {
            Op::Leaf => vec![],
            Op::Add(a, b) => vec![(*a, g.clone()), (*b, g.clone())],
            Op::Sub(a, b) => vec![(*a, g.clone()), (*b, g.map(|v| -v))],
            Op::Mul(a, b) => {
                let ga = elementwise(g, val(*b), |gv, bv| gv * bv);
                let gb = elementwise(g, val(*a), |gv, av| gv * av);
                vec![(*a, ga), (*b, gb)]
            }
            Op::Scale(x, s) => vec![(*x, g.map(|v| v * *s))],
            Op::AddBias(x, b) => {
                let d = g.last_dim();
                let mut gb = vec![T::zero(); d];
                for row in g.data().chunks(d) {
                    for (acc, &v) in gb.iter_mut().zip(row) {
                        *acc += v;
                    }
                }
                vec![(*x, g.clone()), (*b, Tensor::new(vec![d], gb)?)]
            }
            Op::MatMul(a, b) => {
                let mut out = Vec::with_capacity(2);
                if self.nodes[a.0].requires_grad {
                    let bt = val(*b).transpose_last2()?;
                    out.push((*a, g.matmul_with(&bt, self.exec)?));
                }
                if self.nodes[b.0].requires_grad {
                    let at = val(*a).transpose_last2()?;
                    out.push((*b, at.matmul_with(g, self.exec)?));
                }
                out
            }
            Op::Transpose(x) => vec![(*x, g.transpose_last2()?)],
            Op::Reshape(x) => vec![(*x, g.clone().reshape(val(*x).shape())?)],
            Op::Concat { parts, axis } => {
                let shape = y.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let row = shape[*axis] * inner;
                let mut offset = 0;
                let mut out = Vec::with_capacity(parts.len());
                for p in parts {
                    let ps = val(*p).shape();
                    let block = ps[*axis] * inner;
                    let mut data = Vec::with_capacity(outer * block);
                    for o in 0..outer {
                        let start = o * row + offset;
                        data.extend_from_slice(&g.data()[start..start + block]);
                    }
                    offset += block;
                    out.push((*p, Tensor::new(ps.to_vec(), data)?));
                }
                out
            }
            Op::SliceLast { x, start } => {
                let xs = val(*x).shape();
                let d = *xs.last().unwrap();
                let len = g.last_dim();
                let mut data = vec![T::zero(); val(*x).numel()];
                for (r, grow) in g.data().chunks(len).enumerate() {
                    data[r * d + start..r * d + start + len].copy_from_slice(grow);
                }
                vec![(*x, Tensor::new(xs.to_vec(), data)?)]
            }
            Op::GatherRows { x, idx } => {
                let xs = val(*x).shape();
                let d = xs[1];
                let mut data = vec![T::zero(); val(*x).numel()];
                for (r, &i) in idx.iter().enumerate() {
                    for (acc, &v) in data[i * d..(i + 1) * d].iter_mut().zip(g.row(r)) {
                        *acc += v;
                    }
                }
                vec![(*x, Tensor::new(xs.to_vec(), data)?)]
            }
            Op::Sum(x) => vec![(*x, Tensor::full(val(*x).shape(), g.item()))],
            Op::Mean(x) => {
                let n = T::of(val(*x).numel() as f64);
                vec![(*x, Tensor::full(val(*x).shape(), g.item() / n))]
            }
            Op::Sqrt(x) => vec![(*x, elementwise(g, y, |gv, yv| gv * T::of(0.5) / yv))],
            Op::Softmax(x) => {
                let d = y.last_dim();
                let mut data = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(d).zip(g.data().chunks(d)) {
                    let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    data.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                vec![(*x, Tensor::new(y.shape().to_vec(), data)?)]
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let d = y.last_dim();
                let gvals = val(*gain).data();
                let mut dx = Vec::with_capacity(y.numel());
                let mut dg = vec![T::zero(); d];
                let mut db = vec![T::zero(); d];
                let inv_d = T::of(1.0 / d as f64);
                for (r, grow) in g.data().chunks(d).enumerate() {
                    let h = &xhat[r * d..(r + 1) * d];
                    let mut mean_dh = T::zero();
                    let mut mean_dh_h = T::zero();
                    for j in 0..d {
                        let dh = grow[j] * gvals[j];
                        mean_dh += dh;
                        mean_dh_h += dh * h[j];
                        dg[j] += grow[j] * h[j];
                        db[j] += grow[j];
                    }
                    mean_dh *= inv_d;
                    mean_dh_h *= inv_d;
                    for j in 0..d {
                        let dh = grow[j] * gvals[j];
                        dx.push(rstd[r] * (dh - mean_dh - h[j] * mean_dh_h));
                    }
                }
                vec![
                    (*x, Tensor::new(y.shape().to_vec(), dx)?),
                    (*gain, Tensor::new(val(*gain).shape().to_vec(), dg)?),
                    (*bias, Tensor::new(val(*bias).shape().to_vec(), db)?),
                ]
            }
            Op::Gelu(x) => vec![(*x, elementwise(g, val(*x), |gv, xv| gv * gelu_derivative(xv)))],
            Op::Unary { x, df } => vec![(*x, elementwise(g, val(*x), |gv, xv| gv * df(xv)))],
        };
        Ok(out)
    }
}

fn elementwise<T: Real>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::new(a.shape().to_vec(), data).expect("adjoint shapes agree")
}

/// Row-wise softmax over the last axis.
pub fn softmax_lastdim<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    let d = x.last_dim();
    let mut data = Vec::with_capacity(x.numel());
    for row in x.data().chunks(d) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = data.len();
        let mut total = T::zero();
        for &v in row {
            let e = (v - max).exp();
            total += e;
            data.push(e);
        }
        for v in &mut data[start..] {
            *v /= total;
        }
    }
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

const GELU_C: f64 = 0.044_715;

fn gelu_value<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let inner = k * (x + T::of(GELU_C) * x * x * x);
    T::of(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_derivative<T: Real>(x: T) -> T {
    let k = T::of((2.0 / std::f64::consts::PI).sqrt());
    let t = (k * (x + T::of(GELU_C) * x * x * x)).tanh();
    let dinner = k * (T::one() + T::of(3.0 * GELU_C) * x * x);
    T::of(0.5) * (T::one() + t) + T::of(0.5) * x * (T::one() - t * t) * dinner
}

/// Adjoints of the grad-enabled leaves of a consumed tape.
pub struct Grads<T: Real> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of leaves holding a gradient.
    pub fn count(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }
}

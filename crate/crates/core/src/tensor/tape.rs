use std::borrow::Cow;

use super::{lit, Scalar, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<S> {
    Leaf,
    MatMul { a: Var, b: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    AddBias { x: Var, bias: Var },
    Affine { x: Var, scale: S },
    Relu { x: Var },
    LeakyRelu { x: Var, slope: S },
    Gelu { x: Var },
    Tanh { x: Var },
    Sigmoid { x: Var },
    Log { x: Var },
    Clamp { x: Var, lo: S, hi: S },
    Softmax { x: Var },
    LogSoftmax { x: Var },
    SumAxis { x: Var, axis: usize },
    MeanAxis { x: Var, axis: usize },
    MeanAll { x: Var },
    GatherRows { x: Var, index: Vec<usize> },
    Pick { x: Var, index: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<S>, inv_std: Vec<S> },
    Concat { parts: Vec<Var>, axis: usize },
    SegmentMean { x: Var, lengths: Vec<usize> },
    Attention { q: Var, k: Var, v: Var, lengths: Vec<usize>, heads: usize, probs: Vec<S> },
}

struct Node<'a, S: Scalar> {
    value: Cow<'a, Tensor<S>>,
    op: Op<S>,
    requires_grad: bool,
}

/// Records operations for reverse-mode differentiation.
///
/// Leaves may borrow their values (parameters are not copied), so a tape
/// must be dropped before the borrowed parameters are updated. Operations
/// whose inputs are all constant are evaluated but not recorded.
pub struct Tape<'a, S: Scalar = f32> {
    nodes: Vec<Node<'a, S>>,
}

/// Gradients of a scalar loss with respect to the tape's differentiable leaves.
pub struct Gradients<S: Scalar> {
    grads: Vec<Option<Tensor<S>>>,
    shapes: Vec<Vec<usize>>,
}

impl<S: Scalar> Gradients<S> {
    /// Gradient for `var`; zeros when the loss does not depend on it.
    pub fn wrt(&self, var: Var) -> Tensor<S> {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[var.0]),
        }
    }

    /// Moves the gradient out, leaving zeros behind.
    pub fn take(&mut self, var: Var) -> Tensor<S> {
        self.grads[var.0]
            .take()
            .unwrap_or_else(|| Tensor::zeros(&self.shapes[var.0]))
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

/// `[outer, axis, inner]` factorization of a shape around `axis`.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn offsets(lengths: &[usize]) -> Vec<usize> {
    let mut out = Vec::with_capacity(lengths.len());
    let mut acc = 0;
    for &l in lengths {
        out.push(acc);
        acc += l;
    }
    out
}

impl<'a, S: Scalar> Default for Tape<'a, S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Cow<'a, Tensor<S>>, op: Op<S>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: if requires_grad { op } else { Op::Leaf },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn result(&mut self, name: &'static str, value: Tensor<S>, op: Op<S>, inputs: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        Ok(self.push(Cow::Owned(value), op, rg))
    }

    /// A differentiable leaf borrowing its value.
    pub fn param(&mut self, value: &'a Tensor<S>) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, true)
    }

    /// A leaf that is differentiable only when `requires_grad` is set.
    pub fn leaf(&mut self, value: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.push(Cow::Borrowed(value), Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, false)
    }

    /// An owned differentiable leaf (used by gradient checks).
    pub fn owned_param(&mut self, value: Tensor<S>) -> Var {
        self.push(Cow::Owned(value), Op::Leaf, true)
    }

    /// Copies the value of `v` into a new constant, cutting gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ----- linear algebra -----

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(shape_err("matmul", sa, sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![S::zero(); m * n];
        for i in 0..m {
            let orow = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let aip = ad[i * k + p];
                let brow = &bd[p * n..(p + 1) * n];
                for (o, &bv) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bv;
                }
            }
        }
        let t = Tensor::from_parts(vec![m, n], out);
        self.result("matmul", t, Op::MatMul { a, b }, &[a, b])
    }

    // ----- elementwise -----

    fn zip_same(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S, op: Op<S>) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::from_parts(ta.shape().to_vec(), data);
        self.result(name, t, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    /// Adds a vector of length `last_dim` to every row of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let c = tx.last_dim();
        if tb.numel() != c || tb.rank() != 1 {
            return Err(shape_err("add_bias", tx.shape(), tb.shape()));
        }
        let bd = tb.data();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (o, &b) in row.iter_mut().zip(bd) {
                *o = *o + b;
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.result("add_bias", t, Op::AddBias { x, bias }, &[x, bias])
    }

    /// `scale * x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Result<Var> {
        let (s, b) = (lit::<S>(scale), lit::<S>(shift));
        let t = self.value(x).map(|v| s * v + b);
        self.result("affine", t, Op::Affine { x, scale: s }, &[x])
    }

    pub fn scale(&mut self, x: Var, scale: f64) -> Result<Var> {
        self.affine(x, scale, 0.0)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| if v > S::zero() { v } else { S::zero() });
        self.result("relu", t, Op::Relu { x }, &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        let s = lit::<S>(slope);
        let t = self.value(x).map(|v| if v > S::zero() { v } else { s * v });
        self.result("leaky_relu", t, Op::LeakyRelu { x, slope: s }, &[x])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(gelu_fwd);
        self.result("gelu", t, Op::Gelu { x }, &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.tanh());
        self.result("tanh", t, Op::Tanh { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(sigmoid);
        self.result("sigmoid", t, Op::Sigmoid { x }, &[x])
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x).map(|v| v.ln());
        self.result("log", t, Op::Log { x }, &[x])
    }

    /// Clamps into `[lo, hi]`; gradient is zero outside the interval.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var> {
        let (l, h) = (lit::<S>(lo), lit::<S>(hi));
        let t = self.value(x).map(|v| v.max(l).min(h));
        self.result("clamp", t, Op::Clamp { x, lo: l, hi: h }, &[x])
    }

    // ----- normalizations over the last axis -----

    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut data = tx.data().to_vec();
        data.chunks_mut(c).for_each(softmax_in_place);
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.result("softmax", t, Op::Softmax { x }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let c = tx.last_dim();
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(c) {
            let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
            let lse = row.iter().map(|&v| (v - m).exp()).sum::<S>().ln() + m;
            row.iter_mut().for_each(|v| *v = *v - lse);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.result("log_softmax", t, Op::LogSoftmax { x }, &[x])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let c = tx.last_dim();
        if tg.numel() != c || tb.numel() != c {
            return Err(shape_err("layer_norm", tx.shape(), tg.shape()));
        }
        let eps = lit::<S>(LAYER_NORM_EPS);
        let cs = lit::<S>(c as f64);
        let rows = tx.rows();
        let mut xhat = Vec::with_capacity(tx.numel());
        let mut inv_std = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(tx.numel());
        for row in tx.data().chunks(c) {
            let mu = row.iter().copied().sum::<S>() / cs;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<S>() / cs;
            let inv = S::one() / (var + eps).sqrt();
            inv_std.push(inv);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mu) * inv;
                xhat.push(h);
                out.push(h * tg.data()[j] + tb.data()[j]);
            }
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), out);
        self.result(
            "layer_norm",
            t,
            Op::LayerNorm { x, gain, bias, xhat, inv_std },
            &[x, gain, bias],
        )
    }

    // ----- reductions -----

    fn reduce_axis(&mut self, x: Var, axis: usize, mean: bool) -> Result<Var> {
        let tx = self.value(x);
        if axis >= tx.rank() {
            return Err(shape_err(if mean { "mean_axis" } else { "sum_axis" }, tx.shape(), &[axis]));
        }
        let (outer, n, inner) = split_axis(tx.shape(), axis);
        let d = tx.data();
        let mut out = vec![S::zero(); outer * inner];
        for o in 0..outer {
            for a in 0..n {
                let base = (o * n + a) * inner;
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + d[base + i];
                }
            }
        }
        if mean {
            let ns = lit::<S>(n as f64);
            out.iter_mut().for_each(|v| *v = *v / ns);
        }
        let mut shape: Vec<usize> = tx.shape().to_vec();
        shape.remove(axis);
        if shape.is_empty() {
            shape.push(1);
        }
        let t = Tensor::from_parts(shape, out);
        let op = if mean { Op::MeanAxis { x, axis } } else { Op::SumAxis { x, axis } };
        self.result(if mean { "mean_axis" } else { "sum_axis" }, t, op, &[x])
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, false)
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce_axis(x, axis, true)
    }

    /// Mean of every element, as a one-element tensor.
    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let m = tx.data().iter().copied().sum::<S>() / lit::<S>(tx.numel() as f64);
        self.result("mean", Tensor::scalar(m), Op::MeanAll { x }, &[x])
    }

    // ----- indexing -----

    /// Selects rows (over the last axis) of `x`; doubles as an embedding lookup.
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.last_dim());
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(Error::input(format!("gather_rows: index {bad} out of range for {rows} rows")));
        }
        if index.is_empty() {
            return Err(Error::input("gather_rows: empty index"));
        }
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(tx.row(i));
        }
        let t = Tensor::from_parts(vec![index.len(), c], out);
        self.result("gather_rows", t, Op::GatherRows { x, index: index.to_vec() }, &[x])
    }

    /// `out[r] = x[r, index[r]]` for a 2-D `x`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        let (rows, c) = (tx.rows(), tx.last_dim());
        if tx.rank() != 2 || index.len() != rows {
            return Err(shape_err("pick", tx.shape(), &[index.len()]));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= c) {
            return Err(Error::input(format!("pick: class {bad} out of range for {c} columns")));
        }
        let out = index.iter().enumerate().map(|(r, &j)| tx.data()[r * c + j]).collect();
        let t = Tensor::from_parts(vec![rows], out);
        self.result("pick", t, Op::Pick { x, index: index.to_vec() }, &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::input("concat: no inputs"))?;
        let base = self.value(*first).shape().to_vec();
        if axis >= base.len() {
            return Err(shape_err("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.value(p).shape();
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(shape_err("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let t = self.value(p);
                let n = t.shape()[axis] * inner;
                out.extend_from_slice(&t.data()[o * n..(o + 1) * n]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::from_parts(shape, out);
        self.result("concat", t, Op::Concat { parts: parts.to_vec(), axis }, parts)
    }

    // ----- sequence ops over packed `[tokens, d]` batches -----

    /// Mean over consecutive row segments of the given lengths.
    pub fn segment_mean(&mut self, x: Var, lengths: &[usize]) -> Result<Var> {
        let tx = self.value(x);
        check_segments("segment_mean", tx, lengths)?;
        let c = tx.last_dim();
        let mut out = vec![S::zero(); lengths.len() * c];
        for (s, (&len, off)) in lengths.iter().zip(offsets(lengths)).enumerate() {
            let o = &mut out[s * c..(s + 1) * c];
            for r in off..off + len {
                for (acc, &v) in o.iter_mut().zip(tx.row(r)) {
                    *acc = *acc + v;
                }
            }
            let n = lit::<S>(len as f64);
            o.iter_mut().for_each(|v| *v = *v / n);
        }
        let t = Tensor::from_parts(vec![lengths.len(), c], out);
        self.result("segment_mean", t, Op::SegmentMean { x, lengths: lengths.to_vec() }, &[x])
    }

    /// Multi-head scaled dot-product self-attention within each segment.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, lengths: &[usize], heads: usize) -> Result<Var> {
        let (tq, tk, tv) = (self.value(q), self.value(k), self.value(v));
        if tq.shape() != tk.shape() || tq.shape() != tv.shape() || tq.rank() != 2 {
            return Err(shape_err("attention", tq.shape(), tk.shape()));
        }
        check_segments("attention", tq, lengths)?;
        let d = tq.last_dim();
        if heads == 0 || d % heads != 0 {
            return Err(Error::input(format!("attention: width {d} not divisible by {heads} heads")));
        }
        let dh = d / heads;
        let scale = S::one() / lit::<S>(dh as f64).sqrt();
        let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
        let mut out = vec![S::zero(); qd.len()];
        let mut probs = Vec::with_capacity(lengths.iter().map(|l| l * l).sum::<usize>() * heads);
        let mut scores = Vec::new();
        for (&n, off) in lengths.iter().zip(offsets(lengths)) {
            for h in 0..heads {
                let col = h * dh;
                for a in 0..n {
                    let qa = &qd[(off + a) * d + col..(off + a) * d + col + dh];
                    scores.clear();
                    for b in 0..n {
                        let kb = &kd[(off + b) * d + col..(off + b) * d + col + dh];
                        let s = qa.iter().zip(kb).map(|(&x, &y)| x * y).sum::<S>() * scale;
                        scores.push(s);
                    }
                    softmax_in_place(&mut scores);
                    let orow = &mut out[(off + a) * d + col..(off + a) * d + col + dh];
                    for (b, &p) in scores.iter().enumerate() {
                        let vb = &vd[(off + b) * d + col..(off + b) * d + col + dh];
                        for (o, &vv) in orow.iter_mut().zip(vb) {
                            *o = *o + p * vv;
                        }
                    }
                    probs.extend_from_slice(&scores);
                }
            }
        }
        let t = Tensor::from_parts(tq.shape().to_vec(), out);
        self.result(
            "attention",
            t,
            Op::Attention { q, k, v, lengths: lengths.to_vec(), heads, probs },
            &[q, k, v],
        )
    }

    // ----- reverse pass -----

    /// Back-propagates from a one-element `loss`, visiting recorded
    /// operations in exact reverse order.
    pub fn backward(&self, loss: Var) -> Result<Gradients<S>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::input(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor<S>>> = (0..n).map(|_| None).collect();
        if self.nodes[loss.0].requires_grad {
            grads[loss.0] = Some(Tensor::full(self.value(loss).shape(), S::one()));
        }
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.backprop_node(idx, &g, &mut grads);
        }
        let shapes = self.nodes.iter().map(|n| n.value.shape().to_vec()).collect();
        // Only leaf gradients are part of the result.
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn backprop_node(&self, idx: usize, g: &Tensor<S>, grads: &mut [Option<Tensor<S>>]) {
        let node = &self.nodes[idx];
        let y = node.value.as_ref();
        let mut acc = |v: Var, t: Tensor<S>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(e) => e.add_assign(&t),
                slot @ None => *slot = Some(t),
            }
        };
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.requires_grad(*a) {
                    let bd = tb.data();
                    let mut da = vec![S::zero(); m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &bd[p * n..(p + 1) * n];
                            da[i * k + p] = grow.iter().zip(brow).map(|(&x, &y)| x * y).sum();
                        }
                    }
                    acc(*a, Tensor::from_parts(vec![m, k], da));
                }
                if self.requires_grad(*b) {
                    let ad = ta.data();
                    let mut db = vec![S::zero(); k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let aip = ad[i * k + p];
                            for (o, &gv) in db[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                *o = *o + aip * gv;
                            }
                        }
                    }
                    acc(*b, Tensor::from_parts(vec![k, n], db));
                }
            }
            Op::Add { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.clone());
            }
            Op::Sub { a, b } => {
                acc(*a, g.clone());
                acc(*b, g.map(|v| -v));
            }
            Op::Mul { a, b } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                acc(*a, zip_map(g, tb, |gv, bv| gv * bv));
                acc(*b, zip_map(g, ta, |gv, av| gv * av));
            }
            Op::AddBias { x, bias } => {
                acc(*x, g.clone());
                let c = g.last_dim();
                let mut db = vec![S::zero(); c];
                for row in gd.chunks(c) {
                    for (o, &v) in db.iter_mut().zip(row) {
                        *o = *o + v;
                    }
                }
                let shape = self.value(*bias).shape().to_vec();
                acc(*bias, Tensor::from_parts(shape, db));
            }
            Op::Affine { x, scale } => acc(*x, g.map(|v| v * *scale)),
            Op::Relu { x } => {
                acc(*x, zip_map(g, self.value(*x), |gv, xv| if xv > S::zero() { gv } else { S::zero() }));
            }
            Op::LeakyRelu { x, slope } => {
                acc(*x, zip_map(g, self.value(*x), |gv, xv| if xv > S::zero() { gv } else { gv * *slope }));
            }
            Op::Gelu { x } => acc(*x, zip_map(g, self.value(*x), |gv, xv| gv * gelu_grad(xv))),
            Op::Tanh { x } => acc(*x, zip_map(g, y, |gv, yv| gv * (S::one() - yv * yv))),
            Op::Sigmoid { x } => acc(*x, zip_map(g, y, |gv, yv| gv * yv * (S::one() - yv))),
            Op::Log { x } => acc(*x, zip_map(g, self.value(*x), |gv, xv| gv / xv)),
            Op::Clamp { x, lo, hi } => {
                acc(
                    *x,
                    zip_map(g, self.value(*x), |gv, xv| if xv >= *lo && xv <= *hi { gv } else { S::zero() }),
                );
            }
            Op::Softmax { x } => {
                let c = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (grow, yrow) in gd.chunks(c).zip(y.data().chunks(c)) {
                    let dot: S = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| yv * (gv - dot)));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::LogSoftmax { x } => {
                let c = y.last_dim();
                let mut dx = Vec::with_capacity(y.numel());
                for (grow, yrow) in gd.chunks(c).zip(y.data().chunks(c)) {
                    let total: S = grow.iter().copied().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(&gv, &yv)| gv - yv.exp() * total));
                }
                acc(*x, Tensor::from_parts(y.shape().to_vec(), dx));
            }
            Op::SumAxis { x, axis } | Op::MeanAxis { x, axis } => {
                let tx = self.value(*x);
                let (outer, n, inner) = split_axis(tx.shape(), *axis);
                let f = if matches!(node.op, Op::MeanAxis { .. }) {
                    S::one() / lit::<S>(n as f64)
                } else {
                    S::one()
                };
                let mut dx = vec![S::zero(); tx.numel()];
                for o in 0..outer {
                    for a in 0..n {
                        for i in 0..inner {
                            dx[(o * n + a) * inner + i] = gd[o * inner + i] * f;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::MeanAll { x } => {
                let tx = self.value(*x);
                let v = gd[0] / lit::<S>(tx.numel() as f64);
                acc(*x, Tensor::full(tx.shape(), v));
            }
            Op::GatherRows { x, index } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut dx = vec![S::zero(); tx.numel()];
                for (r, &i) in index.iter().enumerate() {
                    for (o, &v) in dx[i * c..(i + 1) * c].iter_mut().zip(&gd[r * c..(r + 1) * c]) {
                        *o = *o + v;
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::Pick { x, index } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut dx = vec![S::zero(); tx.numel()];
                for (r, &j) in index.iter().enumerate() {
                    dx[r * c + j] = gd[r];
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let gain_d = self.value(*gain).data();
                let cs = lit::<S>(c as f64);
                let mut dg = vec![S::zero(); c];
                let mut dbias = vec![S::zero(); c];
                let mut dx = Vec::with_capacity(tx.numel());
                let mut dxhat = vec![S::zero(); c];
                for (r, grow) in gd.chunks(c).enumerate() {
                    let hrow = &xhat[r * c..(r + 1) * c];
                    for j in 0..c {
                        dg[j] = dg[j] + grow[j] * hrow[j];
                        dbias[j] = dbias[j] + grow[j];
                        dxhat[j] = grow[j] * gain_d[j];
                    }
                    let mean_d = dxhat.iter().copied().sum::<S>() / cs;
                    let mean_dh = dxhat.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<S>() / cs;
                    let inv = inv_std[r];
                    dx.extend((0..c).map(|j| inv * (dxhat[j] - mean_d - hrow[j] * mean_dh)));
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
                let gshape = self.value(*gain).shape().to_vec();
                acc(*gain, Tensor::from_parts(gshape, dg));
                let bshape = self.value(*bias).shape().to_vec();
                acc(*bias, Tensor::from_parts(bshape, dbias));
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = split_axis(y.shape(), *axis);
                let mut start = 0;
                for &p in parts {
                    let tp = self.value(p);
                    let n = tp.shape()[*axis];
                    let mut dp = Vec::with_capacity(tp.numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        dp.extend_from_slice(&gd[base..base + n * inner]);
                    }
                    acc(p, Tensor::from_parts(tp.shape().to_vec(), dp));
                    start += n;
                }
            }
            Op::SegmentMean { x, lengths } => {
                let tx = self.value(*x);
                let c = tx.last_dim();
                let mut dx = vec![S::zero(); tx.numel()];
                for (s, (&len, off)) in lengths.iter().zip(offsets(lengths)).enumerate() {
                    let n = lit::<S>(len as f64);
                    let grow = &gd[s * c..(s + 1) * c];
                    for r in off..off + len {
                        for (o, &gv) in dx[r * c..(r + 1) * c].iter_mut().zip(grow) {
                            *o = gv / n;
                        }
                    }
                }
                acc(*x, Tensor::from_parts(tx.shape().to_vec(), dx));
            }
            Op::Attention { q, k, v, lengths, heads, probs } => {
                let (tq, tk, tv) = (self.value(*q), self.value(*k), self.value(*v));
                let d = tq.last_dim();
                let dh = d / heads;
                let scale = S::one() / lit::<S>(dh as f64).sqrt();
                let (qd, kd, vd) = (tq.data(), tk.data(), tv.data());
                let mut dq = vec![S::zero(); qd.len()];
                let mut dk = vec![S::zero(); kd.len()];
                let mut dv = vec![S::zero(); vd.len()];
                let mut pcur = 0;
                let mut ds = Vec::new();
                for (&n, off) in lengths.iter().zip(offsets(lengths)) {
                    for h in 0..*heads {
                        let col = h * dh;
                        let row = |t: usize| (off + t) * d + col..(off + t) * d + col + dh;
                        for a in 0..n {
                            let p = &probs[pcur..pcur + n];
                            pcur += n;
                            let ga = &gd[row(a)];
                            // dP[a,b] = <dO[a], V[b]>; dV[b] += P[a,b] dO[a]
                            ds.clear();
                            for b in 0..n {
                                let rb = row(b);
                                ds.push(ga.iter().zip(&vd[rb.clone()]).map(|(&x, &y)| x * y).sum::<S>());
                                for (o, &gv) in dv[rb].iter_mut().zip(ga) {
                                    *o = *o + p[b] * gv;
                                }
                            }
                            let dot: S = ds.iter().zip(p).map(|(&x, &y)| x * y).sum();
                            for b in 0..n {
                                let s = p[b] * (ds[b] - dot) * scale;
                                let (ra, rb) = (row(a), row(b));
                                for c in 0..dh {
                                    dq[ra.start + c] = dq[ra.start + c] + s * kd[rb.start + c];
                                    dk[rb.start + c] = dk[rb.start + c] + s * qd[ra.start + c];
                                }
                            }
                        }
                    }
                }
                let shape = tq.shape().to_vec();
                acc(*q, Tensor::from_parts(shape.clone(), dq));
                acc(*k, Tensor::from_parts(shape.clone(), dk));
                acc(*v, Tensor::from_parts(shape, dv));
            }
        }
    }
}

pub(crate) const LAYER_NORM_EPS: f64 = 1e-5;

fn check_segments<S: Scalar>(op: &'static str, t: &Tensor<S>, lengths: &[usize]) -> Result<()> {
    let total: usize = lengths.iter().sum();
    if t.rank() != 2 || total != t.rows() || lengths.iter().any(|&l| l == 0) {
        return Err(shape_err(op, t.shape(), lengths));
    }
    Ok(())
}

fn zip_map<S: Scalar>(g: &Tensor<S>, other: &Tensor<S>, f: impl Fn(S, S) -> S) -> Tensor<S> {
    let data = g.data().iter().zip(other.data()).map(|(&a, &b)| f(a, b)).collect();
    Tensor::from_parts(g.shape().to_vec(), data)
}

pub(crate) fn softmax_in_place<S: Scalar>(row: &mut [S]) {
    let m = row.iter().fold(S::neg_infinity(), |a, &b| a.max(b));
    let mut total = S::zero();
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        total = total + *v;
    }
    row.iter_mut().for_each(|v| *v = *v / total);
}

fn sigmoid<S: Scalar>(v: S) -> S {
    if v >= S::zero() {
        S::one() / (S::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (S::one() + e)
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd<S: Scalar>(x: S) -> S {
    let half = lit::<S>(0.5);
    let u = lit::<S>(GELU_C) * (x + lit::<S>(GELU_A) * x * x * x);
    half * x * (S::one() + u.tanh())
}

fn gelu_grad<S: Scalar>(x: S) -> S {
    let half = lit::<S>(0.5);
    let c = lit::<S>(GELU_C);
    let a = lit::<S>(GELU_A);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (S::one() + t) + half * x * (S::one() - t * t) * c * (S::one() + lit::<S>(3.0) * a * x * x)
}

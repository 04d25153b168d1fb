use super::conv::{self, ConvGeom};
use super::norm::{self, NormSaved};
use super::resample::{ResampleMode, Resampler};
use super::sum::ExactSum;
use super::{check_shape, numel, strides, Element, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Unary<T> {
    Exp,
    Log,
    Sigmoid,
    LeakyRelu(T),
    Relu,
    Gelu,
    Square,
    Clamp(T, T),
}

enum Op<T> {
    Leaf,
    Binary { kind: Binary, a: Var, b: Var },
    Scale { a: Var, s: T },
    AddScalar { a: Var },
    Unary { kind: Unary<T>, a: Var },
    Matmul { a: Var, b: Var },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { a: Var, axis: usize, start: usize },
    Pad { a: Var, before: Vec<usize> },
    Sum { a: Var, divisor: T },
    Softmax { a: Var, axis: usize },
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Resample { x: Var, mode: ResampleMode },
    GroupNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<T>, group_len: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, saved: NormSaved<T> },
    Linear { x: Var, w: Var, b: Option<Var> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Append-only record of a forward computation. Nodes are stored in creation
/// order, so every node's inputs precede it.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Result of [`Tape::backward`]: gradient of the loss with respect to every
/// node that requires a gradient.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Element> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

/// Iterates all multi-indices of `shape` in row-major order.
fn for_each_index(shape: &[usize], mut f: impl FnMut(&[usize], usize)) {
    let n = numel(shape);
    let mut idx = vec![0usize; shape.len()];
    for flat in 0..n {
        f(&idx, flat);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            if idx[d] < shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
}

/// Broadcast geometry for binary ops: operands of equal rank whose first two
/// extents (batch and channel) may be 1 on either side; trailing extents must
/// match exactly.
struct Bcast {
    out: Vec<usize>,
    lead: usize,
    inner: usize,
    a_lead: [usize; 2],
    b_lead: [usize; 2],
}

impl Bcast {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() != b.len() {
            return Err(shape_err!("binary op rank mismatch: {a:?} vs {b:?}"));
        }
        let lead = a.len().min(2);
        let mut out = a.to_vec();
        for d in 0..a.len() {
            if a[d] == b[d] {
                continue;
            }
            if d < lead && (a[d] == 1 || b[d] == 1) {
                out[d] = a[d].max(b[d]);
            } else {
                return Err(shape_err!(
                    "incompatible shapes {a:?} and {b:?} (broadcast only on batch/channel extents of 1)"
                ));
            }
        }
        let inner = numel(&a[lead..]);
        let pad = |s: &[usize]| {
            let mut l = [1, 1];
            l[..lead].copy_from_slice(&s[..lead]);
            l
        };
        Ok(Bcast { out, lead, inner, a_lead: pad(a), b_lead: pad(b) })
    }

    fn trivial(&self) -> bool {
        self.a_lead == self.b_lead
    }

    /// Calls `f(out_block, a_block, b_block)` for each contiguous inner block.
    fn blocks(&self, mut f: impl FnMut(usize, usize, usize)) {
        let mut o = [1, 1];
        o[..self.lead].copy_from_slice(&self.out[..self.lead]);
        let off = |l: [usize; 2], i: usize, j: usize| {
            let i = if l[0] == 1 { 0 } else { i };
            let j = if l[1] == 1 { 0 } else { j };
            i * l[1] + j
        };
        for i in 0..o[0] {
            for j in 0..o[1] {
                f(i * o[1] + j, off(self.a_lead, i, j), off(self.b_lead, i, j));
            }
        }
    }
}

/// Batch geometry for matmul: `[..., m, k] x [..., k, n]`.
struct MmGeom {
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
    /// (a offset, b offset) in units of matrices for each output batch entry.
    pairs: Vec<(usize, usize)>,
}

impl MmGeom {
    fn new(a: &[usize], b: &[usize]) -> Result<Self> {
        if a.len() < 2 || b.len() < 2 {
            return Err(shape_err!("matmul needs rank >= 2, got {a:?} and {b:?}"));
        }
        let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
        let (k2, n) = (b[b.len() - 2], b[b.len() - 1]);
        if k != k2 {
            return Err(shape_err!("matmul inner extents differ: {a:?} x {b:?}"));
        }
        let ab = &a[..a.len() - 2];
        let bb = &b[..b.len() - 2];
        let batch: Vec<usize> = if ab.is_empty() {
            bb.to_vec()
        } else if bb.is_empty() {
            ab.to_vec()
        } else if ab.len() == bb.len() {
            let mut out = Vec::with_capacity(ab.len());
            for (&x, &y) in ab.iter().zip(bb) {
                if x == y || x == 1 || y == 1 {
                    out.push(x.max(y));
                } else {
                    return Err(shape_err!("matmul batch extents not broadcastable: {a:?} x {b:?}"));
                }
            }
            out
        } else {
            return Err(shape_err!("matmul batch ranks differ: {a:?} x {b:?}"));
        };
        let index_of = |own: &[usize], idx: &[usize]| -> usize {
            if own.is_empty() {
                return 0;
            }
            let st = strides(own);
            idx.iter().zip(own).zip(&st).map(|((&i, &e), &s)| if e == 1 { 0 } else { i * s }).sum()
        };
        let mut pairs = Vec::new();
        if batch.is_empty() {
            pairs.push((0, 0));
        } else {
            for_each_index(&batch, |idx, _| pairs.push((index_of(ab, idx), index_of(bb, idx))));
        }
        let mut out_shape = batch;
        out_shape.extend([m, n]);
        Ok(MmGeom { m, k, n, out_shape, pairs })
    }
}

fn gelu_parts<T: Element>(x: T) -> (T, T) {
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let half = T::lit(0.5);
    let three = T::lit(3.0);
    let u = c * (x + a * x * x * x);
    let t = u.tanh();
    let y = half * x * (T::one() + t);
    let dy = half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x);
    (y, dy)
}

impl<T: Element> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn make(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(numel(&shape), data.len());
        let t = Tensor { shape, data: std::sync::Arc::new(data) };
        self.push(t, op, inputs)
    }

    /// Records an input. Gradients are produced only for leaves with
    /// `requires_grad` and the nodes downstream of them.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- elementwise -------------------------------------------------

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let g = Bcast::new(self.shape(a), self.shape(b))?;
        let (x, y) = (self.data(a), self.data(b));
        let f = |p: T, q: T| match kind {
            Binary::Add => p + q,
            Binary::Sub => p - q,
            Binary::Mul => p * q,
            Binary::Div => p / q,
        };
        if kind == Binary::Div && y.iter().any(|&q| q == T::zero()) {
            return Err(Error::Domain("division by zero".into()));
        }
        let data = if g.trivial() {
            x.iter().zip(y).map(|(&p, &q)| f(p, q)).collect()
        } else {
            let mut out = vec![T::zero(); numel(&g.out)];
            g.blocks(|o, ia, ib| {
                let (oa, ob, oo) = (ia * g.inner, ib * g.inner, o * g.inner);
                for t in 0..g.inner {
                    out[oo + t] = f(x[oa + t], y[ob + t]);
                }
            });
            out
        };
        Ok(self.make(g.out.clone(), data, Op::Binary { kind, a, b }, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let data = self.data(a).iter().map(|&v| v * s).collect();
        self.make(self.shape(a).to_vec(), data, Op::Scale { a, s }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let s = T::lit(s);
        let data = self.data(a).iter().map(|&v| v + s).collect();
        self.make(self.shape(a).to_vec(), data, Op::AddScalar { a }, &[a])
    }

    fn unary(&mut self, kind: Unary<T>, a: Var) -> Result<Var> {
        let x = self.data(a);
        let data: Vec<T> = match kind {
            Unary::Exp => {
                let d: Vec<T> = x.iter().map(|v| v.exp()).collect();
                if d.iter().any(|v| !v.is_finite()) {
                    return Err(Error::Domain("exp overflow".into()));
                }
                d
            }
            Unary::Log => {
                if let Some(v) = x.iter().find(|&&v| !(v > T::zero())) {
                    return Err(Error::Domain(format!("log of non-positive value {v}")));
                }
                x.iter().map(|v| v.ln()).collect()
            }
            Unary::Sigmoid => x
                .iter()
                .map(|&v| {
                    if v >= T::zero() {
                        T::one() / (T::one() + (-v).exp())
                    } else {
                        let e = v.exp();
                        e / (T::one() + e)
                    }
                })
                .collect(),
            Unary::LeakyRelu(s) => x.iter().map(|&v| if v >= T::zero() { v } else { s * v }).collect(),
            Unary::Relu => x.iter().map(|&v| v.max(T::zero())).collect(),
            Unary::Gelu => x.iter().map(|&v| gelu_parts(v).0).collect(),
            Unary::Square => x.iter().map(|&v| v * v).collect(),
            Unary::Clamp(lo, hi) => x.iter().map(|&v| v.max(lo).min(hi)).collect(),
        };
        Ok(self.make(self.shape(a).to_vec(), data, Op::Unary { kind, a }, &[a]))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(Unary::Log, a)
    }

    /// Logistic function, evaluated in a form that never overflows.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(Unary::Sigmoid, a).expect("sigmoid is total")
    }

    /// `x` for `x >= 0`, `slope * x` otherwise.
    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(Unary::LeakyRelu(T::lit(slope)), a).expect("leaky_relu is total")
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(Unary::Relu, a).expect("relu is total")
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(Unary::Gelu, a).expect("gelu is total")
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(Unary::Square, a).expect("square is total")
    }

    /// Clamps into `[lo, hi]`; the gradient is zero outside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(Unary::Clamp(T::lit(lo), T::lit(hi)), a).expect("clamp is total")
    }

    // ---- linear algebra ----------------------------------------------

    /// Batched matrix product. Each output entry is the correctly rounded
    /// sum of its products, so the result does not depend on the order of
    /// the contracted axis.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let g = MmGeom::new(self.shape(a), self.shape(b))?;
        let (x, y) = (self.data(a), self.data(b));
        let (m, k, n) = (g.m, g.k, g.n);
        let mut out = Vec::with_capacity(g.pairs.len() * m * n);
        let mut acc = ExactSum::new();
        for &(pa, pb) in &g.pairs {
            let xa = &x[pa * m * k..][..m * k];
            let yb = &y[pb * k * n..][..k * n];
            for i in 0..m {
                for j in 0..n {
                    acc.clear();
                    for t in 0..k {
                        acc.add(xa[i * k + t].to_f64().unwrap() * yb[t * n + j].to_f64().unwrap());
                    }
                    out.push(T::lit(acc.value()));
                }
            }
        }
        Ok(self.make(g.out_shape, out, Op::Matmul { a, b }, &[a, b]))
    }

    /// `y = x · weightᵀ + bias` over the last axis.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || xs.last() != Some(&ws[1]) {
            return Err(shape_err!("linear: input {xs:?} incompatible with weight {ws:?}"));
        }
        let (out_f, in_f) = (ws[0], ws[1]);
        if let Some(b) = b {
            if self.shape(b) != [out_f] {
                return Err(shape_err!("linear: bias {:?} for {out_f} outputs", self.shape(b)));
            }
        }
        let (xd, wd) = (self.data(x), self.data(w));
        let bd = b.map(|b| self.data(b));
        let rows = xd.len() / in_f;
        let mut out = Vec::with_capacity(rows * out_f);
        for r in 0..rows {
            let xr = &xd[r * in_f..][..in_f];
            for o in 0..out_f {
                let wr = &wd[o * in_f..][..in_f];
                let mut acc = bd.map_or(T::zero(), |b| b[o]);
                for t in 0..in_f {
                    acc = acc + xr[t] * wr[t];
                }
                out.push(acc);
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = out_f;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.make(shape, out, Op::Linear { x, w, b }, &inputs))
    }

    // ---- shape ---------------------------------------------------------

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape.to_vec())?;
        Ok(self.push(t, Op::Reshape { a }, &[a]))
    }

    /// Output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(shape_err!("invalid permutation {perm:?} for shape {s:?}"));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let data = permute_data(self.data(a), &s, perm);
        Ok(self.make(out_shape, data, Op::Permute { a, perm: perm.to_vec() }, &[a]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or_else(|| shape_err!("concat of nothing"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(shape_err!("concat axis {axis} out of range for {base:?}"));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            if s.len() != base.len() || s.iter().zip(&base).enumerate().any(|(d, (x, y))| d != axis && x != y) {
                return Err(shape_err!("concat operands disagree off axis {axis}: {base:?} vs {s:?}"));
            }
            total += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.data(v)[o * len..][..len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.make(shape, out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Elements `start..start + len` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(shape_err!("slice {start}..{} on axis {axis} of {s:?}", start + len));
        }
        let outer = numel(&s[..axis]);
        let inner = numel(&s[axis + 1..]);
        let x = self.data(a);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&x[(o * s[axis] + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        Ok(self.make(shape, out, Op::Slice { a, axis, start }, &[a]))
    }

    /// Zero padding: `pads[d] = (before, after)` for every axis.
    pub fn pad(&mut self, a: Var, pads: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if pads.len() != s.len() {
            return Err(shape_err!("pad needs one (before, after) per axis of {s:?}"));
        }
        let out_shape: Vec<usize> = s.iter().zip(pads).map(|(&e, &(b, f))| e + b + f).collect();
        let before: Vec<usize> = pads.iter().map(|p| p.0).collect();
        let ost = strides(&out_shape);
        let x = self.data(a);
        let mut out = vec![T::zero(); numel(&out_shape)];
        for_each_index(&s, |idx, flat| {
            let o: usize = idx.iter().zip(&before).zip(&ost).map(|((&i, &b), &st)| (i + b) * st).sum();
            out[o] = x[flat];
        });
        Ok(self.make(out_shape, out, Op::Pad { a, before }, &[a]))
    }

    fn reduce(&mut self, a: Var, axes: &[usize], mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axes.iter().any(|&ax| ax >= s.len()) {
            return Err(shape_err!("reduce axes {axes:?} out of range for {s:?}"));
        }
        let mut out_shape = s.clone();
        for &ax in axes {
            out_shape[ax] = 1;
        }
        let count: usize = s.iter().zip(&out_shape).map(|(&a, &b)| a / b).product();
        let ost = strides(&out_shape);
        let x = self.data(a);
        // Correctly rounded per slot; the naive sum only decides whether a
        // non-finite value must be propagated.
        let mut naive = vec![T::zero(); numel(&out_shape)];
        let mut exact = vec![ExactSum::new(); naive.len()];
        for_each_index(&s, |idx, flat| {
            let o: usize = idx.iter().zip(&out_shape).zip(&ost).map(|((&i, &e), &st)| if e == 1 { 0 } else { i * st }).sum();
            naive[o] = naive[o] + x[flat];
            exact[o].add(x[flat].to_f64().unwrap_or(f64::NAN));
        });
        let mut out: Vec<T> = naive
            .iter()
            .zip(&exact)
            .map(|(&n, e)| if n.is_finite() { T::lit(e.value()) } else { n })
            .collect();
        let divisor = if mean { T::lit(count as f64) } else { T::one() };
        if mean {
            out.iter_mut().for_each(|v| *v = *v / divisor);
        }
        Ok(self.make(out_shape, out, Op::Sum { a, divisor }, &[a]))
    }

    /// Sum over `axes`, keeping them as extent-1 dims.
    pub fn sum(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, false)
    }

    /// Mean over `axes`, keeping them as extent-1 dims.
    pub fn mean(&mut self, a: Var, axes: &[usize]) -> Result<Var> {
        self.reduce(a, axes, true)
    }

    /// Sum of every element, as a `[1]` tensor.
    pub fn sum_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let r = self.reduce(a, &axes, false).expect("valid axes");
        self.reshape(r, &[1]).expect("single element")
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let axes: Vec<usize> = (0..self.shape(a).len()).collect();
        let r = self.reduce(a, &axes, true).expect("valid axes");
        self.reshape(r, &[1]).expect("single element")
    }

    /// Softmax along `axis` with max subtraction; lane sums are correctly
    /// rounded.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() {
            return Err(shape_err!("softmax axis {axis} out of range for {s:?}"));
        }
        let (len, inner) = (s[axis], numel(&s[axis + 1..]));
        let outer = numel(&s[..axis]);
        let x = self.data(a);
        let mut out = vec![T::zero(); x.len()];
        let mut acc = ExactSum::new();
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).map(|j| x[at(j)]).fold(T::neg_infinity(), T::max);
                acc.clear();
                for j in 0..len {
                    let e = (x[at(j)] - max).exp();
                    out[at(j)] = e;
                    acc.add(e.to_f64().unwrap());
                }
                let total = T::lit(acc.value());
                for j in 0..len {
                    out[at(j)] = out[at(j)] / total;
                }
            }
        }
        Ok(self.make(s, out, Op::Softmax { a, axis }, &[a]))
    }

    // ---- volumetric ----------------------------------------------------

    /// 3D cross-correlation of `x: [N, Cin, H, W, D]` with cubic
    /// `w: [Cout, Cin, k, k, k]`, optional `bias: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = bias {
            if self.shape(b) != [geom.cout] {
                return Err(shape_err!("conv3d bias {:?} for {} output channels", self.shape(b), geom.cout));
            }
        }
        let out = conv::forward(&geom, self.data(x), self.data(w), bias.map(|b| self.data(b)));
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.make(geom.out_shape(), out, Op::Conv3d { x, w, b: bias, geom }, &inputs))
    }

    /// Resamples the spatial extents of `[N, C, H, W, D]` to `size`.
    pub fn resample(&mut self, x: Var, mode: ResampleMode, size: [usize; 3]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err!("resample wants [N, C, H, W, D], got {s:?}"));
        }
        check_shape(&size)?;
        let r = Resampler::<T>::new(mode, s[0] * s[1], [s[2], s[3], s[4]], size);
        let out = r.forward(self.data(x));
        Ok(self.make(vec![s[0], s[1], size[0], size[1], size[2]], out, Op::Resample { x, mode }, &[x]))
    }

    /// Doubles every spatial extent.
    pub fn upsample2(&mut self, x: Var, mode: ResampleMode) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err!("upsample wants [N, C, H, W, D], got {s:?}"));
        }
        self.resample(x, mode, [2 * s[2], 2 * s[3], 2 * s[4]])
    }

    /// Group normalization of `[N, C, ...spatial]` with per-channel affine
    /// `gamma, beta: [C]`. Statistics are taken over `C / groups` channels and
    /// all spatial positions of one sample.
    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(shape_err!("group_norm wants [N, C, ...], got {s:?}"));
        }
        let c = s[1];
        if groups == 0 || c % groups != 0 {
            return Err(shape_err!("{groups} groups do not divide {c} channels"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err!("norm affine params must be [{c}]"));
        }
        let spatial = numel(&s[2..]);
        let group_len = (c / groups) * spatial;
        if group_len < 2 {
            return Err(Error::Degenerate("normalization group has a single element".into()));
        }
        let saved = norm::standardize(self.data(x), group_len, T::lit(eps))?;
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = saved
            .xhat
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let ch = (i / spatial) % c;
                v * gd[ch] + bd[ch]
            })
            .collect();
        Ok(self.make(s, out, Op::GroupNorm { x, gamma, beta, saved, group_len }, &[x, gamma, beta]))
    }

    /// Instance normalization: statistics per (sample, channel) over all
    /// spatial positions. Needs at least two spatial positions.
    pub fn instance_norm3d(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 5 {
            return Err(shape_err!("instance_norm3d wants [N, C, H, W, D], got {s:?}"));
        }
        if numel(&s[2..]) < 2 {
            return Err(Error::Degenerate(format!(
                "instance norm over spatial size 1 (shape {s:?}) has no variance"
            )));
        }
        self.group_norm(x, gamma, beta, s[1], eps)
    }

    /// Normalizes each vector along the last axis, then `* gamma + beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| shape_err!("layer_norm of empty shape"))?;
        if d < 2 {
            return Err(shape_err!("layer_norm needs a last extent >= 2, got {s:?}"));
        }
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(shape_err!("layer_norm affine params must be [{d}]"));
        }
        let saved = norm::standardize(self.data(x), d, T::lit(eps))?;
        let (gd, bd) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = saved.xhat.iter().enumerate().map(|(i, &v)| v * gd[i % d] + bd[i % d]).collect();
        Ok(self.make(s, out, Op::LayerNorm { x, gamma, beta, saved }, &[x, gamma, beta]))
    }

    // ---- reverse pass ----------------------------------------------------

    /// Reverse-mode sweep from a one-element `loss`. Every node that requires
    /// a gradient gets one; leaves the loss does not depend on get zeros.
    /// Fan-out contributions are summed.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(n, g)| {
                if !n.requires_grad {
                    return None;
                }
                let data = g.unwrap_or_else(|| vec![T::zero(); n.value.numel()]);
                Some(Tensor { shape: n.value.shape.clone(), data: std::sync::Arc::new(data) })
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn backward_node(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let mut acc = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => existing.iter_mut().zip(contrib).for_each(|(e, c)| *e = *e + c),
                slot => *slot = Some(contrib),
            }
        };
        let want = |v: Var| self.nodes[v.0].requires_grad;
        let y = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (x, z) = (self.data(*a), self.data(*b));
                let bc = Bcast::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let mut ga = vec![T::zero(); x.len()];
                let mut gb = vec![T::zero(); z.len()];
                bc.blocks(|o, ia, ib| {
                    let (oa, ob, oo) = (ia * bc.inner, ib * bc.inner, o * bc.inner);
                    for t in 0..bc.inner {
                        let (p, q, gv) = (x[oa + t], z[ob + t], g[oo + t]);
                        let (da, db) = match kind {
                            Binary::Add => (gv, gv),
                            Binary::Sub => (gv, -gv),
                            Binary::Mul => (gv * q, gv * p),
                            Binary::Div => (gv / q, -gv * p / (q * q)),
                        };
                        ga[oa + t] = ga[oa + t] + da;
                        gb[ob + t] = gb[ob + t] + db;
                    }
                });
                acc(*a, ga);
                acc(*b, gb);
            }
            Op::Scale { a, s } => acc(*a, g.iter().map(|&v| v * *s).collect()),
            Op::AddScalar { a } => acc(*a, g.to_vec()),
            Op::Unary { kind, a } => {
                let x = self.data(*a);
                let d: Vec<T> = match kind {
                    Unary::Exp => g.iter().zip(y).map(|(&gv, &yv)| gv * yv).collect(),
                    Unary::Log => g.iter().zip(x).map(|(&gv, &xv)| gv / xv).collect(),
                    Unary::Sigmoid => g.iter().zip(y).map(|(&gv, &yv)| gv * yv * (T::one() - yv)).collect(),
                    Unary::LeakyRelu(s) => {
                        g.iter().zip(x).map(|(&gv, &xv)| if xv >= T::zero() { gv } else { gv * *s }).collect()
                    }
                    Unary::Relu => g.iter().zip(x).map(|(&gv, &xv)| if xv > T::zero() { gv } else { T::zero() }).collect(),
                    Unary::Gelu => g.iter().zip(x).map(|(&gv, &xv)| gv * gelu_parts(xv).1).collect(),
                    Unary::Square => g.iter().zip(x).map(|(&gv, &xv)| gv * (xv + xv)).collect(),
                    Unary::Clamp(lo, hi) => g
                        .iter()
                        .zip(x)
                        .map(|(&gv, &xv)| if xv >= *lo && xv <= *hi { gv } else { T::zero() })
                        .collect(),
                };
                acc(*a, d);
            }
            Op::Matmul { a, b } => {
                let mg = MmGeom::new(self.shape(*a), self.shape(*b)).expect("checked in forward");
                let (x, z) = (self.data(*a), self.data(*b));
                let (m, k, n) = (mg.m, mg.k, mg.n);
                let mut ga = vec![T::zero(); x.len()];
                let mut gb = vec![T::zero(); z.len()];
                for (bi, &(pa, pb)) in mg.pairs.iter().enumerate() {
                    let gs = &g[bi * m * n..][..m * n];
                    let (xa, zb) = (&x[pa * m * k..][..m * k], &z[pb * k * n..][..k * n]);
                    for i in 0..m {
                        for t in 0..k {
                            let mut s_a = T::zero();
                            for j in 0..n {
                                s_a = s_a + gs[i * n + j] * zb[t * n + j];
                                let gbt = &mut gb[pb * k * n + t * n + j];
                                *gbt = *gbt + xa[i * k + t] * gs[i * n + j];
                            }
                            let gat = &mut ga[pa * m * k + i * k + t];
                            *gat = *gat + s_a;
                        }
                    }
                }
                if want(*a) {
                    acc(*a, ga);
                }
                if want(*b) {
                    acc(*b, gb);
                }
            }
            Op::Linear { x, w, b } => {
                let (xd, wd) = (self.data(*x), self.data(*w));
                let ws = self.shape(*w);
                let (out_f, in_f) = (ws[0], ws[1]);
                let rows = xd.len() / in_f;
                if want(*x) {
                    let mut gx = vec![T::zero(); xd.len()];
                    for r in 0..rows {
                        for o in 0..out_f {
                            let gv = g[r * out_f + o];
                            for t in 0..in_f {
                                gx[r * in_f + t] = gx[r * in_f + t] + gv * wd[o * in_f + t];
                            }
                        }
                    }
                    acc(*x, gx);
                }
                if want(*w) {
                    let mut gw = vec![T::zero(); wd.len()];
                    for r in 0..rows {
                        for o in 0..out_f {
                            let gv = g[r * out_f + o];
                            for t in 0..in_f {
                                gw[o * in_f + t] = gw[o * in_f + t] + gv * xd[r * in_f + t];
                            }
                        }
                    }
                    acc(*w, gw);
                }
                if let Some(b) = b {
                    let mut gbias = vec![T::zero(); out_f];
                    for r in 0..rows {
                        for o in 0..out_f {
                            gbias[o] = gbias[o] + g[r * out_f + o];
                        }
                    }
                    acc(*b, gbias);
                }
            }
            Op::Reshape { a } => acc(*a, g.to_vec()),
            Op::Permute { a, perm } => {
                let mut inv = vec![0; perm.len()];
                for (i, &p) in perm.iter().enumerate() {
                    inv[p] = i;
                }
                acc(*a, permute_data(g, node.value.shape(), &inv));
            }
            Op::Concat { inputs, axis } => {
                let s = node.value.shape();
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let total = s[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    let mut gv = Vec::with_capacity(outer * len);
                    for o in 0..outer {
                        gv.extend_from_slice(&g[o * total + offset..][..len]);
                    }
                    offset += len;
                    acc(v, gv);
                }
            }
            Op::Slice { a, axis, start } => {
                let s = self.shape(*a);
                let outer = numel(&s[..*axis]);
                let inner = numel(&s[axis + 1..]);
                let len = node.value.shape()[*axis];
                let mut ga = vec![T::zero(); numel(s)];
                for o in 0..outer {
                    ga[(o * s[*axis] + start) * inner..][..len * inner]
                        .copy_from_slice(&g[o * len * inner..][..len * inner]);
                }
                acc(*a, ga);
            }
            Op::Pad { a, before } => {
                let s = self.shape(*a);
                let ost = strides(node.value.shape());
                let mut ga = vec![T::zero(); numel(s)];
                for_each_index(s, |idx, flat| {
                    let o: usize = idx.iter().zip(before).zip(&ost).map(|((&i, &b), &st)| (i + b) * st).sum();
                    ga[flat] = g[o];
                });
                acc(*a, ga);
            }
            Op::Sum { a, divisor, .. } => {
                let s = self.shape(*a);
                let out_shape = node.value.shape();
                let ost = strides(out_shape);
                let mut ga = vec![T::zero(); numel(s)];
                for_each_index(s, |idx, flat| {
                    let o: usize =
                        idx.iter().zip(out_shape).zip(&ost).map(|((&i, &e), &st)| if e == 1 { 0 } else { i * st }).sum();
                    ga[flat] = g[o] / *divisor;
                });
                acc(*a, ga);
            }
            Op::Softmax { a, axis } => {
                let s = node.value.shape();
                let (len, inner) = (s[*axis], numel(&s[axis + 1..]));
                let outer = numel(&s[..*axis]);
                let mut ga = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..len).fold(T::zero(), |acc, j| acc + g[at(j)] * y[at(j)]);
                        for j in 0..len {
                            ga[at(j)] = y[at(j)] * (g[at(j)] - dot);
                        }
                    }
                }
                acc(*a, ga);
            }
            Op::Conv3d { x, w, b, geom } => {
                if want(*x) {
                    acc(*x, conv::backward_input(geom, g, self.data(*w)));
                }
                if want(*w) {
                    acc(*w, conv::backward_weight(geom, g, self.data(*x)));
                }
                if let Some(b) = b {
                    acc(*b, conv::backward_bias(geom, g));
                }
            }
            Op::Resample { x, mode } => {
                let s = self.shape(*x);
                let o = node.value.shape();
                let r = Resampler::<T>::new(*mode, s[0] * s[1], [s[2], s[3], s[4]], [o[2], o[3], o[4]]);
                acc(*x, r.backward(g));
            }
            Op::GroupNorm { x, gamma, beta, saved, group_len } => {
                let s = self.shape(*x);
                let c = s[1];
                let spatial = numel(&s[2..]);
                let gd = self.data(*gamma);
                let mut ggamma = vec![T::zero(); c];
                let mut gbeta = vec![T::zero(); c];
                let mut gxhat = vec![T::zero(); g.len()];
                for (i, &gv) in g.iter().enumerate() {
                    let ch = (i / spatial) % c;
                    ggamma[ch] = ggamma[ch] + gv * saved.xhat[i];
                    gbeta[ch] = gbeta[ch] + gv;
                    gxhat[i] = gv * gd[ch];
                }
                if want(*x) {
                    acc(*x, norm::standardize_backward(saved, &gxhat, *group_len));
                }
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
            Op::LayerNorm { x, gamma, beta, saved } => {
                let d = self.shape(*gamma)[0];
                let gd = self.data(*gamma);
                let mut ggamma = vec![T::zero(); d];
                let mut gbeta = vec![T::zero(); d];
                let mut gxhat = vec![T::zero(); g.len()];
                for (i, &gv) in g.iter().enumerate() {
                    ggamma[i % d] = ggamma[i % d] + gv * saved.xhat[i];
                    gbeta[i % d] = gbeta[i % d] + gv;
                    gxhat[i] = gv * gd[i % d];
                }
                if want(*x) {
                    acc(*x, norm::standardize_backward(saved, &gxhat, d));
                }
                acc(*gamma, ggamma);
                acc(*beta, gbeta);
            }
        }
    }
}

fn permute_data<T: Element>(x: &[T], shape: &[usize], perm: &[usize]) -> Vec<T> {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let ist = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| ist[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    for_each_index(&out_shape, |idx, _| {
        let i: usize = idx.iter().zip(&src_strides).map(|(&a, &b)| a * b).sum();
        out.push(x[i]);
    });
    out
}

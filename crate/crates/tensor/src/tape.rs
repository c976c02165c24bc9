//! Wengert tape. Every op evaluates eagerly, stores its output and whatever
//! it needs for the vector-Jacobian product, and `backward` replays the
//! tape in reverse.
//!
//! Broadcasting is limited to a trailing-shape operand: in `add`, `sub` and
//! `mul` the right-hand side may have a shape equal to a suffix of the
//! left-hand side shape (biases, positional tables, gains).

use crate::error::{Result, TensorError};
use crate::kernels::{self, AttnDims, MatRef};
use crate::params::{ParamId, ParamStore};
use crate::{Float, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Extent of an axis split as `outer x len x inner`.
#[derive(Clone, Copy, Debug)]
struct Lanes {
    outer: usize,
    len: usize,
    inner: usize,
}

impl Lanes {
    fn of(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }

    fn for_each(&self, mut f: impl FnMut(usize)) {
        for o in 0..self.outer {
            for i in 0..self.inner {
                f(o * self.len * self.inner + i);
            }
        }
    }
}

enum Op<F> {
    Leaf,
    Param { store: u64, id: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    AddScalar { a: Var },
    MatMul { a: Var, b: Var, batch: usize, m: usize, k: usize, n: usize, shared: bool },
    Transpose { a: Var, batch: usize, rows: usize, cols: usize },
    Reshape { a: Var },
    Slice { a: Var, lanes: Lanes, start: usize, len: usize },
    GatherRows { a: Var, idx: Vec<usize>, row: usize },
    TakeTokens { a: Var, idx: Vec<Vec<usize>>, tokens: usize, dim: usize },
    ScatterTokens { kept: Var, fill: Var, idx: Vec<Vec<usize>>, tokens: usize, dim: usize },
    Sum { a: Var, lanes: Lanes },
    Mean { a: Var, lanes: Lanes },
    Exp { a: Var },
    Log { a: Var },
    Sqrt { a: Var },
    Gelu { a: Var },
    ClampMin { a: Var, min: F },
    Softmax { a: Var, lanes: Lanes },
    LogSoftmax { a: Var, lanes: Lanes },
    LayerNorm { x: Var, g: Var, b: Var, xhat: Vec<F>, rstd: Vec<F> },
    L2Normalize { a: Var, norms: Vec<F> },
    Attention { q: Var, k: Var, v: Var, dims: AttnDims, probs: Vec<F> },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
pub struct Tape<F: Float> {
    nodes: Vec<Node<F>>,
    grad_enabled: bool,
    check_finite: bool,
}

impl<F: Float> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn suffix_of(a: &[usize], b: &[usize]) -> bool {
    b.len() <= a.len() && a[a.len() - b.len()..] == *b
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> TensorError {
    TensorError::ShapeMismatch { op, lhs: a.to_vec(), rhs: b.to_vec() }
}

fn invalid(op: &'static str, msg: impl Into<String>) -> TensorError {
    TensorError::InvalidArgument { op, msg: msg.into() }
}

fn accumulate<F: Float>(slot: &mut Option<Vec<F>>, delta: Vec<F>) {
    match slot {
        Some(g) => g.iter_mut().zip(delta).for_each(|(x, d)| *x += d),
        None => *slot = Some(delta),
    }
}

/// Sums `g` over repeats of a trailing block of length `n`.
fn reduce_suffix<F: Float>(g: &[F], n: usize) -> Vec<F> {
    let mut out = vec![F::zero(); n];
    for chunk in g.chunks(n) {
        out.iter_mut().zip(chunk).for_each(|(o, &x)| *o += x);
    }
    out
}

impl<F: Float> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grad_enabled: true, check_finite: false }
    }

    /// A tape on which nothing requires gradients.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grad_enabled: false, check_finite: false }
    }

    /// Makes every op fail with [`TensorError::NonFinite`] on NaN/inf output.
    pub fn set_check_finite(&mut self, on: bool) {
        self.check_finite = on;
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, op_name: &'static str, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Result<Var> {
        if self.check_finite && value.data().iter().any(|x| !x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        let requires_grad = self.grad_enabled && inputs.iter().any(|&v| self.rg(v));
        self.nodes.push(Node { value, op, requires_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn build(shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("op produced inconsistent tensor")
    }

    /// A value that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<F>) -> Var {
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad: false });
        Var(self.nodes.len() - 1)
    }

    /// A free input that receives a gradient.
    pub fn leaf(&mut self, t: Tensor<F>) -> Var {
        let requires_grad = self.grad_enabled;
        self.nodes.push(Node { value: t, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Snapshot of a stored parameter. It requires a gradient iff the tape
    /// records gradients and the parameter is trainable.
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let p = store.get(id);
        let requires_grad = self.grad_enabled && p.trainable;
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param { store: store.uid(), id: id.0 },
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn binary_check(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if suffix_of(sa, sb) {
            Ok(())
        } else {
            Err(mismatch(op, sa, sb))
        }
    }

    fn zip_broadcast(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Vec<F> {
        let (da, db) = (self.data(a), self.data(b));
        let nb = db.len();
        let mut out = Vec::with_capacity(da.len());
        for chunk in da.chunks(nb) {
            out.extend(chunk.iter().zip(db).map(|(&x, &y)| f(x, y)));
        }
        out
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("add", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x + y);
        let t = Self::build(self.shape(a).to_vec(), out);
        self.push("add", t, Op::Add { a, b }, &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("sub", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x - y);
        let t = Self::build(self.shape(a).to_vec(), out);
        self.push("sub", t, Op::Sub { a, b }, &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_check("mul", a, b)?;
        let out = self.zip_broadcast(a, b, |x, y| x * y);
        let t = Self::build(self.shape(a).to_vec(), out);
        self.push("mul", t, Op::Mul { a, b }, &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::cast(c);
        let out = self.data(a).iter().map(|&x| x * c).collect();
        let t = Self::build(self.shape(a).to_vec(), out);
        self.push("scale", t, Op::Scale { a, c }, &[a])
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = F::cast(c);
        let out = self.data(a).iter().map(|&x| x + c).collect();
        let t = Self::build(self.shape(a).to_vec(), out);
        self.push("add_scalar", t, Op::AddScalar { a }, &[a])
    }

    /// `[..., m, k] @ [k, n]` (shared right operand) or
    /// `[..., m, k] @ [..., k, n]` with equal leading dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(mismatch("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![F::zero(); batch * m * n];
        if shared {
            kernels::gemm(batch * m, k, n, F::one(), MatRef::rows(da, 0, k), MatRef::rows(db, 0, n), F::zero(), &mut out, 0, n);
        } else {
            for i in 0..batch {
                kernels::gemm(
                    m,
                    k,
                    n,
                    F::one(),
                    MatRef::rows(da, i * m * k, k),
                    MatRef::rows(db, i * k * n, n),
                    F::zero(),
                    &mut out,
                    i * m * n,
                    n,
                );
            }
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let t = Self::build(shape, out);
        self.push("matmul", t, Op::MatMul { a, b, batch, m, k, n, shared }, &[a, b])
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(invalid("transpose", format!("rank {} < 2", s.len())));
        }
        let (rows, cols) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let out = transpose_blocks(self.data(a), batch, rows, cols);
        let mut shape = s[..s.len() - 2].to_vec();
        shape.extend([cols, rows]);
        let t = Self::build(shape, out);
        self.push("transpose", t, Op::Transpose { a, batch, rows, cols }, &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshape(shape)?;
        self.push("reshape", t, Op::Reshape { a }, &[a])
    }

    /// Contiguous range `[start, start + len)` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || len == 0 || start + len > s[axis] {
            return Err(invalid("slice", format!("[{start}, {}) on axis {axis} of {s:?}", start + len)));
        }
        let lanes = Lanes::of(&s, axis);
        let d = self.data(a);
        let mut out = Vec::with_capacity(lanes.outer * len * lanes.inner);
        for o in 0..lanes.outer {
            let base = o * lanes.len * lanes.inner;
            out.extend_from_slice(&d[base + start * lanes.inner..base + (start + len) * lanes.inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Self::build(shape, out);
        self.push("slice", t, Op::Slice { a, lanes, start, len }, &[a])
    }

    /// Selects rows (along axis 0) by index; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.is_empty() || idx.is_empty() || idx.iter().any(|&i| i >= s[0]) {
            return Err(invalid("gather_rows", format!("indices out of range for {s:?}")));
        }
        let row: usize = s[1..].iter().product();
        let d = self.data(a);
        let out = idx.iter().flat_map(|&i| d[i * row..(i + 1) * row].iter().copied()).collect();
        let mut shape = s;
        shape[0] = idx.len();
        let t = Self::build(shape, out);
        self.push("gather_rows", t, Op::GatherRows { a, idx: idx.to_vec(), row }, &[a])
    }

    /// Per-sample token selection: `a: [B, T, D]`, `idx[b]` lists the `K`
    /// token positions kept for sample `b`.
    pub fn take_tokens(&mut self, a: Var, idx: &[Vec<usize>]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let k = idx.first().map_or(0, Vec::len);
        if s.len() != 3 || idx.len() != s[0] || k == 0 || idx.iter().any(|r| r.len() != k || r.iter().any(|&i| i >= s[1])) {
            return Err(invalid("take_tokens", format!("bad index set for {s:?}")));
        }
        let (tokens, dim) = (s[1], s[2]);
        let d = self.data(a);
        let mut out = Vec::with_capacity(s[0] * k * dim);
        for (b, rows) in idx.iter().enumerate() {
            for &i in rows {
                let off = (b * tokens + i) * dim;
                out.extend_from_slice(&d[off..off + dim]);
            }
        }
        let t = Self::build(vec![s[0], k, dim], out);
        self.push("take_tokens", t, Op::TakeTokens { a, idx: idx.to_vec(), tokens, dim }, &[a])
    }

    /// Inverse of [`take_tokens`](Self::take_tokens): places `kept: [B, K, D]`
    /// at positions `idx[b]` of a `[B, tokens, D]` output whose remaining
    /// positions hold `fill: [D]`.
    pub fn scatter_tokens(&mut self, kept: Var, fill: Var, idx: &[Vec<usize>], tokens: usize) -> Result<Var> {
        let s = self.shape(kept).to_vec();
        let sf = self.shape(fill).to_vec();
        if s.len() != 3 || sf != [s[2]] {
            return Err(mismatch("scatter_tokens", &s, &sf));
        }
        if idx.len() != s[0] || idx.iter().any(|r| r.len() != s[1] || r.iter().any(|&i| i >= tokens)) {
            return Err(invalid("scatter_tokens", "index set does not match kept tokens"));
        }
        let dim = s[2];
        let f = self.data(fill).to_vec();
        let kd = self.data(kept);
        let mut out: Vec<F> = f.iter().copied().cycle().take(s[0] * tokens * dim).collect();
        for (b, rows) in idx.iter().enumerate() {
            for (j, &i) in rows.iter().enumerate() {
                let dst = (b * tokens + i) * dim;
                let src = (b * s[1] + j) * dim;
                out[dst..dst + dim].copy_from_slice(&kd[src..src + dim]);
            }
        }
        let t = Self::build(vec![s[0], tokens, dim], out);
        self.push("scatter_tokens", t, Op::ScatterTokens { kept, fill, idx: idx.to_vec(), tokens, dim }, &[kept, fill])
    }

    fn reduce(&mut self, a: Var, axis: usize, mean: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let name = if mean { "mean" } else { "sum" };
        if axis >= s.len() {
            return Err(invalid(name, format!("axis {axis} out of range for {s:?}")));
        }
        let lanes = Lanes::of(&s, axis);
        let d = self.data(a);
        let mut out = vec![F::zero(); lanes.outer * lanes.inner];
        let scale = if mean { F::one() / F::cast(lanes.len as f64) } else { F::one() };
        if lanes.inner == 1 {
            for (o, row) in out.iter_mut().zip(d.chunks(lanes.len)) {
                *o = kernels::lane_sum(row);
            }
        } else {
            for o in 0..lanes.outer {
            for j in 0..lanes.len {
                let src = &d[(o * lanes.len + j) * lanes.inner..(o * lanes.len + j + 1) * lanes.inner];
                out[o * lanes.inner..(o + 1) * lanes.inner]
                    .iter_mut()
                    .zip(src)
                    .for_each(|(x, &y)| *x += y);
                }
            }
        }
        if mean {
            out.iter_mut().for_each(|x| *x *= scale);
        }
        let mut shape = s;
        shape.remove(axis);
        let t = Self::build(shape, out);
        let op = if mean { Op::Mean { a, lanes } } else { Op::Sum { a, lanes } };
        self.push(name, t, op, &[a])
    }

    /// Sum over `axis`, removing it.
    pub fn sum(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, false)
    }

    /// Mean over `axis`, removing it.
    pub fn mean(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.reduce(a, axis, true)
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.sum(flat, 0)
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).numel();
        let flat = self.reshape(a, &[n])?;
        self.mean(flat, 0)
    }

    /// Average over the token axis of `[B, T, D]`.
    pub fn mean_pool(&mut self, a: Var) -> Result<Var> {
        if self.shape(a).len() != 3 {
            return Err(invalid("mean_pool", format!("expected [B, T, D], got {:?}", self.shape(a))));
        }
        self.mean(a, 1)
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(F) -> F, op: Op<F>) -> Result<Var> {
        let out = self.data(a).iter().map(|&x| f(x)).collect();
        let t = Self::build(self.shape(a).to_vec(), out);
        self.push(name, t, op, &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, F::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary("log", a, F::ln, Op::Log { a })
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.unary("sqrt", a, F::sqrt, Op::Sqrt { a })
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        self.unary("gelu", a, kernels::gelu, Op::Gelu { a })
    }

    /// `max(a, min)`; the gradient is zero where clamped.
    pub fn clamp_min(&mut self, a: Var, min: f64) -> Result<Var> {
        let min = F::cast(min);
        self.unary("clamp_min", a, |x| x.max(min), Op::ClampMin { a, min })
    }

    fn softmax_impl(&mut self, a: Var, axis: usize, log: bool) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let name = if log { "log_softmax" } else { "softmax" };
        if axis >= s.len() {
            return Err(invalid(name, format!("axis {axis} out of range for {s:?}")));
        }
        let lanes = Lanes::of(&s, axis);
        let mut out = self.data(a).to_vec();
        let (len, inner) = (lanes.len, lanes.inner);
        if inner == 1 && !log {
            kernels::softmax_rows(&mut out, len);
            let t = Self::build(s, out);
            return self.push(name, t, Op::Softmax { a, lanes }, &[a]);
        }
        lanes.for_each(|base| {
            let at = |j: usize| base + j * inner;
            let mx = (0..len).map(|j| out[at(j)]).fold(F::neg_infinity(), F::max);
            let mut z = F::zero();
            for j in 0..len {
                z += (out[at(j)] - mx).exp_fast();
            }
            if log {
                let lz = z.ln() + mx;
                for j in 0..len {
                    out[at(j)] -= lz;
                }
            } else {
                for j in 0..len {
                    out[at(j)] = (out[at(j)] - mx).exp_fast() / z;
                }
            }
        });
        let t = Self::build(s, out);
        let op = if log { Op::LogSoftmax { a, lanes } } else { Op::Softmax { a, lanes } };
        self.push(name, t, op, &[a])
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, false)
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(a, axis, true)
    }

    /// Layer norm over the last axis with affine `g, b: [D]`. A constant row
    /// maps to `b` since the variance gets `eps` added.
    pub fn layer_norm(&mut self, x: Var, g: Var, b: Var, eps: f64) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let d = *s.last().ok_or_else(|| invalid("layer_norm", "scalar input"))?;
        if self.shape(g) != [d] || self.shape(b) != [d] {
            return Err(mismatch("layer_norm", &s, self.shape(g)));
        }
        let eps = F::cast(eps);
        let inv_d = F::one() / F::cast(d as f64);
        let (xd, gd, bd) = (self.data(x), self.data(g), self.data(b));
        let rows = xd.len() / d;
        let mut xhat = vec![F::zero(); xd.len()];
        let mut rstd = vec![F::zero(); rows];
        let mut out = vec![F::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mu = row.iter().copied().sum::<F>() * inv_d;
            let var = row.iter().map(|&v| (v - mu) * (v - mu)).sum::<F>() * inv_d;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mu) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * gd[j] + bd[j];
            }
        }
        let t = Self::build(s, out);
        let keep = self.grad_enabled;
        let op = Op::LayerNorm {
            x,
            g,
            b,
            xhat: if keep { xhat } else { Vec::new() },
            rstd: if keep { rstd } else { Vec::new() },
        };
        self.push("layer_norm", t, op, &[x, g, b])
    }

    /// Rows scaled to unit L2 norm over the last axis; norms below `eps` are
    /// replaced by `eps`.
    pub fn l2_normalize(&mut self, a: Var, eps: f64) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let d = *s.last().ok_or_else(|| invalid("l2_normalize", "scalar input"))?;
        let eps = F::cast(eps);
        let data = self.data(a);
        let mut norms = Vec::with_capacity(data.len() / d);
        let mut out = Vec::with_capacity(data.len());
        for row in data.chunks(d) {
            let n = row.iter().map(|&v| v * v).sum::<F>().sqrt().max(eps);
            norms.push(n);
            out.extend(row.iter().map(|&v| v / n));
        }
        let t = Self::build(s, out);
        self.push("l2_normalize", t, Op::L2Normalize { a, norms }, &[a])
    }

    /// Multi-head scaled dot-product self-attention on `[B, T, D]` inputs.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize) -> Result<Var> {
        let s = self.shape(q).to_vec();
        if s.len() != 3 || self.shape(k) != s.as_slice() || self.shape(v) != s.as_slice() {
            return Err(mismatch("attention", &s, self.shape(k)));
        }
        if heads == 0 || s[2] % heads != 0 {
            return Err(invalid("attention", format!("dim {} not divisible by {heads} heads", s[2])));
        }
        let dims = AttnDims { batch: s[0], tokens: s[1], dim: s[2], heads };
        let keep = self.grad_enabled && (self.rg(q) || self.rg(k) || self.rg(v));
        let (out, probs) = kernels::attention_forward(self.data(q), self.data(k), self.data(v), dims, keep);
        let t = Self::build(s, out);
        self.push("attention", t, Op::Attention { q, k, v, dims, probs }, &[q, k, v])
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<F>> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        let mut params = Vec::new();
        if !self.rg(loss) {
            return Ok(Gradients { grads, params });
        }
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => grads[i] = Some(g),
                Op::Param { store, id } => {
                    params.push((*store, *id, i));
                    grads[i] = Some(g);
                }
                op => self.backward_op(op, i, &g, &mut grads),
            }
        }
        Ok(Gradients { grads, params })
    }

    fn backward_op(&self, op: &Op<F>, node: usize, g: &[F], grads: &mut [Option<Vec<F>>]) {
        let out = self.nodes[node].value.data();
        match op {
            Op::Leaf | Op::Param { .. } => unreachable!(),
            Op::Add { a, b } | Op::Sub { a, b } => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], g.to_vec());
                }
                if self.rg(*b) {
                    let mut gb = reduce_suffix(g, self.value(*b).numel());
                    if matches!(op, Op::Sub { .. }) {
                        gb.iter_mut().for_each(|x| *x = -*x);
                    }
                    accumulate(&mut grads[b.0], gb);
                }
            }
            Op::Mul { a, b } => {
                let (da, db) = (self.data(*a), self.data(*b));
                let nb = db.len();
                if self.rg(*a) {
                    let mut ga = Vec::with_capacity(g.len());
                    for chunk in g.chunks(nb) {
                        ga.extend(chunk.iter().zip(db).map(|(&x, &y)| x * y));
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(*b) {
                    let prod: Vec<F> = g.iter().zip(da).map(|(&x, &y)| x * y).collect();
                    accumulate(&mut grads[b.0], reduce_suffix(&prod, nb));
                }
            }
            Op::Scale { a, c } => {
                accumulate(&mut grads[a.0], g.iter().map(|&x| x * *c).collect());
            }
            Op::AddScalar { a } | Op::Reshape { a } => accumulate(&mut grads[a.0], g.to_vec()),
            &Op::MatMul { a, b, batch, m, k, n, shared } => {
                let (da, db) = (self.data(a), self.data(b));
                if self.rg(a) {
                    let mut ga = vec![F::zero(); batch * m * k];
                    if shared {
                        // dA = G B^T
                        kernels::gemm(batch * m, n, k, F::one(), MatRef::rows(g, 0, n), MatRef::transposed(db, 0, n), F::zero(), &mut ga, 0, k);
                    } else {
                        for i in 0..batch {
                            kernels::gemm(m, n, k, F::one(), MatRef::rows(g, i * m * n, n), MatRef::transposed(db, i * k * n, n), F::zero(), &mut ga, i * m * k, k);
                        }
                    }
                    accumulate(&mut grads[a.0], ga);
                }
                if self.rg(b) {
                    let gb = if shared {
                        // dB = A^T G
                        let mut gb = vec![F::zero(); k * n];
                        kernels::gemm(k, batch * m, n, F::one(), MatRef::transposed(da, 0, k), MatRef::rows(g, 0, n), F::zero(), &mut gb, 0, n);
                        gb
                    } else {
                        let mut gb = vec![F::zero(); batch * k * n];
                        for i in 0..batch {
                            kernels::gemm(k, m, n, F::one(), MatRef::transposed(da, i * m * k, k), MatRef::rows(g, i * m * n, n), F::zero(), &mut gb, i * k * n, n);
                        }
                        gb
                    };
                    accumulate(&mut grads[b.0], gb);
                }
            }
            &Op::Transpose { a, batch, rows, cols } => {
                accumulate(&mut grads[a.0], transpose_blocks(g, batch, cols, rows));
            }
            &Op::Slice { a, lanes, start, len } => {
                let mut ga = vec![F::zero(); self.value(a).numel()];
                for o in 0..lanes.outer {
                    let dst = o * lanes.len * lanes.inner + start * lanes.inner;
                    let src = o * len * lanes.inner;
                    ga[dst..dst + len * lanes.inner].copy_from_slice(&g[src..src + len * lanes.inner]);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::GatherRows { a, idx, row } => {
                let mut ga = vec![F::zero(); self.value(*a).numel()];
                for (j, &i) in idx.iter().enumerate() {
                    ga[i * row..(i + 1) * row]
                        .iter_mut()
                        .zip(&g[j * row..(j + 1) * row])
                        .for_each(|(x, &y)| *x += y);
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::TakeTokens { a, idx, tokens, dim } => {
                let mut ga = vec![F::zero(); self.value(*a).numel()];
                let k = idx[0].len();
                for (b, rows) in idx.iter().enumerate() {
                    for (j, &i) in rows.iter().enumerate() {
                        let dst = (b * tokens + i) * dim;
                        let src = (b * k + j) * dim;
                        ga[dst..dst + dim].iter_mut().zip(&g[src..src + dim]).for_each(|(x, &y)| *x += y);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::ScatterTokens { kept, fill, idx, tokens, dim } => {
                let (tokens, dim) = (*tokens, *dim);
                let k = idx[0].len();
                if self.rg(*kept) {
                    let mut gk = vec![F::zero(); idx.len() * k * dim];
                    for (b, rows) in idx.iter().enumerate() {
                        for (j, &i) in rows.iter().enumerate() {
                            let src = (b * tokens + i) * dim;
                            let dst = (b * k + j) * dim;
                            gk[dst..dst + dim].copy_from_slice(&g[src..src + dim]);
                        }
                    }
                    accumulate(&mut grads[kept.0], gk);
                }
                if self.rg(*fill) {
                    let mut gf = vec![F::zero(); dim];
                    let mut is_kept = vec![false; tokens];
                    for (b, rows) in idx.iter().enumerate() {
                        is_kept.iter_mut().for_each(|x| *x = false);
                        rows.iter().for_each(|&i| is_kept[i] = true);
                        for (t, _) in is_kept.iter().enumerate().filter(|(_, &kk)| !kk) {
                            let src = (b * tokens + t) * dim;
                            gf.iter_mut().zip(&g[src..src + dim]).for_each(|(x, &y)| *x += y);
                        }
                    }
                    accumulate(&mut grads[fill.0], gf);
                }
            }
            &Op::Sum { a, lanes } | &Op::Mean { a, lanes } => {
                let scale = if matches!(op, Op::Mean { .. }) {
                    F::one() / F::cast(lanes.len as f64)
                } else {
                    F::one()
                };
                if lanes.inner == 1 {
                    let ga = g.iter().flat_map(|&x| std::iter::repeat_n(x * scale, lanes.len)).collect();
                    accumulate(&mut grads[a.0], ga);
                    return;
                }
                let mut ga = vec![F::zero(); lanes.outer * lanes.len * lanes.inner];
                for o in 0..lanes.outer {
                    let src = &g[o * lanes.inner..(o + 1) * lanes.inner];
                    for j in 0..lanes.len {
                        let base = (o * lanes.len + j) * lanes.inner;
                        ga[base..base + lanes.inner].iter_mut().zip(src).for_each(|(x, &y)| *x = y * scale);
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Exp { a } => {
                accumulate(&mut grads[a.0], g.iter().zip(out).map(|(&x, &y)| x * y).collect());
            }
            Op::Log { a } => {
                let da = self.data(*a);
                accumulate(&mut grads[a.0], g.iter().zip(da).map(|(&x, &y)| x / y).collect());
            }
            Op::Sqrt { a } => {
                let half = F::cast(0.5);
                accumulate(&mut grads[a.0], g.iter().zip(out).map(|(&x, &y)| x * half / y).collect());
            }
            Op::Gelu { a } => {
                let da = self.data(*a);
                accumulate(&mut grads[a.0], g.iter().zip(da).map(|(&x, &y)| x * kernels::gelu_grad(y)).collect());
            }
            Op::ClampMin { a, min } => {
                let da = self.data(*a);
                let ga = g.iter().zip(da).map(|(&x, &y)| if y > *min { x } else { F::zero() }).collect();
                accumulate(&mut grads[a.0], ga);
            }
            &Op::Softmax { a, lanes } | &Op::LogSoftmax { a, lanes } => {
                let log = matches!(op, Op::LogSoftmax { .. });
                let mut ga = vec![F::zero(); g.len()];
                let (len, inner) = (lanes.len, lanes.inner);
                lanes.for_each(|base| {
                    let at = |j: usize| base + j * inner;
                    if log {
                        let gs = (0..len).map(|j| g[at(j)]).sum::<F>();
                        for j in 0..len {
                            ga[at(j)] = g[at(j)] - out[at(j)].exp_fast() * gs;
                        }
                    } else {
                        let dot = (0..len).map(|j| g[at(j)] * out[at(j)]).sum::<F>();
                        for j in 0..len {
                            ga[at(j)] = out[at(j)] * (g[at(j)] - dot);
                        }
                    }
                });
                accumulate(&mut grads[a.0], ga);
            }
            Op::LayerNorm { x, g: gamma, b: beta, xhat, rstd } => {
                let d = self.value(*gamma).numel();
                let gd = self.data(*gamma);
                if self.rg(*gamma) {
                    let mut gg = vec![F::zero(); d];
                    for (grow, hrow) in g.chunks(d).zip(xhat.chunks(d)) {
                        gg.iter_mut().zip(grow.iter().zip(hrow)).for_each(|(o, (&a, &b))| *o += a * b);
                    }
                    accumulate(&mut grads[gamma.0], gg);
                }
                if self.rg(*beta) {
                    accumulate(&mut grads[beta.0], reduce_suffix(g, d));
                }
                if self.rg(*x) {
                    let inv_d = F::one() / F::cast(d as f64);
                    let mut gx = vec![F::zero(); g.len()];
                    let mut dh = vec![F::zero(); d];
                    for (r, (grow, hrow)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        dh.iter_mut().zip(grow.iter().zip(gd)).for_each(|(o, (&a, &b))| *o = a * b);
                        let m1 = dh.iter().copied().sum::<F>() * inv_d;
                        let m2 = dh.iter().zip(hrow).map(|(&a, &b)| a * b).sum::<F>() * inv_d;
                        for j in 0..d {
                            gx[r * d + j] = rstd[r] * (dh[j] - m1 - hrow[j] * m2);
                        }
                    }
                    accumulate(&mut grads[x.0], gx);
                }
            }
            Op::L2Normalize { a, norms } => {
                let d = out.len() / norms.len();
                let mut ga = vec![F::zero(); g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let y = &out[r * d..(r + 1) * d];
                    let gr = &g[r * d..(r + 1) * d];
                    let dot = y.iter().zip(gr).map(|(&a, &b)| a * b).sum::<F>();
                    for j in 0..d {
                        ga[r * d + j] = (gr[j] - y[j] * dot) / n;
                    }
                }
                accumulate(&mut grads[a.0], ga);
            }
            Op::Attention { q, k, v, dims, probs } => {
                let (gq, gk, gv) = kernels::attention_backward(self.data(*q), self.data(*k), self.data(*v), probs, g, *dims);
                for (var, gr) in [(q, gq), (k, gk), (v, gv)] {
                    if self.rg(*var) {
                        accumulate(&mut grads[var.0], gr);
                    }
                }
            }
        }
    }
}

fn transpose_blocks<F: Float>(d: &[F], batch: usize, rows: usize, cols: usize) -> Vec<F> {
    let mut out = vec![F::zero(); d.len()];
    for b in 0..batch {
        let off = b * rows * cols;
        for r in 0..rows {
            for c in 0..cols {
                out[off + c * rows + r] = d[off + r * cols + c];
            }
        }
    }
    out
}

/// Result of [`Tape::backward`].
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
    params: Vec<(u64, usize, usize)>,
}

impl<F: Float> Gradients<F> {
    /// Gradient of a leaf or parameter snapshot; `None` if it did not
    /// influence the loss.
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient of `v`, zeros if it did not influence the loss.
    pub fn get_or_zeros(&self, v: Var, numel: usize) -> Vec<F> {
        self.get(v).map_or_else(|| vec![F::zero(); numel], <[F]>::to_vec)
    }

    /// Adds every parameter gradient that belongs to `store` into its
    /// accumulators. A parameter used several times receives the sum.
    pub fn accumulate_into(&self, store: &mut ParamStore<F>) {
        for &(uid, id, node) in &self.params {
            if uid != store.uid() {
                continue;
            }
            if let Some(g) = &self.grads[node] {
                store
                    .get_mut(ParamId(id))
                    .grad
                    .iter_mut()
                    .zip(g)
                    .for_each(|(a, &b)| *a += b);
            }
        }
    }
}

use rayon::prelude::*;

use crate::Float;

/// Strided read-only view of a matrix inside a flat buffer.
#[derive(Clone, Copy)]
pub struct MatRef<'a, F> {
    pub data: &'a [F],
    pub off: usize,
    pub rs: usize,
    pub cs: usize,
}

impl<'a, F> MatRef<'a, F> {
    pub fn rows(data: &'a [F], off: usize, cols: usize) -> Self {
        Self { data, off, rs: cols, cs: 1 }
    }

    /// Transposed view of a row-major `rows x cols` block.
    pub fn transposed(data: &'a [F], off: usize, cols: usize) -> Self {
        Self { data, off, rs: 1, cs: cols }
    }

    fn check(&self, r: usize, c: usize) {
        if r > 0 && c > 0 {
            let last = self.off + (r - 1) * self.rs + (c - 1) * self.cs;
            assert!(last < self.data.len(), "gemm operand out of bounds");
        }
    }
}

/// `c <- alpha * a @ b + beta * c` with `a: m x k`, `b: k x n`, and `c` a
/// row-major block with row stride `rsc` starting at `c_off`.
#[allow(clippy::too_many_arguments)]
pub fn gemm<F: Float>(
    m: usize,
    k: usize,
    n: usize,
    alpha: F,
    a: MatRef<'_, F>,
    b: MatRef<'_, F>,
    beta: F,
    c: &mut [F],
    c_off: usize,
    rsc: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    a.check(m, k);
    b.check(k, n);
    assert!(c_off + (m - 1) * rsc + n <= c.len(), "gemm output out of bounds");
    // SAFETY: bounds of every operand were checked above.
    unsafe {
        F::gemm_raw(
            m,
            k,
            n,
            alpha,
            a.data.as_ptr().add(a.off),
            a.rs as isize,
            a.cs as isize,
            b.data.as_ptr().add(b.off),
            b.rs as isize,
            b.cs as isize,
            beta,
            c.as_mut_ptr().add(c_off),
            rsc as isize,
            1,
        );
    }
}

/// `e^x` for `f32` to within about 2 ulp: range reduction by `ln 2`, a
/// degree-6 polynomial on the remainder, then exponent insertion.
#[inline]
pub fn expf(x: f32) -> f32 {
    const LOG2E: f32 = std::f32::consts::LOG2_E;
    const LN2_HI: f32 = 0.693_359_4;
    const LN2_LO: f32 = -2.121_944_4e-4;
    // Adding and subtracting 1.5 * 2^23 rounds to nearest without a libm call.
    const SHIFTER: f32 = 12_582_912.0;
    let x = x.clamp(-87.3, 88.7);
    let n = (x * LOG2E + SHIFTER) - SHIFTER;
    let r = x - n * LN2_HI - n * LN2_LO;
    let p = 1.0
        + r * (1.0
            + r * (0.5
                + r * (0.166_666_67 + r * (0.041_666_668 + r * (0.008_333_334 + r * (0.001_388_889 + r * 0.000_198_412_7))))));
    let bits = ((n as i32 + 127) as u32) << 23;
    p * f32::from_bits(bits)
}

/// `tanh` via [`Float::exp_fast`], saturating for large arguments.
#[inline]
fn tanh_fast<F: Float>(u: F) -> F {
    let two = F::cast(2.0);
    let e = (two * u).exp_fast();
    F::one() - two / (e + F::one())
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GeLU.
pub fn gelu<F: Float>(x: F) -> F {
    let c = F::cast(GELU_C);
    let a = F::cast(GELU_A);
    let half = F::cast(0.5);
    half * x * (F::one() + tanh_fast(c * (x + a * x * x * x)))
}

pub fn gelu_grad<F: Float>(x: F) -> F {
    let c = F::cast(GELU_C);
    let a = F::cast(GELU_A);
    let half = F::cast(0.5);
    let inner = c * (x + a * x * x * x);
    let t = tanh_fast(inner);
    let dinner = c * (F::one() + F::cast(3.0) * a * x * x);
    half * (F::one() + t) + half * x * (F::one() - t * t) * dinner
}

/// Sum with eight interleaved accumulators so the loop vectorizes; the
/// association order is fixed, so results stay deterministic.
#[inline]
pub fn lane_sum<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] += c[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for &x in chunks.remainder() {
        s += x;
    }
    s
}

/// Dot product with the same fixed association as [`lane_sum`].
#[inline]
pub fn lane_dot<F: Float>(a: &[F], b: &[F]) -> F {
    let mut acc = [F::zero(); 8];
    let mut ca = a.chunks_exact(8);
    let mut cb = b.chunks_exact(8);
    for (x, y) in (&mut ca).zip(&mut cb) {
        for i in 0..8 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut s = ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7]));
    for (&x, &y) in ca.remainder().iter().zip(cb.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
fn lane_max<F: Float>(xs: &[F]) -> F {
    let mut acc = [F::neg_infinity(); 8];
    let mut chunks = xs.chunks_exact(8);
    for c in &mut chunks {
        for i in 0..8 {
            acc[i] = if c[i] > acc[i] { c[i] } else { acc[i] };
        }
    }
    let mut m = acc.iter().copied().fold(F::neg_infinity(), F::max);
    for &x in chunks.remainder() {
        m = m.max(x);
    }
    m
}

/// In-place numerically stable softmax over each contiguous row of `len`.
pub fn softmax_rows<F: Float>(buf: &mut [F], len: usize) {
    for row in buf.chunks_mut(len) {
        let mx = lane_max(row);
        for v in row.iter_mut() {
            *v = (*v - mx).exp_fast();
        }
        let inv = F::one() / lane_sum(row);
        for v in row.iter_mut() {
            *v *= inv;
        }
    }
}

/// Geometry of a fused multi-head self-attention call.
#[derive(Clone, Copy, Debug)]
pub struct AttnDims {
    pub batch: usize,
    pub tokens: usize,
    pub dim: usize,
    pub heads: usize,
}

impl AttnDims {
    fn head_dim(&self) -> usize {
        self.dim / self.heads
    }

    fn scale<F: Float>(&self) -> F {
        F::cast(1.0 / (self.head_dim() as f64).sqrt())
    }
}

fn for_each_batch<F, T, G>(
    out: &mut [F],
    chunk: usize,
    extra: &mut [T],
    extra_chunk: usize,
    f: G,
) where
    F: Float,
    T: Send,
    G: Fn(usize, &mut [F], &mut [T]) + Sync + Send,
{
    let serial = crate::is_deterministic() || out.len() / chunk.max(1) < 2;
    if serial && extra.is_empty() {
        for (b, o) in out.chunks_mut(chunk).enumerate() {
            f(b, o, &mut []);
        }
    } else if serial {
        for (b, (o, e)) in out.chunks_mut(chunk).zip(extra.chunks_mut(extra_chunk)).enumerate() {
            f(b, o, e);
        }
    } else if extra.is_empty() {
        out.par_chunks_mut(chunk)
            .enumerate()
            .for_each(|(b, o)| f(b, o, &mut []));
    } else {
        out.par_chunks_mut(chunk)
            .zip(extra.par_chunks_mut(extra_chunk))
            .enumerate()
            .for_each(|(b, (o, e))| f(b, o, e));
    }
}

/// Scaled dot-product attention over `q, k, v: [batch, tokens, dim]`, heads
/// splitting `dim`. Returns the output and, if `keep_probs`, the attention
/// probabilities `[batch, heads, tokens, tokens]`.
pub fn attention_forward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    d: AttnDims,
    keep_probs: bool,
) -> (Vec<F>, Vec<F>) {
    let (t, dm, hd) = (d.tokens, d.dim, d.head_dim());
    let tt = t * t;
    let mut out = vec![F::zero(); d.batch * t * dm];
    let mut probs = if keep_probs { vec![F::zero(); d.batch * d.heads * tt] } else { Vec::new() };
    let scale = d.scale::<F>();
    let body = |b: usize, o: &mut [F], p_all: &mut [F]| {
        let base = b * t * dm;
        let mut scratch = if p_all.is_empty() { vec![F::zero(); tt] } else { Vec::new() };
        for h in 0..d.heads {
            let p: &mut [F] = if p_all.is_empty() {
                &mut scratch
            } else {
                &mut p_all[h * tt..(h + 1) * tt]
            };
            gemm(
                t,
                hd,
                t,
                scale,
                MatRef::rows(q, base + h * hd, dm),
                MatRef::transposed(k, base + h * hd, dm),
                F::zero(),
                p,
                0,
                t,
            );
            softmax_rows(p, t);
            gemm(
                t,
                t,
                hd,
                F::one(),
                MatRef::rows(p, 0, t),
                MatRef::rows(v, base + h * hd, dm),
                F::zero(),
                o,
                h * hd,
                dm,
            );
        }
    };
    for_each_batch(&mut out, t * dm, &mut probs, d.heads * tt, body);
    (out, probs)
}

/// Gradients of attention with respect to `q, k, v`.
pub fn attention_backward<F: Float>(
    q: &[F],
    k: &[F],
    v: &[F],
    probs: &[F],
    g: &[F],
    d: AttnDims,
) -> (Vec<F>, Vec<F>, Vec<F>) {
    let (t, dm, hd) = (d.tokens, d.dim, d.head_dim());
    let tt = t * t;
    let n = d.batch * t * dm;
    let scale = d.scale::<F>();
    // Packed per-batch [dq | dk | dv] so each batch writes one contiguous chunk.
    let mut packed = vec![F::zero(); 3 * n];
    let body = |b: usize, out: &mut [F], _: &mut [F]| {
        let base = b * t * dm;
        let (dq, rest) = out.split_at_mut(t * dm);
        let (dk, dv) = rest.split_at_mut(t * dm);
        let mut dp = vec![F::zero(); tt];
        for h in 0..d.heads {
            let p = &probs[(b * d.heads + h) * tt..(b * d.heads + h + 1) * tt];
            // dV = P^T dO
            gemm(
                t,
                t,
                hd,
                F::one(),
                MatRef::transposed(p, 0, t),
                MatRef::rows(g, base + h * hd, dm),
                F::zero(),
                dv,
                h * hd,
                dm,
            );
            // dP = dO V^T
            gemm(
                t,
                hd,
                t,
                F::one(),
                MatRef::rows(g, base + h * hd, dm),
                MatRef::transposed(v, base + h * hd, dm),
                F::zero(),
                &mut dp,
                0,
                t,
            );
            for (dp_row, p_row) in dp.chunks_mut(t).zip(p.chunks(t)) {
                let dot = lane_dot(dp_row, p_row);
                for (x, &pv) in dp_row.iter_mut().zip(p_row) {
                    *x = pv * (*x - dot) * scale;
                }
            }
            // dQ = dS K, dK = dS^T Q
            gemm(
                t,
                t,
                hd,
                F::one(),
                MatRef::rows(&dp, 0, t),
                MatRef::rows(k, base + h * hd, dm),
                F::zero(),
                dq,
                h * hd,
                dm,
            );
            gemm(
                t,
                t,
                hd,
                F::one(),
                MatRef::transposed(&dp, 0, t),
                MatRef::rows(q, base + h * hd, dm),
                F::zero(),
                dk,
                h * hd,
                dm,
            );
        }
    };
    for_each_batch(&mut packed, 3 * t * dm, &mut [], 0, body);
    let mut dq = Vec::with_capacity(n);
    let mut dk = Vec::with_capacity(n);
    let mut dv = Vec::with_capacity(n);
    for chunk in packed.chunks(3 * t * dm) {
        dq.extend_from_slice(&chunk[..t * dm]);
        dk.extend_from_slice(&chunk[t * dm..2 * t * dm]);
        dv.extend_from_slice(&chunk[2 * t * dm..]);
    }
    (dq, dk, dv)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fast_exp_is_close_to_libm() {
        let mut worst = 0.0f64;
        let mut x = -87.0f32;
        while x < 88.0 {
            let rel = ((expf(x) as f64) - (x as f64).exp()).abs() / (x as f64).exp();
            worst = worst.max(rel);
            x += 0.0137;
        }
        assert!(worst < 5e-7, "worst relative error {worst:e}");
        assert_eq!(expf(0.0), 1.0);
        assert_eq!(expf(-1e4), expf(-87.3));
    }

    #[test]
    fn gemm_matches_naive_with_transposed_operand() {
        let a: Vec<f64> = (0..6).map(|x| x as f64).collect(); // 2x3
        let b: Vec<f64> = (0..6).map(|x| (x * x) as f64).collect(); // stored 2x3, used as 3x2
        let mut c = vec![0.0; 4];
        gemm(2, 3, 2, 1.0, MatRef::rows(&a, 0, 3), MatRef::transposed(&b, 0, 3), 0.0, &mut c, 0, 2);
        let naive = |i: usize, j: usize| (0..3).map(|p| a[i * 3 + p] * b[j * 3 + p]).sum::<f64>();
        assert_eq!(c, vec![naive(0, 0), naive(0, 1), naive(1, 0), naive(1, 1)]);
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        let mut x = vec![0.0f64; 3];
        softmax_rows(&mut x, 3);
        for v in x {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn gelu_grad_matches_difference_quotient() {
        for &x in &[-3.0, -0.7, 0.0, 0.4, 2.5f64] {
            let h = 1e-6;
            let fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad(x)).abs() < 1e-8, "x={x}");
        }
    }
}

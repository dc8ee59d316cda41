//! Raw slice kernels behind the graph primitives.

use crate::scalar::Scalar;

use super::tensor::{NumericsError, Result};

/// `c[m,n] += a[m,k] * b[k,n]`, all row-major.
///
/// Four rows of `b` are folded in per pass over `c`, adding in ascending `k`
/// so results match the plain triple loop bit for bit.
pub fn matmul_acc<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 was detected at runtime.
        return unsafe { matmul_acc_avx2(a, b, c, m, k, n) };
    }
    matmul_acc_body(a, b, c, m, k, n)
}

/// Same loop compiled with wider vectors. Nothing is fused, so results do not
/// depend on which version runs.
#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_acc_avx2<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_acc_body(a, b, c, m, k, n)
}

#[inline(always)]
fn matmul_acc_body<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    if k == 0 || n == 0 {
        return;
    }
    for (arow, crow) in a.chunks_exact(k).zip(c.chunks_exact_mut(n)) {
        let mut kk = 0;
        while kk + 4 <= k {
            let (a0, a1, a2, a3) = (arow[kk], arow[kk + 1], arow[kk + 2], arow[kk + 3]);
            let b0 = &b[kk * n..(kk + 1) * n];
            let b1 = &b[(kk + 1) * n..(kk + 2) * n];
            let b2 = &b[(kk + 2) * n..(kk + 3) * n];
            let b3 = &b[(kk + 3) * n..(kk + 4) * n];
            for ((((cv, &x0), &x1), &x2), &x3) in crow.iter_mut().zip(b0).zip(b1).zip(b2).zip(b3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
            kk += 4;
        }
        for q in kk..k {
            let av = arow[q];
            for (cv, &bv) in crow.iter_mut().zip(&b[q * n..(q + 1) * n]) {
                *cv += av * bv;
            }
        }
    }
}

/// `c[k,n] += a[m,k]^T * g[m,n]`, folding four rows of `g` per pass in
/// ascending `m`.
pub fn matmul_tn_acc<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    #[cfg(target_arch = "x86_64")]
    if std::arch::is_x86_feature_detected!("avx2") {
        // SAFETY: avx2 was detected at runtime.
        return unsafe { matmul_tn_acc_avx2(a, g, c, m, k, n) };
    }
    matmul_tn_acc_body(a, g, c, m, k, n)
}

#[cfg(target_arch = "x86_64")]
#[target_feature(enable = "avx2")]
unsafe fn matmul_tn_acc_avx2<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    matmul_tn_acc_body(a, g, c, m, k, n)
}

#[inline(always)]
fn matmul_tn_acc_body<T: Scalar>(a: &[T], g: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    if k == 0 || n == 0 {
        return;
    }
    let mut mm = 0;
    while mm + 4 <= m {
        let (g0, g1, g2, g3) = (
            &g[mm * n..(mm + 1) * n],
            &g[(mm + 1) * n..(mm + 2) * n],
            &g[(mm + 2) * n..(mm + 3) * n],
            &g[(mm + 3) * n..(mm + 4) * n],
        );
        for (kk, crow) in c.chunks_exact_mut(n).enumerate().take(k) {
            let (a0, a1, a2, a3) = (a[mm * k + kk], a[(mm + 1) * k + kk], a[(mm + 2) * k + kk], a[(mm + 3) * k + kk]);
            for ((((cv, &x0), &x1), &x2), &x3) in crow.iter_mut().zip(g0).zip(g1).zip(g2).zip(g3) {
                *cv = *cv + a0 * x0 + a1 * x1 + a2 * x2 + a3 * x3;
            }
        }
        mm += 4;
    }
    for (arow, grow) in a.chunks_exact(k).zip(g.chunks_exact(n)).take(m).skip(mm) {
        for (&av, crow) in arow.iter().zip(c.chunks_exact_mut(n)) {
            for (cv, &gv) in crow.iter_mut().zip(grow) {
                *cv += av * gv;
            }
        }
    }
}

/// `c[m,k] += g[m,n] * b[k,n]^T`.
pub fn matmul_nt_acc<T: Scalar>(g: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    let bt = transpose(b, k, n);
    matmul_acc(g, &bt, c, m, n, k);
}

pub fn transpose<T: Scalar>(a: &[T], rows: usize, cols: usize) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = a[r * cols + c];
        }
    }
    out
}

/// Index plan for numpy-style broadcasting of two operands onto a common shape.
///
/// The output is walked as `outer` blocks of `block` contiguous elements; each
/// operand either advances with the block (`*_contig`) or repeats a single
/// element across it.
#[derive(Debug, Clone)]
pub struct BroadcastPlan {
    pub out_shape: Vec<usize>,
    pub block: usize,
    pub a_off: Vec<usize>,
    pub b_off: Vec<usize>,
    pub a_contig: bool,
    pub b_contig: bool,
}

impl BroadcastPlan {
    pub fn new(op: &'static str, a: &[usize], b: &[usize]) -> Result<Self> {
        let rank = a.len().max(b.len());
        let pad = |s: &[usize]| {
            let mut v = vec![1; rank - s.len()];
            v.extend_from_slice(s);
            v
        };
        let (pa, pb) = (pad(a), pad(b));
        let mut out = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x == y || y == 1 {
                out.push(x);
            } else if x == 1 {
                out.push(y);
            } else {
                return Err(NumericsError::ShapeMismatch {
                    op,
                    lhs: a.to_vec(),
                    rhs: b.to_vec(),
                });
            }
        }
        // Largest trailing run of axes where neither operand broadcasts.
        let mut split = rank;
        while split > 0 && pa[split - 1] == pb[split - 1] {
            split -= 1;
        }
        let mut block: usize = out[split..].iter().product();
        let (mut a_contig, mut b_contig) = (true, true);
        if block == 1 && split > 0 {
            // No shared trailing run: peel one axis into the block so that the
            // operand that is not broadcast there still advances contiguously.
            split -= 1;
            block = out[split];
            a_contig = pa[split] != 1 || out[split] == 1;
            b_contig = pb[split] != 1 || out[split] == 1;
        }
        let strides = |p: &[usize]| {
            let mut st = vec![0usize; rank];
            let mut acc = 1;
            for i in (0..rank).rev() {
                st[i] = if p[i] == 1 { 0 } else { acc };
                acc *= p[i];
            }
            st
        };
        let (sa, sb) = (strides(&pa), strides(&pb));
        let outer_dims = &out[..split];
        let outer: usize = outer_dims.iter().product();
        let mut a_off = Vec::with_capacity(outer);
        let mut b_off = Vec::with_capacity(outer);
        let mut idx = vec![0usize; split];
        for _ in 0..outer {
            let (mut oa, mut ob) = (0, 0);
            for d in 0..split {
                oa += idx[d] * sa[d];
                ob += idx[d] * sb[d];
            }
            a_off.push(oa);
            b_off.push(ob);
            for d in (0..split).rev() {
                idx[d] += 1;
                if idx[d] < outer_dims[d] {
                    break;
                }
                idx[d] = 0;
            }
        }
        Ok(Self {
            out_shape: out,
            block,
            a_off,
            b_off,
            a_contig,
            b_contig,
        })
    }

    pub fn numel(&self) -> usize {
        self.block * self.a_off.len()
    }

    pub fn apply<T: Scalar>(&self, a: &[T], b: &[T], f: impl Fn(T, T) -> T) -> Vec<T> {
        let mut out = Vec::with_capacity(self.numel());
        for (&oa, &ob) in self.a_off.iter().zip(&self.b_off) {
            match (self.a_contig, self.b_contig) {
                (true, true) => out.extend(
                    a[oa..oa + self.block]
                        .iter()
                        .zip(&b[ob..ob + self.block])
                        .map(|(&x, &y)| f(x, y)),
                ),
                (true, false) => {
                    let y = b[ob];
                    out.extend(a[oa..oa + self.block].iter().map(|&x| f(x, y)))
                }
                (false, true) => {
                    let x = a[oa];
                    out.extend(b[ob..ob + self.block].iter().map(|&y| f(x, y)))
                }
                (false, false) => {
                    let v = f(a[oa], b[ob]);
                    out.extend(std::iter::repeat_n(v, self.block))
                }
            }
        }
        out
    }

    /// Sums an output-shaped gradient back onto one operand's shape.
    pub fn reduce_into<T: Scalar>(&self, g: &[T], which_a: bool, dst: &mut [T]) {
        let (offs, contig) = if which_a {
            (&self.a_off, self.a_contig)
        } else {
            (&self.b_off, self.b_contig)
        };
        for (gb, &off) in g.chunks_exact(self.block).zip(offs) {
            if contig {
                for (d, &gv) in dst[off..off + self.block].iter_mut().zip(gb) {
                    *d += gv;
                }
            } else {
                let mut acc = T::zero();
                for &gv in gb {
                    acc += gv;
                }
                dst[off] += acc;
            }
        }
    }
}

/// Splits a shape around `axis` into `(outer, len, inner)`.
pub fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

pub fn softmax_rows<T: Scalar>(x: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    for row in x.chunks_exact(width) {
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum += e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v /= sum;
        }
    }
    out
}

/// Normalises each row to zero mean / unit variance; returns the output and
/// the per-row reciprocal standard deviation.
pub fn layer_norm_rows<T: Scalar>(x: &[T], width: usize, eps: T) -> (Vec<T>, Vec<T>) {
    let mut out = Vec::with_capacity(x.len());
    let mut rstd = Vec::with_capacity(x.len() / width.max(1));
    let n = T::of(width as f64);
    for row in x.chunks_exact(width) {
        let mean = row.iter().copied().sum::<T>() / n;
        let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let r = T::one() / (var + eps).sqrt();
        rstd.push(r);
        out.extend(row.iter().map(|&v| (v - mean) * r));
    }
    (out, rstd)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

pub fn gelu<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

pub fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of(GELU_C);
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let dinner = c * (T::one() + T::of(3.0) * k * x * x);
    half * (T::one() + t) + half * x * (T::one() - t * t) * dinner
}

pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Geometry of a multi-head attention call over batched token sequences.
#[derive(Debug, Clone, Copy)]
pub struct AttnDims {
    pub batch: usize,
    pub q_len: usize,
    pub k_len: usize,
    pub width: usize,
    pub heads: usize,
}

impl AttnDims {
    pub fn head_dim(&self) -> usize {
        self.width / self.heads
    }
}

/// Multi-head scaled dot-product attention with an optional boolean
/// allow-mask `[q_len, k_len]` shared across the batch. Disallowed keys get a
/// logit of `-inf` and therefore an exact zero weight.
///
/// Returns `(output, probs)` with probs laid out `[batch, heads, q_len, k_len]`.
pub fn attention_forward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    mask: Option<&[bool]>,
    d: AttnDims,
) -> Result<(Vec<T>, Vec<T>)> {
    let dh = d.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); d.batch * d.q_len * d.width];
    let mut probs = vec![T::zero(); d.batch * d.heads * d.q_len * d.k_len];
    let mut logits = vec![T::zero(); d.k_len];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for i in 0..d.q_len {
                let qi = &q[(b * d.q_len + i) * d.width + h * dh..][..dh];
                let mut max = T::neg_infinity();
                for (j, l) in logits.iter_mut().enumerate() {
                    let allowed = mask.is_none_or(|m| m[i * d.k_len + j]);
                    *l = if allowed {
                        let kj = &k[(b * d.k_len + j) * d.width + h * dh..][..dh];
                        let mut s = T::zero();
                        for (&x, &y) in qi.iter().zip(kj) {
                            s += x * y;
                        }
                        s * scale
                    } else {
                        T::neg_infinity()
                    };
                    max = max.max(*l);
                }
                if max == T::neg_infinity() {
                    return Err(NumericsError::EmptyMaskRow { row: i });
                }
                let prow = &mut probs[((b * d.heads + h) * d.q_len + i) * d.k_len..][..d.k_len];
                let mut sum = T::zero();
                for (p, &l) in prow.iter_mut().zip(&logits) {
                    *p = (l - max).exp();
                    sum += *p;
                }
                for p in prow.iter_mut() {
                    *p /= sum;
                }
                let oi = &mut out[(b * d.q_len + i) * d.width + h * dh..][..dh];
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let vj = &v[(b * d.k_len + j) * d.width + h * dh..][..dh];
                    for (o, &x) in oi.iter_mut().zip(vj) {
                        *o += p * x;
                    }
                }
            }
        }
    }
    Ok((out, probs))
}

/// Vector-Jacobian product of [`attention_forward`]; returns `(dq, dk, dv)`.
#[allow(clippy::too_many_arguments)]
pub fn attention_backward<T: Scalar>(
    q: &[T],
    k: &[T],
    v: &[T],
    probs: &[T],
    grad: &[T],
    d: AttnDims,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let dh = d.head_dim();
    let scale = T::one() / T::of(dh as f64).sqrt();
    let mut dq = vec![T::zero(); q.len()];
    let mut dk = vec![T::zero(); k.len()];
    let mut dv = vec![T::zero(); v.len()];
    let mut dp = vec![T::zero(); d.k_len];
    for b in 0..d.batch {
        for h in 0..d.heads {
            for i in 0..d.q_len {
                let prow = &probs[((b * d.heads + h) * d.q_len + i) * d.k_len..][..d.k_len];
                let go = &grad[(b * d.q_len + i) * d.width + h * dh..][..dh];
                let mut dot = T::zero();
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        dp[j] = T::zero();
                        continue;
                    }
                    let base = (b * d.k_len + j) * d.width + h * dh;
                    let vj = &v[base..base + dh];
                    let mut s = T::zero();
                    for (&g, &x) in go.iter().zip(vj) {
                        s += g * x;
                    }
                    dp[j] = s;
                    dot += p * s;
                    for (dvv, &g) in dv[base..base + dh].iter_mut().zip(go) {
                        *dvv += p * g;
                    }
                }
                let qbase = (b * d.q_len + i) * d.width + h * dh;
                for (j, &p) in prow.iter().enumerate() {
                    if p == T::zero() {
                        continue;
                    }
                    let ds = p * (dp[j] - dot) * scale;
                    let base = (b * d.k_len + j) * d.width + h * dh;
                    for t in 0..dh {
                        dq[qbase + t] += ds * k[base + t];
                        dk[base + t] += ds * q[qbase + t];
                    }
                }
            }
        }
    }
    (dq, dk, dv)
}

/// Geometry of an NHWC patch extraction (im2col).
#[derive(Debug, Clone, Copy)]
pub struct PatchDims {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl PatchDims {
    pub fn out_hw(&self) -> (usize, usize) {
        let oh = (self.height + 2 * self.pad - self.kernel) / self.stride + 1;
        let ow = (self.width + 2 * self.pad - self.kernel) / self.stride + 1;
        (oh, ow)
    }

    pub fn patch_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    /// Calls `f(dst_index, src_index)` for every in-bounds patch element.
    pub fn for_each(&self, mut f: impl FnMut(usize, usize)) {
        let (oh, ow) = self.out_hw();
        let pl = self.patch_len();
        for b in 0..self.batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    let row = ((b * oh + oy) * ow + ox) * pl;
                    for ky in 0..self.kernel {
                        let y = (oy * self.stride + ky) as isize - self.pad as isize;
                        if y < 0 || y >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let x = (ox * self.stride + kx) as isize - self.pad as isize;
                            if x < 0 || x >= self.width as isize {
                                continue;
                            }
                            let src =
                                ((b * self.height + y as usize) * self.width + x as usize) * self.channels;
                            let dst = row + (ky * self.kernel + kx) * self.channels;
                            for c in 0..self.channels {
                                f(dst + c, src + c);
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_plan_handles_middle_axis() {
        let plan = BroadcastPlan::new("add", &[2, 3, 4], &[2, 1, 4]).unwrap();
        assert_eq!(plan.out_shape, vec![2, 3, 4]);
        let a: Vec<f64> = (0..24).map(|v| v as f64).collect();
        let b: Vec<f64> = (0..8).map(|v| 100.0 * v as f64).collect();
        let out = plan.apply(&a, &b, |x, y| x + y);
        assert_eq!(out[5], 5.0 + 100.0);
        assert_eq!(out[12 + 6], 18.0 + 600.0);
    }

    #[test]
    fn broadcast_plan_handles_trailing_singleton() {
        let plan = BroadcastPlan::new("mul", &[2, 3], &[2, 1]).unwrap();
        let out = plan.apply(&[1.0f64, 2., 3., 4., 5., 6.], &[10.0, 100.0], |x, y| x * y);
        assert_eq!(out, vec![10., 20., 30., 400., 500., 600.]);
    }

    #[test]
    fn broadcast_rejects_incompatible() {
        assert!(BroadcastPlan::new("add", &[2, 3], &[4]).is_err());
    }

    #[test]
    fn matmul_variants_agree() {
        let a = [1.0f64, 2., 3., 4., 5., 6.]; // 2x3
        let b = [1.0f64, 0., 0., 1., 1., 1.]; // 3x2
        let mut c = vec![0.0; 4];
        matmul_acc(&a, &b, &mut c, 2, 3, 2);
        assert_eq!(c, vec![4., 5., 10., 11.]);
        let mut bt = vec![0.0; 6];
        matmul_tn_acc(&a, &c, &mut bt, 2, 3, 2);
        assert_eq!(bt, vec![44., 49., 58., 65., 72., 81.]);
    }
}

//! Row-major matrix kernels over raw slices.
//!
//! Every kernel accumulates each output element in a fixed order, so results
//! do not depend on how callers split work.

use super::Real;

/// Defines a kernel twice, once compiled with AVX2 enabled, and picks one at
/// run time. Both copies perform the same scalar operations in the same
/// order (no fused multiply-add), so their results are bit-identical.
macro_rules! kernel {
    ($(#[$m:meta])* $vis:vis fn $name:ident<T: Real>($($arg:ident: $ty:ty),* $(,)?) $(-> $ret:ty)? $body:block) => {
        $(#[$m])*
        $vis fn $name<T: Real>($($arg: $ty),*) $(-> $ret)? {
            #[inline(always)]
            fn imp<T: Real>($($arg: $ty),*) $(-> $ret)? $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                unsafe fn fast<T: Real>($($arg: $ty),*) $(-> $ret)? {
                    imp($($arg),*)
                }
                if std::is_x86_feature_detected!("avx2") {
                    // SAFETY: the CPU supports AVX2.
                    return unsafe { fast($($arg),*) };
                }
            }
            imp($($arg),*)
        }
    };
}
pub(crate) use kernel;

kernel! {
/// `c[m×n] = a[m×k] · b[k×n]`.
pub fn matmul<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    c.iter_mut().for_each(|v| *v = T::zero());
    if n == 0 {
        return;
    }
    for (a_row, c_row) in a.chunks_exact(k.max(1)).zip(c.chunks_exact_mut(n)) {
        if k == 0 {
            break;
        }
        for (p, &aip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}
}

kernel! {
/// `c[k×n] = aᵀ · b` with `a[m×k]`, `b[m×n]`; used for weight gradients.
pub fn matmul_tn<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    c.iter_mut().for_each(|v| *v = T::zero());
    if n == 0 || k == 0 {
        return;
    }
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (p, &aip) in a_row.iter().enumerate() {
            let c_row = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv += aip * bv;
            }
        }
    }
}
}

kernel! {
/// `c[m×n] = a · bᵀ` with `a[m×k]`, `b[n×k]`.
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    let mut bt = vec![T::zero(); k * n];
    for (j, row) in b.chunks_exact(k.max(1)).enumerate().take(n) {
        for (p, &v) in row.iter().enumerate() {
            bt[p * n + j] = v;
        }
    }
    matmul(a, &bt, c, m, k, n);
}
}

/// Dot product with eight independent partial sums.
#[inline(always)]
pub fn dot<T: Real>(x: &[T], y: &[T]) -> T {
    debug_assert_eq!(x.len(), y.len());
    let mut acc = [T::zero(); 8];
    let xc = x.chunks_exact(8);
    let yc = y.chunks_exact(8);
    let (xr, yr) = (xc.remainder(), yc.remainder());
    for (a, b) in xc.zip(yc) {
        for l in 0..8 {
            acc[l] += a[l] * b[l];
        }
    }
    let mut tail = T::zero();
    for (a, b) in xr.iter().zip(yr) {
        tail += *a * *b;
    }
    ((acc[0] + acc[4]) + (acc[1] + acc[5])) + ((acc[2] + acc[6]) + (acc[3] + acc[7])) + tail
}

kernel! {
/// `y[m×n] += bias[n]` broadcast over rows.
pub fn add_bias<T: Real>(y: &mut [T], bias: &[T]) {
    let n = bias.len();
    if n == 0 {
        return;
    }
    for row in y.chunks_exact_mut(n) {
        for (v, &b) in row.iter_mut().zip(bias) {
            *v += b;
        }
    }
}
}

kernel! {
/// Row-wise layer normalization; optionally keeps the normalized rows and
/// reciprocal standard deviations for the backward pass.
pub fn layer_norm<T: Real>(
    x: &[T],
    gamma: &[T],
    beta: &[T],
    eps: T,
    cache: Option<(&mut [T], &mut [T])>,
) -> Vec<T> {
    let mut cache = cache;
    let cols = gamma.len();
    let n = T::of(cols as f64);
    let mut out = vec![T::zero(); x.len()];
    for (r, (xr, or)) in x.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
        let mean = xr.iter().copied().sum::<T>() / n;
        let var = xr.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
        let s = T::one() / (var + eps).sqrt();
        for j in 0..cols {
            let h = (xr[j] - mean) * s;
            or[j] = h * gamma[j] + beta[j];
            if let Some((xhat, _)) = cache.as_mut() {
                xhat[r * cols + j] = h;
            }
        }
        if let Some((_, rstd)) = cache.as_mut() {
            rstd[r] = s;
        }
    }
    out
}
}

kernel! {
/// Multi-head scaled dot-product attention over packed `(start, len)`
/// segments of `[rows × dim]` matrices. Invalid keys get zero weight; a query
/// without any valid key yields zeros. `probs` receives the attention weights
/// segment by segment, head by head.
#[allow(clippy::too_many_arguments)]
pub fn attention<T: Real>(
    q: &[T],
    k: &[T],
    v: &[T],
    dim: usize,
    heads: usize,
    segments: &[(usize, usize)],
    key_valid: &[bool],
    probs: Option<&mut Vec<T>>,
) -> Vec<T> {
    let mut probs = probs;
    let dh = dim / heads;
    let inv = T::one() / T::of(dh as f64).sqrt();
    let mut out = vec![T::zero(); q.len()];
    let mut p = Vec::new();
    if let Some(pr) = probs.as_mut() {
        pr.clear();
        pr.reserve(segments.iter().map(|&(_, l)| l * l).sum::<usize>() * heads);
    }
    for &(start, len) in segments {
        p.resize(len, T::zero());
        for h in 0..heads {
            let c0 = h * dh;
            for i in 0..len {
                let qi = &q[(start + i) * dim + c0..(start + i) * dim + c0 + dh];
                let mut any = false;
                for j in 0..len {
                    if key_valid[start + j] {
                        let kj = &k[(start + j) * dim + c0..(start + j) * dim + c0 + dh];
                        p[j] = dot(qi, kj) * inv;
                        any = true;
                    } else {
                        p[j] = T::neg_infinity();
                    }
                }
                if any {
                    super::softmax_in_place(&mut p);
                    let o = &mut out[(start + i) * dim + c0..(start + i) * dim + c0 + dh];
                    for (j, &w) in p.iter().enumerate() {
                        if w == T::zero() {
                            continue;
                        }
                        let vj = &v[(start + j) * dim + c0..(start + j) * dim + c0 + dh];
                        for (ov, &vv) in o.iter_mut().zip(vj) {
                            *ov += w * vv;
                        }
                    }
                } else {
                    p.iter_mut().for_each(|x| *x = T::zero());
                }
                if let Some(pr) = probs.as_mut() {
                    pr.extend_from_slice(&p);
                }
            }
        }
    }
    out
}
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
        let mut c = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    c[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        c
    }

    fn transpose(a: &[f64], r: usize, c: usize) -> Vec<f64> {
        let mut t = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                t[j * r + i] = a[i * c + j];
            }
        }
        t
    }

    #[test]
    fn kernels_agree_with_naive_product() {
        let (m, k, n) = (5, 11, 7);
        let a: Vec<f64> = (0..m * k).map(|i| ((i * 37 % 17) as f64) - 8.0).collect();
        let b: Vec<f64> = (0..k * n).map(|i| ((i * 13 % 11) as f64) - 5.0).collect();
        let want = naive(&a, &b, m, k, n);

        let mut c = vec![0.0; m * n];
        matmul(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);

        let at = transpose(&a, m, k);
        let mut c = vec![0.0; m * n];
        matmul_tn(&at, &b, &mut c, k, m, n);
        assert_eq!(c, want);

        let bt = transpose(&b, k, n);
        let mut c = vec![0.0; m * n];
        matmul_nt(&a, &bt, &mut c, m, k, n);
        assert_eq!(c, want);
    }

    #[test]
    fn vector_paths_are_bit_exact() {
        let (m, k, n) = (9, 67, 37);
        let a: Vec<f32> = (0..m * k).map(|i| ((i * 7919 % 1000) as f32 / 997.0).sin()).collect();
        let b: Vec<f32> = (0..k * n).map(|i| ((i * 104729 % 1000) as f32 / 991.0).cos()).collect();
        let mut want = vec![0f32; m * n];
        for i in 0..m {
            for j in 0..n {
                for p in 0..k {
                    want[i * n + j] += a[i * k + p] * b[p * n + j];
                }
            }
        }
        let mut c = vec![0f32; m * n];
        matmul(&a, &b, &mut c, m, k, n);
        assert_eq!(c, want);
        let mut bt = vec![0f32; k * n];
        for p in 0..k {
            for j in 0..n {
                bt[j * k + p] = b[p * n + j];
            }
        }
        matmul_nt(&a, &bt, &mut c, m, k, n);
        assert_eq!(c, want);
        let mut at = vec![0f32; m * k];
        for i in 0..m {
            for p in 0..k {
                at[p * m + i] = a[i * k + p];
            }
        }
        matmul_tn(&at, &b, &mut c, k, m, n);
        assert_eq!(c, want);
    }
}

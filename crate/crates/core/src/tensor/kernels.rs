//! Plain loop kernels shared by forward and backward passes.

use super::Scalar;

/// `out[m×n] += a[m×k] · b[k×n]`
pub(crate) fn gemm_nn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check(a, b, out, m, k, n);
    T::gemm_acc(m, k, n, a, [k, 1], b, [n, 1], out, [n, 1]);
}

/// `out[m×n] += a[m×k] · b[n×k]ᵀ`
pub(crate) fn gemm_nt<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check(a, b, out, m, k, n);
    T::gemm_acc(m, k, n, a, [k, 1], b, [1, k], out, [n, 1]);
}

/// `out[k×n] += a[m×k]ᵀ · b[m×n]`
pub(crate) fn gemm_tn<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    check(a, b, out, k, m, n);
    T::gemm_acc(k, m, n, a, [1, k], b, [n, 1], out, [n, 1]);
}

fn check<T>(a: &[T], b: &[T], out: &[T], m: usize, k: usize, n: usize) {
    assert!(a.len() >= m * k && b.len() >= k * n && out.len() >= m * n, "gemm operand too short");
}

#[inline]
pub(crate) fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    // four lanes keep the reduction order fixed and let the compiler vectorize
    let mut acc = [T::zero(); 4];
    let chunks = a.len() / 4;
    for c in 0..chunks {
        for l in 0..4 {
            acc[l] += a[c * 4 + l] * b[c * 4 + l];
        }
    }
    let mut s = (acc[0] + acc[1]) + (acc[2] + acc[3]);
    for i in chunks * 4..a.len() {
        s += a[i] * b[i];
    }
    s
}

#[inline]
pub(crate) fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += alpha * xv;
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nt_and_tn_agree_with_explicit_transpose() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 - 2.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64) * 0.5).collect(); // 4×3
        let mut bt = vec![0.0; 12];
        for i in 0..4 {
            for j in 0..3 {
                bt[j * 4 + i] = b[i * 3 + j];
            }
        }
        let mut ref_out = vec![0.0; 8];
        gemm_nn(&a, &bt, &mut ref_out, 2, 3, 4);
        let mut out = vec![0.0; 8];
        gemm_nt(&a, &b, &mut out, 2, 3, 4);
        assert_eq!(out, ref_out);

        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let c: Vec<f64> = (0..8).map(|v| v as f64).collect(); // 2×4
        let mut r1 = vec![0.0; 12];
        gemm_nn(&at, &c, &mut r1, 3, 2, 4);
        let mut r2 = vec![0.0; 12];
        gemm_tn(&a, &c, &mut r2, 2, 3, 4);
        assert_eq!(r1, r2);
    }
}

//! Dense row-major kernels. Matrix products go through `matrixmultiply`
//! single-threaded, so results are bitwise reproducible on a given machine.

use alloc::vec;
use alloc::vec::Vec;

use crate::Real;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    check(m, k, n, a, b, c);
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (n as isize, 1), c);
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    check(m, k, n, a, b, c);
    T::gemm_acc(m, k, n, a, (k as isize, 1), b, (1, k as isize), c);
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Real>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &mut [T]) {
    check(m, k, n, a, b, c);
    T::gemm_acc(m, k, n, a, (1, m as isize), b, (n as isize, 1), c);
}

fn check<T>(m: usize, k: usize, n: usize, a: &[T], b: &[T], c: &[T]) {
    assert!(
        a.len() == m * k && b.len() == k * n && c.len() == m * n,
        "gemm operand sizes"
    );
}

/// Transpose of a row-major `rows×cols` matrix.
pub fn transpose<T: Real>(rows: usize, cols: usize, x: &[T]) -> Vec<T> {
    let mut out = vec![T::zero(); rows * cols];
    for (i, row) in x.chunks_exact(cols).enumerate() {
        for (j, &v) in row.iter().enumerate() {
            out[j * rows + i] = v;
        }
    }
    out
}

/// Strides of a row-major array.
pub fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

/// Axis permutation: output axis `i` is input axis `perm[i]`.
pub fn permute<T: Real>(shape: &[usize], perm: &[usize], x: &[T]) -> Vec<T> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    // Input stride followed when stepping along each output axis.
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(x.len());
    if x.is_empty() {
        return out;
    }
    let mut idx = vec![0usize; rank];
    let mut src = 0usize;
    loop {
        out.push(x[src]);
        let mut axis = rank;
        loop {
            if axis == 0 {
                return out;
            }
            axis -= 1;
            idx[axis] += 1;
            src += step[axis];
            if idx[axis] < out_shape[axis] {
                break;
            }
            src -= step[axis] * out_shape[axis];
            idx[axis] = 0;
        }
    }
}

/// Inverse of a permutation.
pub fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Tanh-approximation GELU constants: `sqrt(2/pi)` and the cubic coefficient.
pub const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
pub const GELU_CUBIC: f64 = 0.044_715;

#[inline]
pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

#[inline]
pub fn gelu_grad<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let th = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + th) + half * x * (T::one() - th * th) * c * (T::one() + three * a * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn naive(m: usize, k: usize, n: usize, a: &[f64], b: &[f64]) -> Vec<f64> {
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

    #[test]
    fn gemm_variants_agree() {
        let (m, k, n) = (3, 5, 4);
        let a: Vec<f64> = (0..m * k).map(|i| (i as f64 * 0.37).sin()).collect();
        let b: Vec<f64> = (0..k * n).map(|i| (i as f64 * 0.71).cos()).collect();
        let want = naive(m, k, n, &a, &b);

        let mut c = vec![0.0; m * n];
        gemm_nn(m, k, n, &a, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let bt = transpose(k, n, &b);
        let mut c = vec![0.0; m * n];
        gemm_nt(m, k, n, &a, &bt, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }

        let at = transpose(m, k, &a);
        let mut c = vec![0.0; m * n];
        gemm_tn(m, k, n, &at, &b, &mut c);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn permute_round_trips() {
        let shape = [2, 3, 4, 5];
        let x: Vec<f64> = (0..120).map(|i| i as f64).collect();
        let perm = [0, 2, 1, 3];
        let y = permute(&shape, &perm, &x);
        // y[b][h][s][d] = x[b][s][h][d]
        assert_eq!(y[60 + 2 * 15 + 5 + 3], x[60 + 20 + 2 * 5 + 3]);
        let y_shape = [2, 4, 3, 5];
        let back = permute(&y_shape, &inverse_perm(&perm), &y);
        assert_eq!(back, x);
    }
}

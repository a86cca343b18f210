use core::fmt::{Debug, Display};
use core::iter::Sum;
use core::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::Float;

/// Floating-point element type of the tensor engine.
///
/// Training runs in `f32`; gradient checks run the same code in `f64`.
pub trait Real:
    Float + Default + Debug + Display + Send + Sync + 'static + AddAssign + SubAssign + MulAssign + DivAssign + Sum
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;

    /// `c += a·b` for an `m×k` by `k×n` product with element strides
    /// `(row, col)` for `a` and `b`; `c` is dense row-major `m×n`.
    ///
    /// Callers guarantee that every strided index lies inside its slice.
    #[doc(hidden)]
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
    );
}

impl Real for f32 {
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
    ) {
        assert!(c.len() >= m * n && span(m, k, sa) <= a.len() && span(k, n, sb) <= b.len());
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: the assertion keeps every strided access in bounds.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn gemm_acc(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        sa: (isize, isize),
        b: &[Self],
        sb: (isize, isize),
        c: &mut [Self],
    ) {
        assert!(c.len() >= m * n && span(m, k, sa) <= a.len() && span(k, n, sb) <= b.len());
        if m == 0 || n == 0 {
            return;
        }
        // SAFETY: the assertion keeps every strided access in bounds.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                1.0,
                a.as_ptr(),
                sa.0,
                sa.1,
                b.as_ptr(),
                sb.0,
                sb.1,
                1.0,
                c.as_mut_ptr(),
                n as isize,
                1,
            );
        }
    }

    #[inline]
    fn from_f64(x: f64) -> Self {
        x
    }
    #[inline]
    fn to_f64(self) -> f64 {
        self
    }
}

/// One past the largest offset touched by a `rows×cols` strided view.
fn span(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    (rows - 1) * rs as usize + (cols - 1) * cs as usize + 1
}

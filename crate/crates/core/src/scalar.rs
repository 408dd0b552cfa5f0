//! Floating-point element types the engine can run on.
//!
//! Training runs in `f32`; gradient verification runs in `f64`. Everything
//! numeric in the crate is generic over [`Scalar`], which adds a dense
//! matrix-multiply kernel on top of `num_traits::Float`.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// A strided, read-only matrix operand for [`Scalar::gemm`].
#[derive(Clone, Copy, Debug)]
pub struct MatRef<'a, T> {
    pub data: &'a [T],
    pub row_stride: usize,
    pub col_stride: usize,
}

impl<'a, T> MatRef<'a, T> {
    /// Row-major view of a dense matrix with `cols` columns.
    pub fn row_major(data: &'a [T], cols: usize) -> Self {
        MatRef { data, row_stride: cols, col_stride: 1 }
    }

    /// Transposed view of a dense row-major matrix with `cols` columns.
    pub fn transposed(data: &'a [T], cols: usize) -> Self {
        MatRef { data, row_stride: 1, col_stride: cols }
    }

    fn fits(&self, rows: usize, cols: usize) -> bool {
        if rows == 0 || cols == 0 {
            return true;
        }
        (rows - 1) * self.row_stride + (cols - 1) * self.col_stride < self.data.len()
    }
}

/// Element type of tensors and models.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + 'static
{
    const NAME: &'static str;

    /// Raw kernel: `c = alpha * a(m×k) · b(k×n) + beta * c(m×n)`.
    ///
    /// Callers go through [`gemm`], which validates the operand extents.
    #[doc(hidden)]
    #[allow(clippy::too_many_arguments)]
    fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: MatRef<'_, Self>,
        b: MatRef<'_, Self>,
        beta: Self,
        c: &mut [Self],
        c_row_stride: usize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite f64 converts to every scalar type")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

impl Scalar for f32 {
    const NAME: &'static str = "f32";

    fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: f32,
        a: MatRef<'_, f32>,
        b: MatRef<'_, f32>,
        beta: f32,
        c: &mut [f32],
        c_row_stride: usize,
    ) {
        // SAFETY: `gemm` checked that every index reached through the strides
        // lies inside the borrowed slices, and `c` is uniquely borrowed.
        unsafe {
            matrixmultiply::sgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                c_row_stride as isize,
                1,
            )
        }
    }
}

impl Scalar for f64 {
    const NAME: &'static str = "f64";

    fn gemm_kernel(
        m: usize,
        k: usize,
        n: usize,
        alpha: f64,
        a: MatRef<'_, f64>,
        b: MatRef<'_, f64>,
        beta: f64,
        c: &mut [f64],
        c_row_stride: usize,
    ) {
        // SAFETY: see the f32 implementation.
        unsafe {
            matrixmultiply::dgemm(
                m,
                k,
                n,
                alpha,
                a.data.as_ptr(),
                a.row_stride as isize,
                a.col_stride as isize,
                b.data.as_ptr(),
                b.row_stride as isize,
                b.col_stride as isize,
                beta,
                c.as_mut_ptr(),
                c_row_stride as isize,
                1,
            )
        }
    }
}

/// `c = alpha * a · b + beta * c` where `c` is row-major with row stride
/// `c_row_stride`.
///
/// Panics if a strided operand would read or write outside its slice.
#[allow(clippy::too_many_arguments)]
pub fn gemm<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    alpha: T,
    a: MatRef<'_, T>,
    b: MatRef<'_, T>,
    beta: T,
    c: &mut [T],
    c_row_stride: usize,
) {
    if m == 0 || n == 0 {
        return;
    }
    assert!(m == 1 || c_row_stride >= n, "gemm: output rows overlap");
    assert!((m - 1) * c_row_stride + n <= c.len(), "gemm: output out of bounds");
    if k == 0 {
        for i in 0..m {
            for v in &mut c[i * c_row_stride..i * c_row_stride + n] {
                *v = if beta == T::zero() { T::zero() } else { *v * beta };
            }
        }
        return;
    }
    assert!(a.fits(m, k), "gemm: left operand out of bounds");
    assert!(b.fits(k, n), "gemm: right operand out of bounds");
    T::gemm_kernel(m, k, n, alpha, a, b, beta, c, c_row_stride);
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
    fn gemm_matches_naive_product() {
        let a: Vec<f64> = (0..12).map(|v| v as f64 * 0.5 - 2.0).collect();
        let b: Vec<f64> = (0..20).map(|v| (v as f64).sin()).collect();
        let mut c = vec![0.0; 15];
        gemm(3, 4, 5, 1.0, MatRef::row_major(&a, 4), MatRef::row_major(&b, 5), 0.0, &mut c, 5);
        let want = naive(3, 4, 5, &a, &b);
        for (x, y) in c.iter().zip(&want) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn gemm_transposed_operand() {
        // a (2×3) · bᵀ where b is stored 4×3
        let a = [1.0, 2.0, 3.0, 4.0, 5.0, 6.0];
        let b: Vec<f64> = (0..12).map(|v| v as f64).collect();
        let mut c = vec![0.0; 8];
        gemm(2, 3, 4, 1.0, MatRef::row_major(&a, 3), MatRef::transposed(&b, 3), 0.0, &mut c, 4);
        assert_eq!(c[0], 1.0 * 0.0 + 2.0 * 1.0 + 3.0 * 2.0);
        assert_eq!(c[7], 4.0 * 9.0 + 5.0 * 10.0 + 6.0 * 11.0);
    }

    #[test]
    fn gemm_empty_inner_dimension_scales_output() {
        let mut c = vec![3.0f32; 4];
        gemm(2, 0, 2, 1.0, MatRef::row_major(&[], 0), MatRef::row_major(&[], 2), 0.0, &mut c, 2);
        assert_eq!(c, vec![0.0; 4]);
    }
}

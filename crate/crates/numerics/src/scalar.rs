//! Floating-point element types the engine can run on.

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Element type of a [`Tensor`](crate::Tensor).
///
/// Implemented for `f32` (training) and `f64` (gradient checks). The GEMM
/// kernel is dispatched per type so matrix products stay on the optimized
/// path.
pub trait Float:
    num_traits::Float + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// Short dtype tag written into checkpoints.
    const DTYPE: &'static str;

    fn cast_from(value: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a·b + beta·c` for row/column strided operands.
    ///
    /// `a` is `m×k`, `b` is `k×n`, `c` is `m×n` and always row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
    );
}

macro_rules! impl_float {
    ($ty:ty, $tag:literal, $kernel:path) => {
        impl Float for $ty {
            const DTYPE: &'static str = $tag;

            #[inline]
            fn cast_from(value: f64) -> Self {
                value as $ty
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(c.len() >= m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    for v in c[..m * n].iter_mut() {
                        *v = *v * beta;
                    }
                    return;
                }
                assert!(max_offset(m, k, a_strides) < a.len());
                assert!(max_offset(k, n, b_strides) < b.len());
                // SAFETY: the asserts above keep every strided access of the
                // three operands inside their slices.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

fn max_offset(rows: usize, cols: usize, strides: (usize, usize)) -> usize {
    (rows - 1) * strides.0 + (cols - 1) * strides.1
}

impl_float!(f32, "f32", matrixmultiply::sgemm);
impl_float!(f64, "f64", matrixmultiply::dgemm);

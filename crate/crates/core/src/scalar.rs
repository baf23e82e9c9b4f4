//! Scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, NumAssign, ToPrimitive};

/// Real scalar carried by tensors: `f32` or `f64`.
///
/// Training paths use `f64`; the finite-difference checks need the extra
/// precision. `f32` is supported for inference and for experiments where the
/// memory footprint matters.
pub trait Scalar: Float + FromPrimitive + ToPrimitive + NumAssign + Sum + Debug + Display + Default + Send + Sync + 'static {
    /// Lossy conversion from `f64`. Never fails for finite inputs.
    #[inline]
    fn of(v: f64) -> Self {
        <Self as FromPrimitive>::from_f64(v).expect("f64 converts to every Scalar")
    }

    #[inline]
    fn as_f64(self) -> f64 {
        self.to_f64().expect("Scalar converts to f64")
    }

    /// `C ← α·A·B + β·C` for an `m×k` by `k×n` product, with row and column
    /// strides given in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>);
}

/// Read-only strided matrix view: `(data, row stride, column stride)`.
pub type Mat<'a, S> = (&'a [S], usize, usize);
/// Mutable strided matrix view.
pub type MatMut<'a, S> = (&'a mut [S], usize, usize);

fn check_view(len: usize, rows: usize, cols: usize, rs: usize, cs: usize) {
    if rows > 0 && cols > 0 {
        assert!((rows - 1) * rs + (cols - 1) * cs < len, "strided view exceeds its buffer");
    }
}

macro_rules! impl_scalar {
    ($t:ty, $gemm:path) => {
        impl Scalar for $t {
            fn gemm(m: usize, k: usize, n: usize, alpha: Self, a: Mat<'_, Self>, b: Mat<'_, Self>, beta: Self, c: MatMut<'_, Self>) {
                if m == 0 || n == 0 {
                    return;
                }
                check_view(a.0.len(), m, k, a.1, a.2);
                check_view(b.0.len(), k, n, b.1, b.2);
                check_view(c.0.len(), m, n, c.1, c.2);
                // SAFETY: every index the kernel touches lies inside the checked views.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.0.as_ptr(),
                        a.1 as isize,
                        a.2 as isize,
                        b.0.as_ptr(),
                        b.1 as isize,
                        b.2 as isize,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1 as isize,
                        c.2 as isize,
                    )
                }
            }
        }
    };
}

impl_scalar!(f32, matrixmultiply::sgemm);
impl_scalar!(f64, matrixmultiply::dgemm);

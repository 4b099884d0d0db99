//! Scalar abstraction over `f32` and `f64`.
//!
//! The network and losses are generic over [`Real`] so the same code runs
//! a fast `f32` path for training and an `f64` path for high-precision
//! gradient verification.  Schedule coefficients are always computed in
//! `f64` and converted at the edge via [`Real::from_f64`].

use std::fmt::{Debug, Display};
use std::iter::Sum;

/// Floating-point scalar usable throughout the network and losses.
pub trait Real:
    num_traits::Float + num_traits::NumAssignOps + Sum + Send + Sync + Debug + Display + 'static
{
    /// Convert from `f64`, rounding to the nearest representable value.
    fn from_f64(v: f64) -> Self;

    /// Widen to `f64` exactly (both supported types embed in `f64`).
    fn to_f64(self) -> f64;

    /// Strided matrix multiply-accumulate `C = alpha*A*B + beta*C`.
    ///
    /// `A` is `m x k`, `B` is `k x n`, `C` is `m x n`; `rs`/`cs` are the
    /// row/column strides of each operand, so transposed access is a
    /// matter of swapping a stride pair.  Slices must cover the largest
    /// strided index.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        beta: Self,
        c: &mut [Self],
        rsc: isize,
        csc: isize,
    );
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// Smallest slice length that a strided `rows x cols` view can touch.
fn strided_len(rows: usize, cols: usize, rs: isize, cs: isize) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    let last = (rows as isize - 1) * rs + (cols as isize - 1) * cs;
    debug_assert!(last >= 0, "strides must address forward from the base");
    last as usize + 1
}

macro_rules! impl_real {
    ($ty:ty, $gemm:path) => {
        impl Real for $ty {
            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $ty
            }

            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                beta: Self,
                c: &mut [Self],
                rsc: isize,
                csc: isize,
            ) {
                assert!(a.len() >= strided_len(m, k, rsa, csa), "gemm: A too short");
                assert!(b.len() >= strided_len(k, n, rsb, csb), "gemm: B too short");
                assert!(c.len() >= strided_len(m, n, rsc, csc), "gemm: C too short");
                if m == 0 || k == 0 || n == 0 {
                    return;
                }
                // Bounds were checked against the largest strided index above.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        beta,
                        c.as_mut_ptr(),
                        rsc,
                        csc,
                    );
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

//! Scalar abstraction shared by every numeric kernel.
//!
//! All kernels are written against [`Scalar`], which is implemented for `f32`
//! and `f64`. Training runs in `f64`; inference may use either.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FloatConst, FromPrimitive, ToPrimitive};

/// Floating point element type for tensors and feature maps.
pub trait Scalar:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Debug
    + Display
    + Default
    + Send
    + Sync
    + 'static
{
    /// Short name used in diagnostics and checkpoint headers.
    const NAME: &'static str;

    /// Converts an `f64` literal. Never fails for finite input.
    fn lit(v: f64) -> Self;

    /// Lossless (for `f64`) widening used by checkpoints and geometry.
    fn as_f64(self) -> f64;

    /// General strided matrix product `c = alpha * a * b + beta * c`.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; each operand is addressed
    /// through explicit row/column strides so transposed and per-head views need
    /// no copies. Strides are in elements.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (usize, usize),
        b: &[Self],
        b_strides: (usize, usize),
        beta: Self,
        c: &mut [Self],
        c_strides: (usize, usize),
    );
}

fn check_extent(len: usize, rows: usize, cols: usize, strides: (usize, usize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) * strides.0 + (cols - 1) * strides.1;
    assert!(
        last < len,
        "gemm operand out of bounds: {rows}x{cols} with strides {strides:?} over {len} elements"
    );
}

macro_rules! impl_scalar {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Scalar for $t {
            const NAME: &'static str = $name;

            #[inline]
            fn lit(v: f64) -> Self {
                v as $t
            }

            #[inline]
            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_strides: (usize, usize),
                b: &[Self],
                b_strides: (usize, usize),
                beta: Self,
                c: &mut [Self],
                c_strides: (usize, usize),
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                check_extent(a.len(), m, k, a_strides);
                check_extent(b.len(), k, n, b_strides);
                check_extent(c.len(), m, n, c_strides);
                // SAFETY: every addressed element was bounds-checked above and
                // `c` is uniquely borrowed, so no operand aliases the output.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        a_strides.0 as isize,
                        a_strides.1 as isize,
                        b.as_ptr(),
                        b_strides.0 as isize,
                        b_strides.1 as isize,
                        beta,
                        c.as_mut_ptr(),
                        c_strides.0 as isize,
                        c_strides.1 as isize,
                    );
                }
            }
        }
    };
}

impl_scalar!(f32, "f32", matrixmultiply::sgemm);
impl_scalar!(f64, "f64", matrixmultiply::dgemm);

/// Row-major `c (m x n) += a (m x k) * b (k x n)`, with optional transposes
/// of the stored operands.
///
/// `a` is stored as `m x k` (or `k x m` when `trans_a`), likewise for `b`.
#[allow(clippy::too_many_arguments)]
pub fn matmul_acc<T: Scalar>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    trans_a: bool,
    b: &[T],
    trans_b: bool,
    c: &mut [T],
) {
    let a_strides = if trans_a { (1, m) } else { (k, 1) };
    let b_strides = if trans_b { (1, k) } else { (n, 1) };
    T::gemm(m, k, n, T::one(), a, a_strides, b, b_strides, T::one(), c, (n, 1));
}

/// Numerically stable `ln(sum(exp(x)))`.
pub fn log_sum_exp<T: Scalar>(xs: impl Iterator<Item = T> + Clone) -> T {
    let max = xs.clone().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    let sum: T = xs.map(|x| (x - max).exp()).sum();
    max + sum.ln()
}

//! Scalar abstraction shared by every numerical module.
//!
//! All of the math in this crate is written once against [`Real`] and
//! instantiated for `f32` (learned networks, checkpoints) and `f64` (the
//! analytic mixture backend and the finite-difference oracles in tests).

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FloatConst, FromPrimitive, NumAssign, ToPrimitive};

/// Floating point scalar usable throughout the crate.
pub trait Real:
    Float
    + FloatConst
    + FromPrimitive
    + ToPrimitive
    + NumAssign
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + 'static
{
    /// Short type name used in diagnostics.
    const NAME: &'static str;

    /// General matrix multiply `C <- alpha * A B + beta * C` with arbitrary
    /// (row, column) strides, `A` being `m x k` and `B` being `k x n`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
        c_strides: (isize, isize),
    );
}

fn max_offset(rows: usize, cols: usize, (rs, cs): (isize, isize)) -> usize {
    if rows == 0 || cols == 0 {
        return 0;
    }
    assert!(rs >= 0 && cs >= 0, "negative strides are not supported");
    (rows - 1) * rs as usize + (cols - 1) * cs as usize
}

fn check_gemm_bounds<S>(
    m: usize,
    k: usize,
    n: usize,
    a: &[S],
    sa: (isize, isize),
    b: &[S],
    sb: (isize, isize),
    c: &[S],
    sc: (isize, isize),
) {
    if m == 0 || n == 0 {
        return;
    }
    if k > 0 {
        assert!(max_offset(m, k, sa) < a.len(), "gemm: A out of bounds");
        assert!(max_offset(k, n, sb) < b.len(), "gemm: B out of bounds");
    }
    assert!(max_offset(m, n, sc) < c.len(), "gemm: C out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $kernel:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                sa: (isize, isize),
                b: &[Self],
                sb: (isize, isize),
                beta: Self,
                c: &mut [Self],
                sc: (isize, isize),
            ) {
                check_gemm_bounds(m, k, n, a, sa, b, sb, c, sc);
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: every element addressed by the kernel lies within the
                // slices, as checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        sa.0,
                        sa.1,
                        b.as_ptr(),
                        sb.0,
                        sb.1,
                        beta,
                        c.as_mut_ptr(),
                        sc.0,
                        sc.1,
                    )
                }
            }
        }
    };
}

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

/// Converts an `f64` literal into the working scalar.
#[inline]
pub fn lit<S: Real>(x: f64) -> S {
    S::from_f64(x).expect("finite literal")
}

/// Lossless (for f32/f64) conversion into `f64`.
#[inline]
pub fn to_f64<S: Real>(x: S) -> f64 {
    x.to_f64().expect("real scalar")
}

/// Converts a whole slice between scalar types.
pub fn cast_vec<A: Real, B: Real>(xs: &[A]) -> Vec<B> {
    xs.iter().map(|&x| lit::<B>(to_f64(x))).collect()
}

pub fn dot<S: Real>(a: &[S], b: &[S]) -> S {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(&x, &y)| x * y).sum()
}

pub fn norm<S: Real>(a: &[S]) -> S {
    dot(a, a).sqrt()
}

pub fn norm_inf<S: Real>(a: &[S]) -> S {
    a.iter().fold(S::zero(), |m, &x| m.max(x.abs()))
}

/// `y += alpha * x`
pub fn axpy<S: Real>(alpha: S, x: &[S], y: &mut [S]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

pub fn scale<S: Real>(alpha: S, x: &[S]) -> Vec<S> {
    x.iter().map(|&v| alpha * v).collect()
}

pub fn sub<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x - y).collect()
}

pub fn add<S: Real>(a: &[S], b: &[S]) -> Vec<S> {
    a.iter().zip(b).map(|(&x, &y)| x + y).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_matches_naive_product() {
        let a = [1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]; // 2x3
        let b = [1.0f32, 0.5, -1.0, 2.0, 0.0, 1.0]; // 3x2
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [-1.0, 7.5, -1.0, 18.0]);
    }

    #[test]
    fn gemm_transposed_strides() {
        // A^T B with A stored 3x2 row-major.
        let a = [1.0f64, 4.0, 2.0, 5.0, 3.0, 6.0];
        let b = [1.0f64, 0.5, -1.0, 2.0, 0.0, 1.0];
        let mut c = [0.0f64; 4];
        f64::gemm(2, 3, 2, 1.0, &a, (1, 2), &b, (2, 1), 0.0, &mut c, (2, 1));
        assert_eq!(c, [-1.0, 7.5, -1.0, 18.0]);
    }

    #[test]
    #[should_panic(expected = "out of bounds")]
    fn gemm_rejects_short_buffers() {
        let a = [1.0f32; 5];
        let b = [1.0f32; 6];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, (3, 1), &b, (2, 1), 0.0, &mut c, (2, 1));
    }
}

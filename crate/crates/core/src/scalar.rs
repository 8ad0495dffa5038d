//! Real scalar abstraction shared by every numeric routine in the crate.

use std::fmt::{Debug, Display};
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign, SubAssign};

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point scalar: `f32` or `f64`.
///
/// Besides the usual arithmetic, the trait carries a dense matrix product so
/// that tensor contractions can dispatch to an optimized kernel for each
/// concrete precision.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Debug
    + Display
    + Default
    + Sum
    + AddAssign
    + SubAssign
    + MulAssign
    + DivAssign
    + Send
    + Sync
    + 'static
{
    /// `c = op(a) · op(b)` with `c` row-major m×n. Untransposed, `a` is
    /// stored row-major m×k and `b` k×n; transposed, `a` is stored k×m and
    /// `b` n×k.
    #[allow(clippy::too_many_arguments)]
    fn gemm(m: usize, k: usize, n: usize, a: &[Self], ta: bool, b: &[Self], tb: bool, c: &mut [Self]);

    /// `c = a · b` for row-major `a` (m×k), `b` (k×n), `c` (m×n).
    #[inline]
    fn matmul(m: usize, k: usize, n: usize, a: &[Self], b: &[Self], c: &mut [Self]) {
        Self::gemm(m, k, n, a, false, b, false, c)
    }

    /// Lossless conversion from any `f64` literal used in the crate.
    #[inline]
    fn lit(x: f64) -> Self {
        Self::from_f64(x).expect("scalar literal out of range")
    }

    #[inline]
    fn from_usize_lossy(n: usize) -> Self {
        Self::from_usize(n).expect("integer not representable")
    }

    #[inline]
    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

/// Products up to this many multiply-adds skip the packing kernel.
const SMALL_GEMM: usize = 2048;

#[allow(clippy::too_many_arguments)]
#[inline]
fn small_gemm<T: Copy + Default + std::ops::Mul<Output = T> + std::ops::AddAssign>(
    m: usize,
    k: usize,
    n: usize,
    a: &[T],
    rsa: usize,
    csa: usize,
    b: &[T],
    rsb: usize,
    csb: usize,
    c: &mut [T],
) {
    c.iter_mut().for_each(|x| *x = T::default());
    for i in 0..m {
        let row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let x = a[i * rsa + p * csa];
            let bp = p * rsb;
            if csb == 1 {
                for (dst, &y) in row.iter_mut().zip(&b[bp..bp + n]) {
                    *dst += x * y;
                }
            } else {
                for (j, dst) in row.iter_mut().enumerate() {
                    *dst += x * b[bp + j * csb];
                }
            }
        }
    }
}

macro_rules! impl_scalar {
    ($t:ty, $kernel:path) => {
        impl Scalar for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[$t],
                ta: bool,
                b: &[$t],
                tb: bool,
                c: &mut [$t],
            ) {
                assert!(a.len() == m * k && b.len() == k * n && c.len() == m * n);
                if m == 0 || n == 0 {
                    return;
                }
                if k == 0 {
                    c.iter_mut().for_each(|x| *x = 0.0);
                    return;
                }
                let (rsa, csa) = if ta { (1, m) } else { (k, 1) };
                let (rsb, csb) = if tb { (1, k) } else { (n, 1) };
                if m * n * k <= SMALL_GEMM {
                    small_gemm(m, k, n, a, rsa, csa, b, rsb, csb, c);
                    return;
                }
                let (rsa, csa, rsb, csb) = (rsa as isize, csa as isize, rsb as isize, csb as isize);
                // SAFETY: lengths asserted above; the strides address exactly
                // the m·k, k·n and m·n elements of dense storage.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        rsa,
                        csa,
                        b.as_ptr(),
                        rsb,
                        csb,
                        0.0,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }
        }
    };
}

impl_scalar!(f64, matrixmultiply::dgemm);
impl_scalar!(f32, matrixmultiply::sgemm);

/// `log(exp(a) + exp(b))` without overflow; `-inf` inputs are neutral.
pub fn log_add_exp<T: Scalar>(a: T, b: T) -> T {
    if a == T::neg_infinity() {
        return b;
    }
    if b == T::neg_infinity() {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// `log Σ exp(x_i)`; returns `-inf` for an empty slice or all `-inf` inputs.
pub fn log_sum_exp<T: Scalar>(xs: &[T]) -> T {
    let max = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if max == T::neg_infinity() {
        return max;
    }
    if max == T::infinity() {
        return max;
    }
    let s: T = xs.iter().map(|&x| (x - max).exp()).sum();
    max + s.ln()
}

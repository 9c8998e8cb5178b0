use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::Float;

/// Scalar precision of a computation.
///
/// `f32` is the working precision for optimization runs; `f64` is used where
/// rounding would swamp a tolerance (finite-difference gradient checks).
pub trait Real: Float + Send + Sync + Debug + Display + Default + Sum + 'static {
    const NAME: &'static str;

    /// Converts an `f64` literal, rounding to this precision.
    fn lit(v: f64) -> Self;

    fn as_f64(self) -> f64;

    /// `c = a · b` for strided row/column layouts; `c` is overwritten.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        rsa: isize,
        csa: isize,
        b: &[Self],
        rsb: isize,
        csb: isize,
        c: &mut [Self],
    );
}

macro_rules! impl_real {
    ($t:ty, $name:literal, $gemm:path) => {
        impl Real for $t {
            const NAME: &'static str = $name;

            fn lit(v: f64) -> Self {
                v as $t
            }

            fn as_f64(self) -> f64 {
                self as f64
            }

            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                rsa: isize,
                csa: isize,
                b: &[Self],
                rsb: isize,
                csb: isize,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
                // SAFETY: the asserted lengths cover every strided access for
                // the row-major / transposed layouts produced by `Tensor::matmul_t`.
                unsafe {
                    $gemm(
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

impl_real!(f32, "f32", matrixmultiply::sgemm);
impl_real!(f64, "f64", matrixmultiply::dgemm);

//! Dense tensors with reverse-mode gradients for the handful of operations a
//! tower needs, plus the optimizers.
//!
//! Training runs in `f32`. Every operation is generic over [`Real`] so the
//! same graph can be evaluated in `f64` for finite-difference checks.

mod optim;
mod tape;
mod tensor;

pub use optim::{AdamState, Optimizer, OptimizerConfig, OptimizerKind};
pub use tape::{Gradients, NodeId, Tape};
pub use tensor::{row_cyclic_shift, Tensor};

pub(crate) use tape::bag_scale;
pub(crate) use tensor::{affine as tensor_affine, relu_in_place as tensor_relu_in_place};

use num_traits::Float;

/// Floating point element type with a matching GEMM kernel.
pub trait Real: Float + Default + std::fmt::Debug + std::iter::Sum + Send + Sync + 'static {
    /// `c = a · b + beta · c` for row-major `a[m,k]`, `b[k,n]` with
    /// arbitrary strides; `c` is row-major `[m,n]`.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: &[Self],
        a_strides: (isize, isize),
        b: &[Self],
        b_strides: (isize, isize),
        beta: Self,
        c: &mut [Self],
    );

    fn from_f64(x: f64) -> Self;
}

fn check_gemm_extent(len: usize, rows: usize, cols: usize, strides: (isize, isize)) {
    if rows == 0 || cols == 0 {
        return;
    }
    let last = (rows - 1) as isize * strides.0 + (cols - 1) as isize * strides.1;
    assert!(strides.0 >= 0 && strides.1 >= 0 && (last as usize) < len, "gemm operand out of bounds");
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: &[Self],
                a_strides: (isize, isize),
                b: &[Self],
                b_strides: (isize, isize),
                beta: Self,
                c: &mut [Self],
            ) {
                check_gemm_extent(a.len(), m, k, a_strides);
                check_gemm_extent(b.len(), k, n, b_strides);
                assert!(c.len() >= m * n, "gemm output too small");
                if m == 0 || n == 0 {
                    return;
                }
                // SAFETY: extents of a, b and c were checked above.
                unsafe {
                    $kernel(
                        m,
                        k,
                        n,
                        1.0,
                        a.as_ptr(),
                        a_strides.0,
                        a_strides.1,
                        b.as_ptr(),
                        b_strides.0,
                        b_strides.1,
                        beta,
                        c.as_mut_ptr(),
                        n as isize,
                        1,
                    );
                }
            }

            fn from_f64(x: f64) -> Self {
                x as $t
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Logistic loss of logit `x` against a soft label in `[0, 1]`, evaluated as
/// `max(x, 0) - label * x + ln(1 + e^{-|x|})`.
pub fn logloss<T: Real>(x: T, label: T) -> T {
    x.max(T::zero()) - label * x + (-x.abs()).exp().ln_1p()
}

/// d logloss / dx.
pub fn logloss_grad<T: Real>(x: T, label: T) -> T {
    sigmoid(x) - label
}

/// Hinge penalty `max(0, margin + x)` on a logit that should sit below `-margin`.
pub fn hinge_neg<T: Real>(x: T, margin: T) -> T {
    (margin + x).max(T::zero())
}

/// Subgradient of [`hinge_neg`]; zero at the kink.
pub fn hinge_neg_grad<T: Real>(x: T, margin: T) -> T {
    if margin + x > T::zero() {
        T::one()
    } else {
        T::zero()
    }
}

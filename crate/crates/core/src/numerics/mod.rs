//! Dense row-major tensors and a reverse-mode autodiff tape.
//!
//! Everything learnable in the crate is built from these pieces. Models run
//! in `f32`; gradient checks rebuild the same graph in `f64`.

mod gradcheck;
mod graph;
mod tensor;

pub use gradcheck::{gradcheck, GradcheckReport, REL_FLOOR};
pub use graph::{BackwardFault, Gradients, Graph, RotationTable, Var};
pub(crate) use graph::dot;
pub use tensor::{matmul, rmsnorm, softmax, Tensor, RMS_EPS};

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Floating point element type. Implemented for `f32` and `f64`.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Default + Debug + Display + Sum + Send + Sync + 'static
{
    /// `c = alpha * a * b + beta * c` with arbitrary strides.
    ///
    /// `a` is `m x k`, `b` is `k x n`, `c` is `m x n`; all offsets are
    /// relative to the start of each slice. Panics if any access would fall
    /// outside the slices.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        rsa: usize,
        csa: usize,
        b: &[Self],
        rsb: usize,
        csb: usize,
        beta: Self,
        c: &mut [Self],
        rsc: usize,
        csc: usize,
    );

    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite cast")
    }

    fn as_f64(self) -> f64 {
        self.to_f64().expect("finite cast")
    }
}

fn last_index(rows: usize, cols: usize, rs: usize, cs: usize) -> usize {
    if rows == 0 || cols == 0 {
        0
    } else {
        (rows - 1) * rs + (cols - 1) * cs
    }
}

macro_rules! impl_real {
    ($t:ty, $gemm:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                rsa: usize,
                csa: usize,
                b: &[Self],
                rsb: usize,
                csb: usize,
                beta: Self,
                c: &mut [Self],
                rsc: usize,
                csc: usize,
            ) {
                if m == 0 || n == 0 {
                    return;
                }
                assert!(k == 0 || last_index(m, k, rsa, csa) < a.len(), "gemm: lhs out of bounds");
                assert!(k == 0 || last_index(k, n, rsb, csb) < b.len(), "gemm: rhs out of bounds");
                assert!(last_index(m, n, rsc, csc) < c.len(), "gemm: output out of bounds");
                // SAFETY: every index touched by the kernel is bounded by the
                // asserts above, and `c` is a unique borrow disjoint from `a`/`b`.
                unsafe {
                    $gemm(
                        m,
                        k,
                        n,
                        alpha,
                        a.as_ptr(),
                        rsa as isize,
                        csa as isize,
                        b.as_ptr(),
                        rsb as isize,
                        csb as isize,
                        beta,
                        c.as_mut_ptr(),
                        rsc as isize,
                        csc as isize,
                    )
                }
            }
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

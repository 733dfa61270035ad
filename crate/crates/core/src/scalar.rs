//! Scalar abstraction shared by the tensor engine, losses and signal models.

use std::fmt::{Debug, Display};
use std::iter::Sum;

use num_traits::{Float, FromPrimitive, ToPrimitive};

/// Real scalar the whole numeric stack is generic over.
///
/// Implemented for `f32` and `f64`; the training pipeline and all persisted
/// artifacts use `f64`.
pub trait Scalar:
    Float
    + FromPrimitive
    + ToPrimitive
    + Sum
    + Default
    + Debug
    + Display
    + Send
    + Sync
    + std::ops::AddAssign
    + std::ops::SubAssign
    + std::ops::MulAssign
    + 'static
{
    /// Dtype code written into the tensor blob header.
    const DTYPE_CODE: u8;
    const BYTES: usize;

    fn write_le(self, out: &mut Vec<u8>);
    fn read_le(bytes: &[u8]) -> Self;

    /// `c = alpha * a @ b + beta * c` on row-major buffers.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        trans_a: bool,
        b: &[Self],
        trans_b: bool,
        beta: Self,
        c: &mut [Self],
    );

    #[inline]
    fn from_f64_lossy(v: f64) -> Self {
        Self::from_f64(v).expect("finite conversion")
    }

    #[inline]
    fn lossy_f64(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }

    #[inline]
    fn from_usize_lossy(v: usize) -> Self {
        Self::from_usize(v).expect("usize conversion")
    }
}

macro_rules! gemm_impl {
    ($ty:ty, $kernel:path) => {
        fn gemm(
            m: usize,
            k: usize,
            n: usize,
            alpha: Self,
            a: &[Self],
            trans_a: bool,
            b: &[Self],
            trans_b: bool,
            beta: Self,
            c: &mut [Self],
        ) {
            assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
            if m == 0 || n == 0 {
                return;
            }
            // row/column strides of the logical (m x k) and (k x n) operands
            let (rsa, csa) = if trans_a {
                (1, m as isize)
            } else {
                (k as isize, 1)
            };
            let (rsb, csb) = if trans_b {
                (1, k as isize)
            } else {
                (n as isize, 1)
            };
            unsafe {
                $kernel(
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
                    n as isize,
                    1,
                );
            }
        }
    };
}

impl Scalar for f64 {
    const DTYPE_CODE: u8 = 0;
    const BYTES: usize = 8;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 8];
        b.copy_from_slice(&bytes[..8]);
        f64::from_le_bytes(b)
    }

    gemm_impl!(f64, matrixmultiply::dgemm);
}

impl Scalar for f32 {
    const DTYPE_CODE: u8 = 2;
    const BYTES: usize = 4;

    fn write_le(self, out: &mut Vec<u8>) {
        out.extend_from_slice(&self.to_le_bytes());
    }

    fn read_le(bytes: &[u8]) -> Self {
        let mut b = [0u8; 4];
        b.copy_from_slice(&bytes[..4]);
        f32::from_le_bytes(b)
    }

    gemm_impl!(f32, matrixmultiply::sgemm);
}

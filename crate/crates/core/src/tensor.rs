//! Dense row-major tensors and the scalar abstraction the kernels run on.
//!
//! Training runs in `f32`; the gradient oracles re-run the same kernels in
//! `f64` so central differences are meaningful at `h = 1e-3`.

use std::fmt::Debug;

use num_traits::{Float, FromPrimitive, ToPrimitive};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Floating scalar usable by the dense kernels.
pub trait Real:
    Float + FromPrimitive + ToPrimitive + Debug + Default + Send + Sync + 'static
{
    /// `c = alpha * op(a) * op(b) + beta * c` where `op(a)` is `m x k`,
    /// `op(b)` is `k x n` and `c` is `m x n`, all row-major.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        alpha: Self,
        a: &[Self],
        a_transposed: bool,
        b: &[Self],
        b_transposed: bool,
        beta: Self,
        c: &mut [Self],
    );

    fn of(v: f64) -> Self {
        Self::from_f64(v).expect("f64 is representable")
    }

    fn to_f64_lossy(self) -> f64 {
        self.to_f64().unwrap_or(f64::NAN)
    }
}

fn strides(rows: usize, cols: usize, transposed: bool) -> (isize, isize) {
    // Strides of op(x) given x stored row-major as rows x cols of op(x)^T when transposed.
    if transposed {
        (1, rows as isize)
    } else {
        (cols as isize, 1)
    }
}

macro_rules! impl_real {
    ($t:ty, $kernel:path) => {
        impl Real for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                alpha: Self,
                a: &[Self],
                a_transposed: bool,
                b: &[Self],
                b_transposed: bool,
                beta: Self,
                c: &mut [Self],
            ) {
                assert!(a.len() >= m * k, "gemm: lhs too short");
                assert!(b.len() >= k * n, "gemm: rhs too short");
                assert!(c.len() >= m * n, "gemm: output too short");
                let (rsa, csa) = strides(m, k, a_transposed);
                let (rsb, csb) = strides(k, n, b_transposed);
                // SAFETY: the asserts above bound every index the kernel touches
                // for the given dimensions and strides.
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
        }
    };
}

impl_real!(f32, matrixmultiply::sgemm);
impl_real!(f64, matrixmultiply::dgemm);

/// Row-major tensor. Invariant: `shape.iter().product() == data.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseTensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Real> DenseTensor<T> {
    pub fn new(shape: Vec<usize>, data: Vec<T>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(Error::Shape(format!("zero-sized dimension in {shape:?}")));
        }
        let expected: usize = shape.iter().product();
        if expected != data.len() {
            return Err(Error::Shape(format!(
                "shape {shape:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let len = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![T::zero(); len],
        }
    }

    /// Builds a `rows.len() x width` matrix from equally sized rows.
    pub fn from_rows<R: AsRef<[T]>>(rows: &[R]) -> Result<Self> {
        let first = rows
            .first()
            .ok_or_else(|| Error::Shape("no rows".into()))?
            .as_ref()
            .len();
        let mut data = Vec::with_capacity(rows.len() * first);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != first {
                return Err(Error::Shape(format!(
                    "row {i} has {} values, expected {first}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::new(vec![rows.len(), first], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    /// Leading dimension; the batch size for matrices.
    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    /// Product of the trailing dimensions.
    pub fn cols(&self) -> usize {
        self.shape[1..].iter().product()
    }

    pub fn row(&self, i: usize) -> &[T] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn ensure_finite(&self, name: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::NonFinite {
                tensor: name.to_string(),
            })
        }
    }

    pub fn cast<U: Real>(&self) -> DenseTensor<U> {
        DenseTensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .map(|v| U::of(v.to_f64_lossy()))
                .collect(),
        }
    }

    /// Vertical concatenation of two matrices with equal column counts.
    pub fn vstack(&self, other: &Self) -> Result<Self> {
        if self.cols() != other.cols() {
            return Err(Error::Shape(format!(
                "vstack: {} vs {} columns",
                self.cols(),
                other.cols()
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Self::new(vec![self.rows() + other.rows(), self.cols()], data)
    }

    /// Rows `[start, end)` as a new matrix.
    pub fn slice_rows(&self, start: usize, end: usize) -> Result<Self> {
        if start >= end || end > self.rows() {
            return Err(Error::Shape(format!(
                "row range {start}..{end} out of 0..{}",
                self.rows()
            )));
        }
        let c = self.cols();
        Self::new(vec![end - start, c], self.data[start * c..end * c].to_vec())
    }

    /// `self (m x k) * other (k x n)`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        let (m, k) = (self.rows(), self.cols());
        let (k2, n) = (other.rows(), other.cols());
        if k != k2 {
            return Err(Error::Shape(format!("matmul {m}x{k} by {k2}x{n}")));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(m, k, n, T::one(), &self.data, false, &other.data, false, T::zero(), &mut out);
        Self::new(vec![m, n], out)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_inconsistent_shape() {
        assert!(DenseTensor::<f32>::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(DenseTensor::<f32>::new(vec![0, 3], vec![]).is_err());
    }

    #[test]
    fn matmul_matches_hand_product() {
        let a = DenseTensor::<f64>::new(vec![2, 3], vec![1., 2., 3., 4., 5., 6.]).unwrap();
        let b = DenseTensor::<f64>::new(vec![3, 2], vec![7., 8., 9., 10., 11., 12.]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58., 64., 139., 154.]);
    }

    #[test]
    fn gemm_transposes() {
        // a^T * b with a stored as 3x2
        let a = [1.0f32, 4., 2., 5., 3., 6.];
        let b = [7.0f32, 8., 9., 10., 11., 12.];
        let mut c = [0.0f32; 4];
        f32::gemm(2, 3, 2, 1.0, &a, true, &b, false, 0.0, &mut c);
        assert_eq!(c, [58., 64., 139., 154.]);
        // a * b^T with b stored as 2x3
        let a = [1.0f32, 2., 3., 4., 5., 6.];
        let bt = [7.0f32, 9., 11., 8., 10., 12.];
        f32::gemm(2, 3, 2, 1.0, &a, false, &bt, true, 0.0, &mut c);
        assert_eq!(c, [58., 64., 139., 154.]);
    }
}

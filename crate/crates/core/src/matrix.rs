use crate::error::{SvxError, SvxResult};
use num_traits::Float;
use std::fmt::Debug;

/// Scalar type the engine computes in. f32 for training, f64 for gradient
/// checking; both routes run the identical generic code.
pub trait Real: Float + Debug + Default + Send + Sync + 'static {
    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
}

impl Real for f32 {
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn from_f64(v: f64) -> Self {
        v
    }
    fn to_f64(self) -> f64 {
        self
    }
}

/// Dense row-major matrix. Rows are the "token" axis throughout the crate:
/// a sparse tensor's features are one row per active site.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> SvxResult<Self> {
        if data.len() != rows * cols {
            return Err(SvxError::DataLength { expected: rows * cols, got: data.len() });
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows(rows_in: &[Vec<T>]) -> SvxResult<Self> {
        if rows_in.is_empty() {
            return Err(SvxError::EmptyInput("matrix rows"));
        }
        let cols = rows_in[0].len();
        let mut data = Vec::with_capacity(rows_in.len() * cols);
        for r in rows_in {
            if r.len() != cols {
                return Err(SvxError::ShapeMismatch {
                    op: "from_rows",
                    expected: format!("{cols} cols"),
                    got: format!("{} cols", r.len()),
                });
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix { rows: rows_in.len(), cols, data })
    }

    pub fn full(rows: usize, cols: usize, v: T) -> Self {
        Matrix { rows, cols, data: vec![v; rows * cols] }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
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

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// self * other, i-k-j loop order so the inner loop walks both operands
    /// contiguously.
    pub fn matmul(&self, other: &Matrix<T>) -> SvxResult<Matrix<T>> {
        if self.cols != other.rows {
            return Err(SvxError::ShapeMismatch {
                op: "matmul",
                expected: format!("lhs cols == rhs rows ({})", self.cols),
                got: format!("{}", other.rows),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == T::zero() {
                    continue;
                }
                let rhs_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(rhs_row.iter()) {
                    *o = *o + a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn transpose(&self) -> Matrix<T> {
        let mut out = Matrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                out.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        out
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Matrix<T> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn zip_map(&self, other: &Matrix<T>, f: impl Fn(T, T) -> T) -> SvxResult<Matrix<T>> {
        if self.shape() != other.shape() {
            return Err(SvxError::ShapeMismatch {
                op: "zip_map",
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().zip(&other.data).map(|(&a, &b)| f(a, b)).collect(),
        })
    }

    pub fn scale(&self, s: T) -> Matrix<T> {
        self.map(|v| v * s)
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Greatest absolute difference between two same-shaped matrices.
    pub fn max_abs_diff(&self, other: &Matrix<T>) -> SvxResult<f64> {
        if self.shape() != other.shape() {
            return Err(SvxError::ShapeMismatch {
                op: "max_abs_diff",
                expected: format!("{:?}", self.shape()),
                got: format!("{:?}", other.shape()),
            });
        }
        let mut worst = 0.0f64;
        for (&a, &b) in self.data.iter().zip(&other.data) {
            let d = (a.to_f64() - b.to_f64()).abs();
            if d > worst {
                worst = d;
            }
        }
        Ok(worst)
    }

    /// Lossy element-wise cast between scalar types.
    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn matmul_2x3_3x2() {
        let a = Matrix::from_vec(2, 3, vec![1.0f64, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        let b = Matrix::from_vec(3, 2, vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.data(), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn matmul_shape_guard() {
        let a = Matrix::<f32>::zeros(2, 3);
        let b = Matrix::<f32>::zeros(2, 3);
        assert!(matches!(a.matmul(&b), Err(SvxError::ShapeMismatch { .. })));
    }

    #[test]
    fn transpose_round_trip() {
        let a = Matrix::from_vec(2, 3, vec![1.0f32, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
        assert_eq!(a.transpose().transpose(), a);
        assert_eq!(a.transpose().get(2, 1), 6.0);
    }

    #[test]
    fn from_rows_ragged_rejected() {
        let r = Matrix::from_rows(&[vec![1.0f32, 2.0], vec![3.0]]);
        assert!(matches!(r, Err(SvxError::ShapeMismatch { .. })));
    }
}

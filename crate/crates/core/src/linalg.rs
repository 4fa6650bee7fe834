//! Small dense matrix helpers for the QP layer and the adjoint rollout.
//!
//! Everything here targets matrices of dimension at most ~16, so the plain
//! O(n^3) algorithms are the right tool.

use crate::scalar::Scalar;

/// Dense row-major matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Mat<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Mat<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Mat::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Self {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        assert!(rows.iter().all(|row| row.len() == c), "ragged rows");
        Mat {
            rows: r,
            cols: c,
            data: rows.concat(),
        }
    }

    pub fn diag(entries: &[T]) -> Self {
        let mut m = Mat::zeros(entries.len(), entries.len());
        for (i, &e) in entries.iter().enumerate() {
            m[(i, i)] = e;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn transpose(&self) -> Mat<T> {
        let mut t = Mat::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t[(j, i)] = self[(i, j)];
            }
        }
        t
    }

    pub fn matvec(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.cols, x.len());
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `self^T * x` without forming the transpose.
    pub fn matvec_t(&self, x: &[T]) -> Vec<T> {
        assert_eq!(self.rows, x.len());
        let mut out = vec![T::zero(); self.cols];
        for i in 0..self.rows {
            let xi = x[i];
            for (o, &a) in out.iter_mut().zip(self.row(i)) {
                *o = *o + xi * a;
            }
        }
        out
    }

    pub fn matmul(&self, other: &Mat<T>) -> Mat<T> {
        assert_eq!(self.cols, other.rows);
        let mut out = Mat::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            for k in 0..self.cols {
                let aik = self[(i, k)];
                if aik == T::zero() {
                    continue;
                }
                for j in 0..other.cols {
                    out[(i, j)] = out[(i, j)] + aik * other[(k, j)];
                }
            }
        }
        out
    }

    /// Replace with the symmetric part (A + A^T)/2. Square matrices only.
    pub fn symmetrize(&mut self) {
        assert_eq!(self.rows, self.cols);
        let half = crate::scalar::cast::<T>(0.5);
        for i in 0..self.rows {
            for j in (i + 1)..self.cols {
                let m = (self[(i, j)] + self[(j, i)]) * half;
                self[(i, j)] = m;
                self[(j, i)] = m;
            }
        }
    }

    pub fn max_abs(&self) -> T {
        self.data
            .iter()
            .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
    }
}

impl<T> core::ops::Index<(usize, usize)> for Mat<T> {
    type Output = T;
    #[inline]
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> core::ops::IndexMut<(usize, usize)> for Mat<T> {
    #[inline]
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).fold(T::zero(), |s, (&x, &y)| s + x * y)
}

pub fn norm_inf<T: Scalar>(a: &[T]) -> T {
    a.iter()
        .fold(T::zero(), |m, &v| if v.abs() > m { v.abs() } else { m })
}

pub fn axpy<T: Scalar>(alpha: T, x: &[T], y: &mut [T]) {
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = *yi + alpha * xi;
    }
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
/// Returns `None` when a pivot is not strictly positive.
pub fn cholesky<T: Scalar>(a: &Mat<T>) -> Option<Mat<T>> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    let mut l = Mat::zeros(n, n);
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[(i, j)];
            for k in 0..j {
                s = s - l[(i, k)] * l[(j, k)];
            }
            if i == j {
                if s <= T::zero() {
                    return None;
                }
                l[(i, i)] = s.sqrt();
            } else {
                l[(i, j)] = s / l[(j, j)];
            }
        }
    }
    Some(l)
}

/// Solve `L L^T x = b` given the lower Cholesky factor.
pub fn chol_solve<T: Scalar>(l: &Mat<T>, b: &[T]) -> Vec<T> {
    let n = l.rows();
    let mut y = b.to_vec();
    for i in 0..n {
        for k in 0..i {
            let lik = l[(i, k)];
            y[i] = y[i] - lik * y[k];
        }
        y[i] = y[i] / l[(i, i)];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let lki = l[(k, i)];
            y[i] = y[i] - lki * y[k];
        }
        y[i] = y[i] / l[(i, i)];
    }
    y
}

/// Solve `A x = b` by LU with partial pivoting. `None` when A is singular.
pub fn lu_solve<T: Scalar>(a: &Mat<T>, b: &[T]) -> Option<Vec<T>> {
    let n = a.rows();
    assert_eq!(n, a.cols());
    assert_eq!(n, b.len());
    let mut m = a.clone();
    let mut x = b.to_vec();
    for col in 0..n {
        let mut piv = col;
        let mut best = m[(col, col)].abs();
        for r in (col + 1)..n {
            if m[(r, col)].abs() > best {
                best = m[(r, col)].abs();
                piv = r;
            }
        }
        if best == T::zero() || !best.is_finite() {
            return None;
        }
        if piv != col {
            for j in 0..n {
                let t = m[(col, j)];
                m[(col, j)] = m[(piv, j)];
                m[(piv, j)] = t;
            }
            x.swap(col, piv);
        }
        for r in (col + 1)..n {
            let f = m[(r, col)] / m[(col, col)];
            if f == T::zero() {
                continue;
            }
            m[(r, col)] = T::zero();
            for j in (col + 1)..n {
                let v = m[(col, j)];
                m[(r, j)] = m[(r, j)] - f * v;
            }
            x[r] = x[r] - f * x[col];
        }
    }
    for i in (0..n).rev() {
        for j in (i + 1)..n {
            let v = x[j];
            x[i] = x[i] - m[(i, j)] * v;
        }
        x[i] = x[i] / m[(i, i)];
    }
    Some(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn cholesky_solve_roundtrip() {
        let a = Mat::from_rows(&[
            vec![4.0, 1.0, 0.5],
            vec![1.0, 3.0, 0.2],
            vec![0.5, 0.2, 2.0],
        ]);
        let l = cholesky(&a).unwrap();
        let b = vec![1.0, -2.0, 0.3];
        let x = chol_solve(&l, &b);
        let ax = a.matvec(&x);
        for (got, want) in ax.iter().zip(&b) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn cholesky_rejects_indefinite() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 1.0]]);
        assert!(cholesky(&a).is_none());
    }

    #[test]
    fn lu_solves_indefinite_kkt_like_system() {
        let a = Mat::from_rows(&[
            vec![2.0, 0.0, 1.0],
            vec![0.0, 1.0, -1.0],
            vec![1.0, -1.0, 0.0],
        ]);
        let b = vec![1.0, 0.0, 2.0];
        let x = lu_solve(&a, &b).unwrap();
        let ax = a.matvec(&x);
        for (got, want) in ax.iter().zip(&b) {
            assert_abs_diff_eq!(got, want, epsilon = 1e-12);
        }
    }

    #[test]
    fn lu_detects_singular() {
        let a = Mat::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]);
        assert!(lu_solve(&a, &[1.0, 1.0]).is_none());
    }

    #[test]
    fn matvec_t_matches_transpose() {
        let a = Mat::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]);
        let x = vec![0.5, -1.0];
        assert_eq!(a.matvec_t(&x), a.transpose().matvec(&x));
    }

    #[test]
    fn generic_over_f32() {
        let a: Mat<f32> = Mat::identity(3);
        let x = a.matvec(&[1.0f32, 2.0, 3.0]);
        assert_eq!(x, vec![1.0f32, 2.0, 3.0]);
    }
}

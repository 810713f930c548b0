//! Dense row-major matrices for the small k×k systems the estimator needs.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq)]
pub struct Matrix<T> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Scalar> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![T::zero(); rows * cols] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = T::one();
        }
        m
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|row| row.len() != c) {
            return Err(Error::Shape("ragged matrix rows".into()));
        }
        Ok(Self { rows: r, cols: c, data: rows.concat() })
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

    pub fn as_slice(&self) -> &[T] {
        &self.data
    }

    /// Adds `scale * v v'` in place.
    pub fn add_outer(&mut self, v: &[T], scale: T) {
        debug_assert_eq!(v.len(), self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                self.data[i * self.cols + j] += scale * (v[i] * v[j]);
            }
        }
    }

    pub fn scale(&mut self, s: T) {
        self.data.iter_mut().for_each(|v| *v *= s);
    }

    pub fn mul_vec(&self, v: &[T]) -> Vec<T> {
        (0..self.rows).map(|i| dot(self.row(i), v)).collect()
    }

    pub fn max_asymmetry(&self) -> T {
        let mut worst = T::zero();
        for i in 0..self.rows {
            for j in 0..self.cols {
                worst = worst.max((self[(i, j)] - self[(j, i)]).abs());
            }
        }
        worst
    }

    /// Solves `self * z = b` by Gaussian elimination with partial pivoting.
    /// A pivot below `n * eps * max|a_ij|` is reported as rank deficiency.
    pub fn solve(&self, b: &[T]) -> Result<Vec<T>> {
        let n = self.rows;
        if self.cols != n || b.len() != n {
            return Err(Error::Shape(format!(
                "solve expects square system, got {}x{} with rhs {}",
                self.rows,
                self.cols,
                b.len()
            )));
        }
        let mut a = self.data.clone();
        let mut z = b.to_vec();
        let scale = a.iter().fold(T::zero(), |m, v| m.max(v.abs()));
        let tiny = scale * T::epsilon() * T::from_count(n.max(1) * 4);
        if scale == T::zero() {
            return Err(Error::RankDeficient("zero matrix".into()));
        }
        for col in 0..n {
            let piv = (col..n)
                .max_by(|&r1, &r2| a[r1 * n + col].abs().partial_cmp(&a[r2 * n + col].abs()).unwrap())
                .unwrap();
            if a[piv * n + col].abs() <= tiny {
                return Err(Error::RankDeficient(format!(
                    "pivot {col} is numerically zero; covariates are collinear"
                )));
            }
            if piv != col {
                for j in 0..n {
                    a.swap(piv * n + j, col * n + j);
                }
                z.swap(piv, col);
            }
            let d = a[col * n + col];
            for r in col + 1..n {
                let f = a[r * n + col] / d;
                if f == T::zero() {
                    continue;
                }
                for j in col..n {
                    let v = a[col * n + j];
                    a[r * n + j] -= f * v;
                }
                let zc = z[col];
                z[r] -= f * zc;
            }
        }
        for col in (0..n).rev() {
            let mut s = z[col];
            for j in col + 1..n {
                s -= a[col * n + j] * z[j];
            }
            z[col] = s / a[col * n + col];
        }
        Ok(z)
    }

    /// Eigenvalues of a symmetric matrix by cyclic Jacobi rotations.
    pub fn symmetric_eigenvalues(&self) -> Vec<T> {
        let n = self.rows;
        let mut a = self.data.clone();
        let two = T::lit(2.0);
        for _sweep in 0..100 {
            let off: T = (0..n)
                .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
                .map(|(i, j)| a[i * n + j] * a[i * n + j])
                .sum();
            if off <= T::epsilon() * T::epsilon() {
                break;
            }
            for p in 0..n {
                for q in p + 1..n {
                    let apq = a[p * n + q];
                    if apq == T::zero() {
                        continue;
                    }
                    let theta = (a[q * n + q] - a[p * n + p]) / (two * apq);
                    let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                    let c = T::one() / (t * t + T::one()).sqrt();
                    let s = t * c;
                    for k in 0..n {
                        let akp = a[k * n + p];
                        let akq = a[k * n + q];
                        a[k * n + p] = c * akp - s * akq;
                        a[k * n + q] = s * akp + c * akq;
                    }
                    for k in 0..n {
                        let apk = a[p * n + k];
                        let aqk = a[q * n + k];
                        a[p * n + k] = c * apk - s * aqk;
                        a[q * n + k] = s * apk + c * aqk;
                    }
                }
            }
        }
        (0..n).map(|i| a[i * n + i]).collect()
    }
}

impl<T> std::ops::Index<(usize, usize)> for Matrix<T> {
    type Output = T;
    fn index(&self, (i, j): (usize, usize)) -> &T {
        &self.data[i * self.cols + j]
    }
}

impl<T> std::ops::IndexMut<(usize, usize)> for Matrix<T> {
    fn index_mut(&mut self, (i, j): (usize, usize)) -> &mut T {
        &mut self.data[i * self.cols + j]
    }
}

pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    a.iter().zip(b).fold(T::zero(), |acc, (&x, &y)| acc + x * y)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn solves_small_system() {
        let a = Matrix::from_rows(&[vec![4.0, 1.0], vec![1.0, 3.0]]).unwrap();
        let z: Vec<f64> = a.solve(&[1.0, 2.0]).unwrap();
        assert!((z[0] - 1.0 / 11.0).abs() < 1e-14);
        assert!((z[1] - 7.0 / 11.0).abs() < 1e-14);
    }

    #[test]
    fn singular_system_is_rank_deficient() {
        let a = Matrix::from_rows(&[vec![1.0, 2.0], vec![2.0, 4.0]]).unwrap();
        assert!(matches!(a.solve(&[1.0, 1.0]), Err(Error::RankDeficient(_))));
    }

    #[test]
    fn jacobi_eigenvalues() {
        let a = Matrix::from_rows(&[vec![2.0, 1.0], vec![1.0, 2.0]]).unwrap();
        let mut ev: Vec<f64> = a.symmetric_eigenvalues();
        ev.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((ev[0] - 1.0).abs() < 1e-12 && (ev[1] - 3.0).abs() < 1e-12);
    }
}

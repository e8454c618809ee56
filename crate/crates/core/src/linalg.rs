//! Small dense symmetric eigensolver.

use alloc::vec;
use alloc::vec::Vec;

/// Row-major square matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    pub n: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(n: usize) -> Self {
        Self { n, data: vec![0.0; n * n] }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] = v;
    }

    #[inline]
    pub fn add(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.n + j] += v;
    }

    /// `self += w * x x^T`.
    pub fn add_outer(&mut self, w: f64, x: &[f64]) {
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (j, xj) in x.iter().enumerate() {
                self.data[i * self.n + j] += w * xi * xj;
            }
        }
    }

    pub fn scaled_sub(&self, a: f64, other: &Matrix) -> Matrix {
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x - y).collect();
        Matrix { n: self.n, data }
    }
}

/// Eigen decomposition of a symmetric matrix.
#[derive(Clone, Debug)]
pub struct SymEigen {
    /// Ascending eigenvalues.
    pub values: Vec<f64>,
    /// Column `k` of this row-major matrix is the eigenvector of `values[k]`.
    pub vectors: Matrix,
}

/// Cyclic Jacobi rotations; accurate for the small matrices used here.
pub fn sym_eigen(a: &Matrix) -> SymEigen {
    let n = a.n;
    let mut m = a.clone();
    let mut v = Matrix::identity(n);
    let scale: f64 = a.data.iter().map(|x| x * x).sum::<f64>().max(f64::MIN_POSITIVE);
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| m.get(i, j) * m.get(i, j))
            .sum();
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = m.get(p, q);
                if apq == 0.0 {
                    continue;
                }
                let app = m.get(p, p);
                let aqq = m.get(q, q);
                let theta = (aqq - app) / (2.0 * apq);
                let t = theta.signum() / (libm::fabs(theta) + libm::sqrt(theta * theta + 1.0));
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / libm::sqrt(t * t + 1.0);
                let s = t * c;
                for k in 0..n {
                    let mkp = m.get(k, p);
                    let mkq = m.get(k, q);
                    m.set(k, p, c * mkp - s * mkq);
                    m.set(k, q, s * mkp + c * mkq);
                }
                for k in 0..n {
                    let mpk = m.get(p, k);
                    let mqk = m.get(q, k);
                    m.set(p, k, c * mpk - s * mqk);
                    m.set(q, k, s * mpk + c * mqk);
                }
                for k in 0..n {
                    let vkp = v.get(k, p);
                    let vkq = v.get(k, q);
                    v.set(k, p, c * vkp - s * vkq);
                    v.set(k, q, s * vkp + c * vkq);
                }
            }
        }
    }
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| m.get(i, i).total_cmp(&m.get(j, j)));
    let values = order.iter().map(|&i| m.get(i, i)).collect();
    let mut vectors = Matrix::zeros(n);
    for (col, &src) in order.iter().enumerate() {
        for r in 0..n {
            vectors.set(r, col, v.get(r, src));
        }
    }
    SymEigen { values, vectors }
}

/// `U^T A U` for the columns `cols` of `u`.
pub fn project(a: &Matrix, u: &Matrix, cols: &[usize]) -> Matrix {
    let n = a.n;
    let k = cols.len();
    let mut au = vec![0.0; n * k];
    for i in 0..n {
        for (c, &col) in cols.iter().enumerate() {
            let mut s = 0.0;
            for j in 0..n {
                s += a.get(i, j) * u.get(j, col);
            }
            au[i * k + c] = s;
        }
    }
    let mut out = Matrix::zeros(k);
    for (r, &row) in cols.iter().enumerate() {
        for c in 0..k {
            let mut s = 0.0;
            for i in 0..n {
                s += u.get(i, row) * au[i * k + c];
            }
            out.set(r, c, s);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_of_known_matrix() {
        // [[2,1],[1,2]] has eigenvalues 1 and 3
        let a = Matrix { n: 2, data: vec![2.0, 1.0, 1.0, 2.0] };
        let e = sym_eigen(&a);
        assert!((e.values[0] - 1.0).abs() < 1e-12);
        assert!((e.values[1] - 3.0).abs() < 1e-12);
        // A v = lambda v
        for k in 0..2 {
            for i in 0..2 {
                let av: f64 = (0..2).map(|j| a.get(i, j) * e.vectors.get(j, k)).sum();
                assert!((av - e.values[k] * e.vectors.get(i, k)).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn eigen_reconstructs_random_symmetric() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 7;
        let mut a = Matrix::zeros(n);
        for i in 0..n {
            for j in i..n {
                let x: f64 = rng.gen_range(-1.0..1.0);
                a.set(i, j, x);
                a.set(j, i, x);
            }
        }
        let e = sym_eigen(&a);
        for i in 0..n {
            for j in 0..n {
                let r: f64 = (0..n).map(|k| e.vectors.get(i, k) * e.values[k] * e.vectors.get(j, k)).sum();
                assert!((r - a.get(i, j)).abs() < 1e-10);
            }
        }
        let trace: f64 = (0..n).map(|i| a.get(i, i)).sum();
        assert!((trace - e.values.iter().sum::<f64>()).abs() < 1e-10);
    }
}

//! Singular value decomposition built on the symmetric eigensolver.
//!
//! The singular triplets of a square `R` are read off the eigenpairs of the
//! augmented matrix `[[0, R], [Rᵀ, 0]]`, whose eigenvalues are `±σ_i` with
//! eigenvectors `(u_i, ±v_i)/√2`. This keeps the conditioning of `R` (no
//! normal equations) and stays accurate on the ±1 contrast matrices, where
//! the bidiagonal SVD in nalgebra 0.35 can lose several digits. Rectangular
//! inputs are first reduced to a square triangular factor by Householder QR.

use nalgebra::{DMatrix, DVector};

#[derive(Clone, Debug)]
pub struct Svd {
    /// Nonincreasing, length `min(m, n)`.
    pub singular_values: DVector<f64>,
    /// `m × min(m, n)` left singular vectors.
    pub u: DMatrix<f64>,
    /// `n × min(m, n)` right singular vectors.
    pub v: DMatrix<f64>,
}

impl Svd {
    pub fn new(a: &DMatrix<f64>) -> Svd {
        let (m, n) = a.shape();
        if m < n {
            let t = Svd::new(&a.transpose());
            return Svd {
                singular_values: t.singular_values,
                u: t.v,
                v: t.u,
            };
        }
        if n == 0 {
            return Svd {
                singular_values: DVector::zeros(0),
                u: DMatrix::zeros(m, 0),
                v: DMatrix::zeros(0, 0),
            };
        }
        let qr = a.clone().qr();
        let (q, r) = (qr.q(), qr.r());
        let mut aug = DMatrix::zeros(2 * n, 2 * n);
        aug.view_mut((0, n), (n, n)).copy_from(&r);
        aug.view_mut((n, 0), (n, n)).copy_from(&r.transpose());
        let eig = aug.symmetric_eigen();
        let mut order: Vec<usize> = (0..2 * n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let keep = &order[..n];
        let sqrt2 = std::f64::consts::SQRT_2;
        let singular_values = DVector::from_fn(n, |i, _| eig.eigenvalues[keep[i]].max(0.0));
        let ur = DMatrix::from_fn(n, n, |r, c| sqrt2 * eig.eigenvectors[(r, keep[c])]);
        let v = DMatrix::from_fn(n, n, |r, c| sqrt2 * eig.eigenvectors[(n + r, keep[c])]);
        Svd {
            singular_values,
            u: q * ur,
            v,
        }
    }

    pub fn max(&self) -> f64 {
        self.singular_values.iter().copied().fold(0.0, f64::max)
    }

    /// Number of singular values above `tol`.
    pub fn rank(&self, tol: f64) -> usize {
        self.singular_values.iter().filter(|&&s| s > tol).count()
    }

    /// Moore–Penrose inverse with singular values at or below `tol` dropped.
    pub fn pseudo_inverse(&self, tol: f64) -> DMatrix<f64> {
        let mut out = DMatrix::zeros(self.v.nrows(), self.u.nrows());
        for (i, &s) in self.singular_values.iter().enumerate() {
            if s > tol {
                out += self.v.column(i) * self.u.column(i).transpose() / s;
            }
        }
        out
    }

    /// Minimum-norm least-squares solution of `Ax = b`.
    pub fn solve(&self, b: &DVector<f64>, tol: f64) -> DVector<f64> {
        let mut x = DVector::zeros(self.v.nrows());
        for (i, &s) in self.singular_values.iter().enumerate() {
            if s > tol {
                x += self.v.column(i) * (self.u.column(i).dot(b) / s);
            }
        }
        x
    }
}

//! Dense Cholesky factorization for the symmetric positive-definite systems
//! that appear in ridge regression.

use ndarray::{Array1, Array2, ArrayView2};

use crate::error::{Error, Result};

/// Lower-triangular factor `L` with `A = L Lᵀ`.
#[derive(Debug, Clone)]
pub struct Cholesky {
    l: Array2<f64>,
}

impl Cholesky {
    /// Factors a symmetric matrix. Fails when a pivot is not safely positive,
    /// which for Gram matrices means the data is numerically rank-deficient.
    pub fn factor(a: ArrayView2<'_, f64>) -> Result<Self> {
        let n = a.nrows();
        if a.ncols() != n {
            return Err(Error::Shape(format!("cholesky needs a square matrix, got {:?}", a.dim())));
        }
        let max_diag = a.diag().iter().fold(0.0f64, |m, &v| m.max(v.abs()));
        let tol = n.max(1) as f64 * f64::EPSILON * max_diag;

        let mut l = Array2::<f64>::zeros((n, n));
        for j in 0..n {
            let mut d = a[[j, j]];
            for k in 0..j {
                d -= l[[j, k]] * l[[j, k]];
            }
            if !(d > tol) {
                return Err(Error::SingularMatrix(format!(
                    "pivot {j} is {d:e} (tolerance {tol:e})"
                )));
            }
            let djj = d.sqrt();
            l[[j, j]] = djj;
            for i in (j + 1)..n {
                let mut s = a[[i, j]];
                for k in 0..j {
                    s -= l[[i, k]] * l[[j, k]];
                }
                l[[i, j]] = s / djj;
            }
        }
        Ok(Self { l })
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solves `A x = b` for one right-hand side.
    pub fn solve_vec(&self, b: &Array1<f64>) -> Array1<f64> {
        let n = self.dim();
        let l = &self.l;
        let mut y = b.clone();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= l[[i, k]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in (i + 1)..n {
                s -= l[[k, i]] * y[k];
            }
            y[i] = s / l[[i, i]];
        }
        y
    }

    /// Solves `A X = B` column by column.
    pub fn solve_mat(&self, b: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            let x = self.solve_vec(&col.to_owned());
            out.column_mut(j).assign(&x);
        }
        out
    }
}

//! Dense symmetric positive definite factorization used by the term updates.
//!
//! Systems here are small (tens of coefficients), so a plain Cholesky with an
//! optional ridge retry is both faster and easier to audit than pulling in a
//! LAPACK binding.

use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SolveError {
    #[error("matrix is not square: {rows}x{cols}", rows = .0, cols = .1)]
    NotSquare(usize, usize),
    #[error("factorization failed at pivot {pivot} even after ridge jitter {jitter:.3e}")]
    NotPositiveDefinite { pivot: usize, jitter: f64 },
    #[error("matrix contains a non-finite entry at ({0}, {1})")]
    NonFinite(usize, usize),
}

/// Lower-triangular Cholesky factor of a symmetric positive definite matrix.
#[derive(Debug, Clone)]
pub struct SpdFactor {
    l: Array2<f64>,
    /// Ridge added to the diagonal before the factorization succeeded (0 if none).
    pub jitter: f64,
}

fn cholesky_in_place(l: &mut Array2<f64>) -> Result<(), usize> {
    let p = l.nrows();
    let max_diag = (0..p).fold(0.0_f64, |m, i| m.max(l[[i, i]].abs()));
    let tol = max_diag * 1e-14;
    for j in 0..p {
        let mut d = l[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d.is_finite() && d > tol) {
            return Err(j);
        }
        let d = d.sqrt();
        l[[j, j]] = d;
        for i in (j + 1)..p {
            let mut s = l[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / d;
        }
        for i in 0..j {
            l[[i, j]] = 0.0;
        }
    }
    Ok(())
}

impl SpdFactor {
    /// Factor `a`, retrying once with a ridge of `1e-10 * trace(a) / p` on the
    /// diagonal if the plain factorization hits a non-positive pivot.
    pub fn new(a: ArrayView2<f64>) -> Result<Self, SolveError> {
        if a.nrows() != a.ncols() {
            return Err(SolveError::NotSquare(a.nrows(), a.ncols()));
        }
        if let Some(((i, j), _)) = a.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(SolveError::NonFinite(i, j));
        }
        let mut l = a.to_owned();
        match cholesky_in_place(&mut l) {
            Ok(()) => Ok(SpdFactor { l, jitter: 0.0 }),
            Err(_) => {
                let p = a.nrows();
                let trace: f64 = (0..p).map(|i| a[[i, i]]).sum();
                let jitter = 1e-10 * trace / p as f64;
                l.assign(&a);
                for i in 0..p {
                    l[[i, i]] += jitter;
                }
                match cholesky_in_place(&mut l) {
                    Ok(()) => Ok(SpdFactor { l, jitter }),
                    Err(pivot) => Err(SolveError::NotPositiveDefinite { pivot, jitter }),
                }
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.l.nrows()
    }

    /// Solve `A x = b` via forward/back substitution.
    pub fn solve(&self, b: ArrayView1<f64>) -> Array1<f64> {
        let p = self.dim();
        let mut x = b.to_owned();
        for i in 0..p {
            let mut s = x[i];
            for k in 0..i {
                s -= self.l[[i, k]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        for i in (0..p).rev() {
            let mut s = x[i];
            for k in (i + 1)..p {
                s -= self.l[[k, i]] * x[k];
            }
            x[i] = s / self.l[[i, i]];
        }
        x
    }

    /// Solve `A X = B` column by column.
    pub fn solve_mat(&self, b: ArrayView2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros(b.raw_dim());
        for (j, col) in b.columns().into_iter().enumerate() {
            out.column_mut(j).assign(&self.solve(col));
        }
        out
    }

    /// trace(A^{-1} B) for symmetric B of matching dimension.
    pub fn trace_solve(&self, b: ArrayView2<f64>) -> f64 {
        let x = self.solve_mat(b);
        (0..self.dim()).map(|i| x[[i, i]]).sum()
    }
}

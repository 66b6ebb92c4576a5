//! Small dense linear-algebra helpers: Cholesky log-determinant, SPD solves,
//! and QR-based orthogonal initialization. Everything is f64 and unblocked;
//! the matrices involved never exceed a few hundred rows.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{CcError, Result};

/// Cholesky factor L (lower triangular) of a symmetric positive definite matrix.
pub fn cholesky(a: ArrayView2<f64>) -> Result<Array2<f64>> {
    let n = a.nrows();
    if a.ncols() != n {
        return Err(CcError::Shape(format!(
            "cholesky needs a square matrix, got {}x{}",
            n,
            a.ncols()
        )));
    }
    let mut l = Array2::<f64>::zeros((n, n));
    for j in 0..n {
        let mut d = a[[j, j]];
        for k in 0..j {
            d -= l[[j, k]] * l[[j, k]];
        }
        if !(d > 0.0) {
            return Err(CcError::Numeric(format!(
                "matrix not positive definite at pivot {j} (d = {d})"
            )));
        }
        let dj = d.sqrt();
        l[[j, j]] = dj;
        for i in (j + 1)..n {
            let mut s = a[[i, j]];
            for k in 0..j {
                s -= l[[i, k]] * l[[j, k]];
            }
            l[[i, j]] = s / dj;
        }
    }
    Ok(l)
}

/// log det of an SPD matrix via its Cholesky factorization.
pub fn logdet_spd(a: ArrayView2<f64>) -> Result<f64> {
    let l = cholesky(a)?;
    Ok(2.0 * (0..a.nrows()).map(|i| l[[i, i]].ln()).sum::<f64>())
}

/// Solve A x = b for SPD A using a precomputed Cholesky factor.
fn chol_solve_vec(l: &Array2<f64>, b: &Array1<f64>) -> Array1<f64> {
    let n = l.nrows();
    let mut y = b.clone();
    for i in 0..n {
        for k in 0..i {
            let v = y[k];
            y[i] -= l[[i, k]] * v;
        }
        y[i] /= l[[i, i]];
    }
    for i in (0..n).rev() {
        for k in (i + 1)..n {
            let v = y[k];
            y[i] -= l[[k, i]] * v;
        }
        y[i] /= l[[i, i]];
    }
    y
}

/// Solve A X = B column-by-column for SPD A.
pub fn solve_spd(a: ArrayView2<f64>, b: ArrayView2<f64>) -> Result<Array2<f64>> {
    let l = cholesky(a)?;
    let mut out = Array2::<f64>::zeros(b.raw_dim());
    for (j, col) in b.columns().into_iter().enumerate() {
        let x = chol_solve_vec(&l, &col.to_owned());
        out.column_mut(j).assign(&x);
    }
    Ok(out)
}

/// Thin QR via modified Gram-Schmidt; returns Q with orthonormal columns.
pub fn gram_schmidt_q(a: &Array2<f64>) -> Array2<f64> {
    let (n, m) = a.dim();
    assert!(m <= n, "need at least as many rows as columns");
    let mut q = a.clone();
    for j in 0..m {
        for k in 0..j {
            let dot = q.column(k).dot(&q.column(j));
            let qk = q.column(k).to_owned();
            q.column_mut(j).zip_mut_with(&qk, |x, &y| *x -= dot * y);
        }
        let norm = q.column(j).dot(&q.column(j)).sqrt();
        q.column_mut(j).mapv_inplace(|x| x / norm);
    }
    q
}

/// Random matrix with orthonormal columns, drawn from QR of a Gaussian.
pub fn random_orthonormal(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Array2<f64> {
    assert!(cols <= rows);
    let mut g = Array2::<f64>::zeros((rows, cols));
    for v in g.iter_mut() {
        // Box-Muller keeps us off rand_distr for one distribution.
        let u1: f64 = rng.gen_range(1e-12..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        *v = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
    }
    gram_schmidt_q(&g)
}

/// Standard normal sample.
pub fn randn(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(1e-12..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

//! Small dense linear-algebra helpers: power iteration, SPD solves, and
//! orthonormal row bases.

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{OvError, Result};
use crate::tensor::Matrix;

pub const POWER_TOL: f64 = 1e-10;
pub const POWER_MAX_ITER: usize = 1000;
const SQUARINGS: usize = 10;

pub(crate) fn to_na(m: &Matrix) -> DMatrix<f64> {
    DMatrix::from_row_slice(m.rows(), m.cols(), m.as_slice())
}

pub(crate) fn from_na(m: &DMatrix<f64>) -> Matrix {
    Matrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(i, j)])
}

/// Largest absolute eigenvalue of a symmetric matrix by power iteration.
///
/// Converged when successive estimates of `‖A v‖` differ by at most
/// `tol` relative. A zero matrix returns 0.
pub fn spectral_norm_sym(a: &Matrix, tol: f64, max_iter: usize) -> Result<f64> {
    let n = a.rows();
    if n != a.cols() {
        return Err(OvError::Dimension {
            op: "spectral_norm_sym",
            left: a.shape(),
            right: (n, n),
        });
    }
    if n == 0 || a.max_abs() == 0.0 {
        return Ok(0.0);
    }
    // Iterate with A^(2^k) so nearly tied top eigenvalues still separate
    // quickly; the estimate itself is always ‖A v‖.
    let mut b = a.clone();
    for _ in 0..SQUARINGS {
        b = b.matmul(&b)?;
        let m = b.max_abs();
        if m == 0.0 || !m.is_finite() {
            b = a.clone();
            break;
        }
        b = b.scale(1.0 / m);
    }
    // Slightly uneven start so it is not orthogonal to structured eigenvectors.
    let mut v = Matrix::from_fn(n, 1, |i, _| 1.0 + 0.013 * (i as f64 + 1.0).sqrt());
    let nv = v.frobenius_norm();
    v = v.scale(1.0 / nv);
    let mut estimate = 0.0;
    for iter in 0..max_iter {
        let norm = a.matmul(&v)?.frobenius_norm();
        if iter > 0 && (norm - estimate).abs() <= tol * norm {
            return Ok(norm);
        }
        estimate = norm;
        let w = b.matmul(&v)?;
        let wn = w.frobenius_norm();
        if wn == 0.0 {
            // start vector in the null space; restart from a basis vector
            v = Matrix::from_fn(n, 1, |i, _| if i == iter % n { 1.0 } else { 0.0 });
            continue;
        }
        v = w.scale(1.0 / wn);
    }
    Err(OvError::Numeric(format!(
        "power iteration did not converge in {max_iter} iterations (last estimate {estimate})"
    )))
}

/// `‖A‖₂` for a general matrix, via `sqrt(‖AᵀA‖₂)`.
pub fn spectral_norm(a: &Matrix) -> Result<f64> {
    let ata = a.t_matmul(a)?;
    Ok(spectral_norm_sym(&ata, 1e-13, 20_000)?.sqrt())
}

/// Solves `A X = B` for symmetric positive-definite `A` by Cholesky.
pub fn solve_spd(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.rows() != a.cols() || a.rows() != b.rows() {
        return Err(OvError::Dimension {
            op: "solve_spd",
            left: a.shape(),
            right: b.shape(),
        });
    }
    let na = to_na(a);
    let chol = na.clone().cholesky().ok_or_else(|| {
        let diag: Vec<f64> = (0..a.rows()).map(|i| a[(i, i)]).collect();
        let lo = diag.iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = diag.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        OvError::Numeric(format!(
            "Cholesky factorization failed on {}x{} system (diagonal range [{lo:e}, {hi:e}], finite: {})",
            a.rows(),
            a.cols(),
            a.is_finite()
        ))
    })?;
    Ok(from_na(&chol.solve(&to_na(b))))
}

/// `rows × cols` matrix with orthonormal rows (requires `rows <= cols`).
pub fn orthonormal_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Result<Matrix> {
    if rows > cols {
        return Err(OvError::Domain(format!(
            "cannot build {rows} orthonormal rows in dimension {cols}"
        )));
    }
    let mut basis: Vec<Vec<f64>> = Vec::with_capacity(rows);
    while basis.len() < rows {
        let mut v: Vec<f64> = (0..cols).map(|_| rng.sample(StandardNormal)).collect();
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in &basis {
                let d: f64 = v.iter().zip(b).map(|(x, y)| x * y).sum();
                for (x, y) in v.iter_mut().zip(b) {
                    *x -= d * y;
                }
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n < 1e-8 {
            continue;
        }
        basis.push(v.into_iter().map(|x| x / n).collect());
    }
    Matrix::from_rows(&basis)
}

/// Gaussian rows scaled to unit ℓ₂ norm.
pub fn normalized_gaussian_rows<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Matrix {
    let mut m = Matrix::from_fn(rows, cols, |_, _| rng.sample(StandardNormal));
    for i in 0..rows {
        let row = m.row_mut(i);
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 0.0 {
            row.iter_mut().for_each(|x| *x /= n);
        }
    }
    m
}

//! Small dense linear-algebra helpers shared by the estimator and the solvers.

use nalgebra::{DMatrix, SymmetricEigen};

use crate::error::{Error, Result};

/// Condition number above which a diagonal jitter is added before inversion.
pub const JITTER_CONDITION: f64 = 1e12;

/// Returns `(m + m') / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

pub fn frobenius_sq(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

pub fn frobenius(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    frobenius_sq(a, b).sqrt()
}

/// Smallest eigenvalue of the symmetric part of `m`.
pub fn min_eigenvalue(m: &DMatrix<f64>) -> f64 {
    SymmetricEigen::new(symmetrize(m))
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min)
}

/// `a ⪰ b` in the Loewner order, up to an absolute tolerance on the eigenvalues of `a - b`.
pub fn psd_geq(a: &DMatrix<f64>, b: &DMatrix<f64>, tol: f64) -> bool {
    min_eigenvalue(&(a - b)) >= -tol
}

/// Inverse of a symmetric positive-definite matrix via Cholesky.
///
/// When the eigenvalue spread exceeds [`JITTER_CONDITION`] a jitter of
/// `1e-12 * tr(m) / n` is added to the diagonal first. Failure of the
/// factorization after jitter is reported, never clamped.
pub fn spd_inverse(m: &DMatrix<f64>, what: &'static str) -> Result<DMatrix<f64>> {
    let n = m.nrows();
    let mut sym = symmetrize(m);
    let eig = SymmetricEigen::new(sym.clone());
    let (lo, hi) = eig
        .eigenvalues
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    if !(lo.is_finite() && hi.is_finite()) || hi <= 0.0 {
        return Err(Error::NotPositiveDefinite(what));
    }
    if lo <= 0.0 || hi / lo > JITTER_CONDITION {
        let jitter = 1e-12 * sym.trace() / n as f64;
        for i in 0..n {
            sym[(i, i)] += jitter;
        }
    }
    let chol = sym.cholesky().ok_or(Error::NotPositiveDefinite(what))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Principal square root of a symmetric PSD matrix (negative eigenvalues clipped to zero).
pub fn psd_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let d = DMatrix::from_diagonal(&eig.eigenvalues.map(|v| v.max(0.0).sqrt()));
    &eig.eigenvectors * d * eig.eigenvectors.transpose()
}

/// Numerical rank from singular values above `tol`.
pub fn rank(m: &DMatrix<f64>, tol: f64) -> usize {
    m.clone().singular_values().iter().filter(|&&s| s > tol).count()
}

/// Block-diagonal assembly of square or rectangular blocks.
pub fn block_diag(blocks: &[DMatrix<f64>]) -> DMatrix<f64> {
    let rows: usize = blocks.iter().map(|b| b.nrows()).sum();
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let (mut r, mut c) = (0, 0);
    for b in blocks {
        out.view_mut((r, c), (b.nrows(), b.ncols())).copy_from(b);
        r += b.nrows();
        c += b.ncols();
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn inverse_of_spd_matches_identity() {
        let m = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 2.0]);
        let inv = spd_inverse(&m, "test").unwrap();
        let id = &m * &inv;
        assert!((id - DMatrix::identity(3, 3)).norm() < 1e-12);
    }

    #[test]
    fn inverse_rejects_negative_definite() {
        let m = DMatrix::from_diagonal_element(2, 2, -1.0);
        assert!(spd_inverse(&m, "neg").is_err());
    }

    #[test]
    fn ill_conditioned_gets_jitter_but_inverts() {
        let m = DMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![1.0, 1e-14]));
        let inv = spd_inverse(&m, "ill").unwrap();
        assert!(inv.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn sqrt_squares_back() {
        let m = DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0]);
        let s = psd_sqrt(&m);
        assert!((&s * &s - m).norm() < 1e-12);
    }

    #[test]
    fn block_diag_places_blocks() {
        let a = DMatrix::from_element(1, 2, 1.0);
        let b = DMatrix::from_element(2, 1, 2.0);
        let out = block_diag(&[a, b]);
        assert_eq!(out.shape(), (3, 3));
        assert_eq!(out[(0, 1)], 1.0);
        assert_eq!(out[(2, 2)], 2.0);
        assert_eq!(out[(1, 0)], 0.0);
    }
}

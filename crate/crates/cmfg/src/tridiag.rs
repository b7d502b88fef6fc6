//! Thomas algorithm for the tridiagonal systems produced by the implicit
//! time steppers. No pivoting: every matrix assembled in this crate is
//! strictly diagonally dominant by construction.

use crate::error::{CmfgError, Result};

/// Solves `sub[i-1]*x[i-1] + diag[i]*x[i] + sup[i]*x[i+1] = rhs[i]`.
/// `sub` and `sup` have length `n-1`, `diag` and `rhs` length `n`.
pub fn solve(sub: &[f64], diag: &[f64], sup: &[f64], rhs: &[f64]) -> Result<Vec<f64>> {
    let n = diag.len();
    debug_assert_eq!(sub.len(), n - 1);
    debug_assert_eq!(sup.len(), n - 1);
    debug_assert_eq!(rhs.len(), n);

    let mut c = vec![0.0; n - 1];
    let mut d = vec![0.0; n];

    let mut denom = diag[0];
    if denom == 0.0 || !denom.is_finite() {
        return Err(CmfgError::numeric("tridiagonal solve: zero or non-finite pivot at row 0"));
    }
    if n > 1 {
        c[0] = sup[0] / denom;
    }
    d[0] = rhs[0] / denom;

    for i in 1..n {
        denom = diag[i] - sub[i - 1] * c[i - 1];
        if denom == 0.0 || !denom.is_finite() {
            return Err(CmfgError::numeric(format!(
                "tridiagonal solve: zero or non-finite pivot at row {i}"
            )));
        }
        if i < n - 1 {
            c[i] = sup[i] / denom;
        }
        d[i] = (rhs[i] - sub[i - 1] * d[i - 1]) / denom;
    }

    for i in (0..n - 1).rev() {
        let next = d[i + 1];
        d[i] -= c[i] * next;
    }
    Ok(d)
}

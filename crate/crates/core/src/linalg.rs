//! Small dense solves on top of nalgebra.

use nalgebra::{DMatrix, DVector};

/// Condition number above which a solve is reported as ill-conditioned.
pub const CONDITION_WARN: f64 = 1e12;

/// Result of a symmetric solve.
pub struct SymSolve {
    pub x: DVector<f64>,
    /// Solved by pseudo-inverse because the Cholesky factorisation failed.
    pub fallback: bool,
    pub condition: f64,
}

/// Spectral condition number of a symmetric matrix (∞ when singular).
pub fn condition_number(a: &DMatrix<f64>) -> f64 {
    let eig = a.clone().symmetric_eigen();
    let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
    for &v in eig.eigenvalues.iter() {
        lo = lo.min(v.abs());
        hi = hi.max(v.abs());
    }
    if lo == 0.0 {
        f64::INFINITY
    } else {
        hi / lo
    }
}

/// Solves `a x = b` for symmetric positive (semi)definite `a`.
///
/// Uses Cholesky when it succeeds and a least-squares pseudo-inverse
/// otherwise; `None` when even that leaves no usable solution.
pub fn solve_spd(a: &DMatrix<f64>, b: &DVector<f64>) -> Option<SymSolve> {
    let condition = condition_number(a);
    if condition < 1e15 {
        if let Some(ch) = a.clone().cholesky() {
            let x = ch.solve(b);
            if x.iter().all(|v| v.is_finite()) {
                return Some(SymSolve {
                    x,
                    fallback: false,
                    condition,
                });
            }
        }
    }
    let svd = a.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let x = svd.solve(b, max_sv * 1e-12).ok()?;
    x.iter().all(|v| v.is_finite()).then_some(SymSolve {
        x,
        fallback: true,
        condition,
    })
}

/// Inverse of a symmetric positive definite matrix, warning when ill-conditioned.
pub fn spd_inverse(a: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let condition = condition_number(a);
    if condition > CONDITION_WARN {
        log::warn!("matrix condition number {condition:.2e} exceeds {CONDITION_WARN:.0e}");
    }
    if !condition.is_finite() {
        return None;
    }
    a.clone().cholesky().map(|c| c.inverse())
}

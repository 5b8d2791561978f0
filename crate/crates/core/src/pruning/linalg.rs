//! Least-squares reconstruction and the coefficient of determination.

use nalgebra::DMatrix;

use crate::error::{bail, Error, Result};

/// Relative pivot threshold below which the Cholesky route is abandoned for
/// the pseudoinverse.
const CHOLESKY_RCOND: f64 = 1e-10;

/// `W` minimizing `‖Y − W X‖_F` for `X` (`k × M`) and `Y` (`C × M`).
///
/// Solves the normal equations by Cholesky and falls back to the SVD
/// pseudoinverse when `X Xᵀ` is numerically singular.
pub fn least_squares_projection(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if x.ncols() != y.ncols() {
        bail!(Dimension, "X has {} samples but Y has {}", x.ncols(), y.ncols());
    }
    if x.nrows() == 0 {
        bail!(Dimension, "X has no rows");
    }
    if x.iter().all(|&v| v == 0.0) {
        bail!(Rank, "retained features are identically zero");
    }
    if !x.iter().chain(y.iter()).all(|v| v.is_finite()) {
        return Err(Error::NonFinite {
            term: "least squares".into(),
            detail: "features contain NaN or infinity".into(),
        });
    }
    let gram = x * x.transpose();
    if let Some(chol) = gram.clone().cholesky() {
        let d = chol.l_dirty().diagonal();
        let (lo, hi) = d
            .iter()
            .fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        if lo > 0.0 && (lo / hi).powi(2) > CHOLESKY_RCOND {
            let wt = chol.solve(&(x * y.transpose()));
            return Ok(wt.transpose());
        }
    }
    Ok(y * pseudo_inverse(x))
}

/// Moore–Penrose pseudoinverse with the conventional `max(m, n)·σ₁·ε` cutoff.
pub fn pseudo_inverse(a: &DMatrix<f64>) -> DMatrix<f64> {
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let tol = a.nrows().max(a.ncols()) as f64 * smax * f64::EPSILON;
    svd.pseudo_inverse(tol)
        .expect("both singular vector sets were computed")
}

/// `Σ (Y − Ȳ)²` with `Ȳ` the per-row mean.
pub fn total_sum_of_squares(y: &DMatrix<f64>) -> f64 {
    let m = y.ncols() as f64;
    y.row_iter()
        .map(|r| {
            let mean = r.sum() / m;
            r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>()
        })
        .sum()
}

/// `1 − ‖Y − W X‖_F² / ‖Y − Ȳ‖_F²`.
pub fn r_squared(y: &DMatrix<f64>, x: &DMatrix<f64>, w: &DMatrix<f64>) -> Result<f64> {
    if w.nrows() != y.nrows() || w.ncols() != x.nrows() || x.ncols() != y.ncols() {
        bail!(
            Dimension,
            "Y {}x{}, X {}x{}, W {}x{} are inconsistent",
            y.nrows(),
            y.ncols(),
            x.nrows(),
            x.ncols(),
            w.nrows(),
            w.ncols()
        );
    }
    let ss_tot = total_sum_of_squares(y);
    if ss_tot == 0.0 {
        bail!(DegenerateVariance, "every feature channel is constant");
    }
    let ss_res = (y - w * x).norm_squared();
    Ok(1.0 - ss_res / ss_tot)
}

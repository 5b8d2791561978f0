//! Differentiable `1 − R²` penalty on live features.

use nalgebra::DMatrix;

use super::linalg::least_squares_projection;
use crate::autodiff::{Graph, Var};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

/// View of a `[C, ...]` tensor as a `C × N` matrix.
pub fn as_matrix(t: &Tensor) -> Result<DMatrix<f64>> {
    let Some(&c) = t.shape().first() else {
        bail!(Dimension, "cannot view a scalar as a feature matrix");
    };
    Ok(DMatrix::from_row_slice(c, t.numel() / c.max(1), t.data()))
}

/// `‖Y − W X‖² / ‖Y − Ȳ‖²` with `X` the retained rows of `y` and `W`
/// solved from the current value of `y`. `W` is a constant of the graph, so
/// gradients reach `y` only through `X` and `Y` themselves.
pub fn expressivity_loss(g: &mut Graph, y: Var, retained: &[usize]) -> Result<Var> {
    let ym = as_matrix(g.value(y))?;
    let w = least_squares_projection(&ym.select_rows(retained), &ym)?;
    expressivity_loss_with(g, y, retained, &w)
}

/// As [`expressivity_loss`] with an explicit `W` (`C × k`).
pub fn expressivity_loss_with(g: &mut Graph, y: Var, retained: &[usize], w: &DMatrix<f64>) -> Result<Var> {
    let shape = g.value(y).shape().to_vec();
    if shape.len() != 4 {
        bail!(Dimension, "features must be [C, T, H, W], got {:?}", shape);
    }
    let c = shape[0];
    if w.nrows() != c || w.ncols() != retained.len() {
        bail!(
            Dimension,
            "W is {}x{} for {} channels and {} retained",
            w.nrows(),
            w.ncols(),
            c,
            retained.len()
        );
    }
    let mut wt = Vec::with_capacity(c * retained.len());
    for i in 0..c {
        wt.extend(w.row(i).iter());
    }
    let wv = g.constant(Tensor::new(vec![c, retained.len(), 1, 1, 1], wt)?);
    let x = g.select_channels(y, retained)?;
    let fit = g.conv(x, wv, None, [1, 1, 1], 1)?;
    let res = g.sub(y, fit)?;
    let res2 = g.square(res);
    let ss_res = g.sum(res2);
    let cen = g.center_channels(y)?;
    let cen2 = g.square(cen);
    let ss_tot = g.sum(cen2);
    if g.value(ss_tot).item()? == 0.0 {
        bail!(DegenerateVariance, "every feature channel is constant");
    }
    g.div(ss_res, ss_tot)
}

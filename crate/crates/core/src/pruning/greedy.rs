//! Greedy channel selection by marginal R² gain.

use nalgebra::DMatrix;

use super::linalg::{least_squares_projection, total_sum_of_squares};
use crate::error::{bail, Result};

/// Gains closer than this (in R² units) count as ties; the lower index wins.
pub const TIE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Selection {
    /// Retained channels, ascending.
    pub indices: Vec<usize>,
    /// Channels in the order they were picked.
    pub order: Vec<usize>,
    /// Least-squares map from the retained rows to all rows (`C × k`).
    pub w: DMatrix<f64>,
    /// R² after each pick.
    pub r2_trace: Vec<f64>,
}

/// Picks `k` rows of `y` one at a time, each maximizing the R² of the
/// least-squares reconstruction of all rows from the rows picked so far.
///
/// Works on the residual Gram matrix `H = E Eᵀ`, where `E` is the part of
/// `Y` orthogonal to the span of the picked rows. Picking `j` lowers the
/// residual sum of squares by `‖H[:, j]‖² / H[j, j]` and updates `H` by a
/// rank-one Schur complement.
pub fn greedy_select(y: &DMatrix<f64>, k: usize, candidates: Option<&[usize]>) -> Result<Selection> {
    let c = y.nrows();
    if k == 0 || k > c {
        bail!(Contract, "cannot retain {} of {} channels", k, c);
    }
    let pool: Vec<usize> = match candidates {
        Some(cs) => {
            let mut v = cs.to_vec();
            v.sort_unstable();
            v.dedup();
            if let Some(&bad) = v.iter().find(|&&i| i >= c) {
                bail!(Contract, "candidate channel {} is out of range for {} channels", bad, c);
            }
            if v.len() < k {
                bail!(Contract, "{} candidates cannot supply {} channels", v.len(), k);
            }
            v
        }
        None => (0..c).collect(),
    };
    let ss_tot = total_sum_of_squares(y);
    if ss_tot == 0.0 {
        bail!(DegenerateVariance, "every feature channel is constant");
    }
    let gram = y * y.transpose();
    let mut h = gram.clone();
    let mut picked = vec![false; c];
    let mut order = Vec::with_capacity(k);
    let mut trace = Vec::with_capacity(k);
    for _ in 0..k {
        let mut best: Option<(usize, f64)> = None;
        for &j in &pool {
            if picked[j] {
                continue;
            }
            let gain = gain_of(&h, &gram, j) / ss_tot;
            match best {
                Some((_, b)) if gain <= b + TIE_TOLERANCE => {}
                _ => best = Some((j, gain)),
            }
        }
        let (j, _) = best.expect("pool holds at least k unpicked channels");
        picked[j] = true;
        order.push(j);
        let hjj = h[(j, j)];
        if usable_pivot(hjj, gram[(j, j)]) {
            let col = h.column(j).into_owned();
            h -= &col * col.transpose() / hjj;
        }
        let ss_res: f64 = h.diagonal().iter().map(|v| v.max(0.0)).sum();
        trace.push(1.0 - ss_res / ss_tot);
    }
    let mut indices = order.clone();
    indices.sort_unstable();
    let w = least_squares_projection(&y.select_rows(&indices), y)?;
    Ok(Selection {
        indices,
        order,
        w,
        r2_trace: trace,
    })
}

fn usable_pivot(hjj: f64, gjj: f64) -> bool {
    hjj > 1e-12 * gjj && hjj > f64::MIN_POSITIVE
}

fn gain_of(h: &DMatrix<f64>, gram: &DMatrix<f64>, j: usize) -> f64 {
    let hjj = h[(j, j)];
    if !usable_pivot(hjj, gram[(j, j)]) {
        return 0.0;
    }
    h.column(j).norm_squared() / hjj
}

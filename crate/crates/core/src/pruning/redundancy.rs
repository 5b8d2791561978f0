//! Spectrum and similarity summaries of a feature matrix.

use std::fmt::Write as _;

use nalgebra::DMatrix;

use crate::error::{bail, Result};

#[derive(Debug, Clone, PartialEq)]
pub struct RedundancyReport {
    /// Singular values of the row-centered matrix, descending.
    pub singular_values: Vec<f64>,
    /// Cumulative share of variance explained by the leading components.
    pub cumulative_ratio: Vec<f64>,
    /// Cosine similarity of every channel against `reference`.
    pub cosine_similarity: Vec<f64>,
    pub reference: usize,
}

pub fn svd_redundancy(y: &DMatrix<f64>, reference: usize) -> Result<RedundancyReport> {
    let (c, m) = y.shape();
    if reference >= c {
        bail!(
            Contract,
            "reference channel {} out of range for {} channels",
            reference,
            c
        );
    }
    let mut centered = y.clone();
    for mut row in centered.row_iter_mut() {
        let mean = row.sum() / m as f64;
        row.add_scalar_mut(-mean);
    }
    if centered.iter().all(|&v| v == 0.0) {
        bail!(DegenerateVariance, "feature matrix has no variance");
    }
    let mut sv: Vec<f64> = centered.svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| b.total_cmp(a));
    let total: f64 = sv.iter().map(|s| s * s).sum();
    let mut acc = 0.0;
    let mut cumulative: Vec<f64> = sv
        .iter()
        .map(|s| {
            acc += s * s;
            (acc / total).min(1.0)
        })
        .collect();
    if let Some(last) = cumulative.last_mut() {
        *last = 1.0;
    }
    let r = y.row(reference);
    let rn = r.norm();
    let cosine = y
        .row_iter()
        .map(|row| {
            let d = row.norm() * rn;
            if d == 0.0 {
                0.0
            } else {
                row.dot(&r) / d
            }
        })
        .collect();
    Ok(RedundancyReport {
        singular_values: sv,
        cumulative_ratio: cumulative,
        cosine_similarity: cosine,
        reference,
    })
}

impl RedundancyReport {
    /// Components needed to reach `share` of the variance.
    pub fn components_for(&self, share: f64) -> usize {
        self.cumulative_ratio
            .iter()
            .position(|&r| r >= share)
            .map_or(self.cumulative_ratio.len(), |i| i + 1)
    }

    /// One row per index; singular-value columns are empty past the rank
    /// bound `min(C, M)`.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("index,singular_value,cumulative_ratio,cosine_similarity\n");
        let n = self.singular_values.len().max(self.cosine_similarity.len());
        for i in 0..n {
            let sv = self
                .singular_values
                .get(i)
                .map(|v| format!("{v:e}"))
                .unwrap_or_default();
            let cr = self
                .cumulative_ratio
                .get(i)
                .map(|v| format!("{v:.12}"))
                .unwrap_or_default();
            let cs = self
                .cosine_similarity
                .get(i)
                .map(|v| format!("{v:.12}"))
                .unwrap_or_default();
            writeln!(s, "{i},{sv},{cr},{cs}").expect("writing to a String");
        }
        s
    }
}

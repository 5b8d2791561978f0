//! Physical removal of channels.

use std::collections::BTreeMap;

use nalgebra::DMatrix;

use super::{
    least_squares_projection, retained_for_space, FeatureMatrix, ProjectionMatrix, ProjectionTarget, PruneSpec,
};
use crate::decoder::{param_specs, Decoder, ShortcutKind, StageName};
use crate::error::{bail, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Default, PartialEq)]
pub struct PruneReport {
    /// Per pruned stage, the map from its retained channels back to all of
    /// its original channels.
    pub reconstruction: BTreeMap<StageName, ProjectionMatrix>,
    /// First-block shortcuts rebuilt because an endpoint was pruned, keyed by
    /// the consuming stage.
    pub shortcuts: BTreeMap<StageName, ProjectionMatrix>,
}

fn matrix_of_kernel(t: &Tensor) -> DMatrix<f64> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    DMatrix::from_row_slice(r, c, t.data())
}

fn kernel_of_matrix(m: &DMatrix<f64>) -> Tensor {
    let (r, c) = m.shape();
    let data = (0..r)
        .flat_map(|i| m.row(i).iter().copied().collect::<Vec<_>>())
        .collect();
    Tensor::new(vec![r, c, 1, 1, 1], data).expect("shape matches data")
}

/// Removes the channels `spec` drops.
///
/// Convolutions, normalizations and biases keep only retained rows and
/// columns. A first-block shortcut with a pruned endpoint becomes a
/// pointwise convolution `S[R_i, :] · W_prev`, where `S` is the original
/// shortcut (the identity for identity shortcuts) and `W_prev` reconstructs
/// the producing stage's channels from its retained ones.
pub fn apply_prune(
    decoder: &Decoder,
    spec: &PruneSpec,
    features: &BTreeMap<StageName, FeatureMatrix>,
) -> Result<(Decoder, PruneReport)> {
    let cfg = decoder.config();
    spec.validate(cfg)?;
    let mut report = PruneReport::default();
    if spec.is_empty() {
        return Ok((decoder.clone(), report));
    }

    let n = cfg.stages.len();
    let retained: Vec<Option<Vec<usize>>> = cfg
        .stages
        .iter()
        .map(|s| {
            spec.stages
                .get(&s.name)
                .filter(|p| p.is_pruned())
                .map(|p| p.retained.clone())
        })
        .collect();

    let mut full_w: Vec<Option<DMatrix<f64>>> = vec![None; n];
    for (i, keep) in retained.iter().enumerate() {
        let Some(keep) = keep else { continue };
        let name = cfg.stages[i].name;
        let Some(f) = features.get(&name) else {
            bail!(Contract, "no feature matrix supplied for pruned stage '{}'", name);
        };
        if f.channels() != cfg.stages[i].channels_out {
            bail!(
                Dimension,
                "features for '{}' have {} channels, stage has {}",
                name,
                f.channels(),
                cfg.stages[i].channels_out
            );
        }
        let w = least_squares_projection(&f.values.select_rows(keep), &f.values)?;
        report.reconstruction.insert(
            name,
            ProjectionMatrix {
                values: w.clone(),
                retained: keep.clone(),
                target: ProjectionTarget::FullBlock,
            },
        );
        full_w[i] = Some(w);
    }

    let mut new_cfg = cfg.clone();
    for i in 0..n {
        if let Some(keep) = &retained[i] {
            new_cfg.stages[i].channels_out = keep.len();
            new_cfg.stages[i].retained = Some(keep.clone());
        }
        if i > 0 {
            new_cfg.stages[i].channels_in = new_cfg.stages[i - 1].channels_out;
        }
    }

    let mut shortcuts: BTreeMap<usize, (DMatrix<f64>, Tensor)> = BTreeMap::new();
    for i in 0..n {
        let prev_pruned = i > 0 && retained[i - 1].is_some();
        if retained[i].is_none() && !prev_pruned {
            continue;
        }
        let s = &cfg.stages[i];
        let prefix = format!("{}.b0.shortcut", s.name);
        let (s_full, b_full) = match s.shortcut {
            ShortcutKind::Conv1x1 => (
                matrix_of_kernel(decoder.param(&format!("{prefix}.weight"))?),
                decoder.param(&format!("{prefix}.bias"))?.clone(),
            ),
            ShortcutKind::Identity => (
                DMatrix::identity(s.channels_out, s.channels_in),
                Tensor::zeros(&[s.channels_out]),
            ),
        };
        let rows: Vec<usize> = retained[i].clone().unwrap_or_else(|| (0..s.channels_out).collect());
        let prev_keep = if prev_pruned { retained[i - 1].clone() } else { None };
        if s.shortcut == ShortcutKind::Identity && prev_keep == retained[i] {
            continue;
        }
        let mut m = s_full.select_rows(&rows);
        if prev_pruned {
            m = &m * full_w[i - 1].as_ref().expect("pruned stages have a reconstruction");
        }
        report.shortcuts.insert(
            s.name,
            ProjectionMatrix {
                values: m.clone(),
                retained: prev_keep.unwrap_or_else(|| (0..s.channels_in).collect()),
                target: ProjectionTarget::NextBlockRetained,
            },
        );
        new_cfg.stages[i].shortcut = ShortcutKind::Conv1x1;
        shortcuts.insert(i, (m, b_full.select_axis0(&rows)?));
    }

    let mut params = BTreeMap::new();
    for p in param_specs(&new_cfg) {
        if let Some(si) = p.stage {
            if let Some((m, b)) = shortcuts.get(&si) {
                let prefix = format!("{}.b0.shortcut", new_cfg.stages[si].name);
                if p.name == format!("{prefix}.weight") {
                    params.insert(p.name, kernel_of_matrix(m));
                    continue;
                }
                if p.name == format!("{prefix}.bias") {
                    params.insert(p.name, b.clone());
                    continue;
                }
            }
        }
        let mut t = decoder.param(&p.name)?.clone();
        if let Some(rows) = retained_for_space(cfg, spec, p.axis0) {
            t = t.select_axis0(&rows)?;
        }
        if let Some(cols) = p.axis1.and_then(|a| retained_for_space(cfg, spec, a)) {
            t = t.select_axis1(&cols)?;
        }
        params.insert(p.name, t);
    }
    Ok((Decoder::from_parts(new_cfg, params)?, report))
}

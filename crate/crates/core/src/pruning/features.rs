//! Calibration feature collection.

use std::collections::{BTreeMap, BTreeSet};

use nalgebra::DMatrix;
use rand::seq::index::sample;

use crate::decoder::{Decoder, StageName};
use crate::error::{bail, Result};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

/// `C × M` matrix of stage activations, one column per sampled position.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix {
    pub values: DMatrix<f64>,
    pub stage: StageName,
    pub seed: u64,
}

impl FeatureMatrix {
    pub fn channels(&self) -> usize {
        self.values.nrows()
    }

    pub fn samples(&self) -> usize {
        self.values.ncols()
    }
}

/// Pools `[C, T, H, W]` maps and keeps `max_samples` positions drawn
/// without replacement, in ascending position order. All positions are
/// kept when there are no more than `max_samples`.
pub fn features_from_maps(maps: &[Tensor], stage: StageName, max_samples: usize, seed: u64) -> Result<FeatureMatrix> {
    let Some(first) = maps.first() else {
        bail!(Contract, "calibration set for stage '{}' is empty", stage);
    };
    let c = first.dims4()?[0];
    if max_samples < c {
        bail!(
            Contract,
            "stage '{}' has {} channels but only {} samples were requested",
            stage,
            c,
            max_samples
        );
    }
    let mut sizes = Vec::with_capacity(maps.len());
    for m in maps {
        let [mc, t, h, w] = m.dims4()?;
        if mc != c {
            bail!(
                Dimension,
                "calibration maps disagree on channel count ({} vs {})",
                mc,
                c
            );
        }
        sizes.push(t * h * w);
    }
    let total: usize = sizes.iter().sum();
    if total < c {
        bail!(
            Contract,
            "stage '{}' offers {} positions, fewer than its {} channels",
            stage,
            total,
            c
        );
    }
    let positions: Vec<usize> = if total <= max_samples {
        (0..total).collect()
    } else {
        let mut rng = derive_rng(seed, &format!("features/{stage}"));
        let mut v = sample(&mut rng, total, max_samples).into_vec();
        v.sort_unstable();
        v
    };
    let mut values = DMatrix::zeros(c, positions.len());
    let mut map_idx = 0;
    let mut base = 0;
    for (col, &p) in positions.iter().enumerate() {
        while p >= base + sizes[map_idx] {
            base += sizes[map_idx];
            map_idx += 1;
        }
        let n = sizes[map_idx];
        let d = maps[map_idx].data();
        for ch in 0..c {
            values[(ch, col)] = d[ch * n + (p - base)];
        }
    }
    Ok(FeatureMatrix { values, stage, seed })
}

/// Runs the decoder over the calibration latents once and samples features
/// for every requested stage.
pub fn collect_features_multi(
    decoder: &Decoder,
    latents: &[Tensor],
    stages: &BTreeSet<StageName>,
    max_samples: usize,
    seed: u64,
) -> Result<BTreeMap<StageName, FeatureMatrix>> {
    if latents.is_empty() {
        bail!(Contract, "calibration set is empty");
    }
    let mut maps: BTreeMap<StageName, Vec<Tensor>> = BTreeMap::new();
    for z in latents {
        let (_, feats) = decoder.forward(z, stages)?;
        for (s, f) in feats {
            maps.entry(s).or_default().push(f);
        }
    }
    stages
        .iter()
        .map(|s| Ok((*s, features_from_maps(&maps[s], *s, max_samples, seed)?)))
        .collect()
}

pub fn collect_features(
    decoder: &Decoder,
    latents: &[Tensor],
    stage: StageName,
    max_samples: usize,
    seed: u64,
) -> Result<FeatureMatrix> {
    let mut m = collect_features_multi(decoder, latents, &[stage].into(), max_samples, seed)?;
    Ok(m.remove(&stage).expect("requested stage was collected"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_positions_taken_when_budget_allows() {
        let data: Vec<f64> = (0..40).map(|v| v as f64).collect();
        let map = Tensor::new(vec![4, 1, 2, 5], data.clone()).unwrap();
        let f = features_from_maps(&[map], StageName::Mid, 10, 0).unwrap();
        assert_eq!(f.values, DMatrix::from_row_slice(4, 10, &data));
    }

    #[test]
    fn budget_below_channels_is_rejected() {
        let map = Tensor::zeros(&[4, 1, 2, 5]);
        assert!(features_from_maps(&[map], StageName::Mid, 3, 0).is_err());
        assert!(features_from_maps(&[], StageName::Mid, 8, 0).is_err());
    }
}

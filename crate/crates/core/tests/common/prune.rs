use std::collections::BTreeMap;

use flashdec::decoder::{param_specs, Decoder, DecoderConfig, ShortcutKind, Space, StageName};
use flashdec::Tensor;
use nalgebra::DMatrix;
use rand::Rng;

use super::rng;

/// A linear decoder whose `stage` output is exactly `M · X`, where `X` holds
/// the channels at `retained` and `M[retained] = I`.
///
/// Every parameter producing the stage's channels has its dropped rows
/// rewritten as the `M` combination of the retained rows (so biases follow
/// too), and every convolution reading those channels, except the next
/// stage's shortcut, has the dropped columns folded into the retained ones.
/// The full network is unchanged as a function of its stage features, and
/// dropping the channels is lossless everywhere except the shortcut, which
/// must be repaired by the injected least-squares map.
pub struct RankK {
    pub decoder: Decoder,
    pub retained: Vec<usize>,
    pub mix: DMatrix<f64>,
}

pub fn rank_k_decoder(stage: StageName, k: usize, seed: u64) -> RankK {
    let mut cfg = DecoderConfig::with_widths([8, 8, 8, 8, 4], 4, seed);
    cfg.linear = true;
    let si = cfg.stage_index(stage).unwrap();
    // An identity shortcut would add the unconstrained input channels.
    cfg.stages[si].shortcut = ShortcutKind::Conv1x1;
    let base = Decoder::build(cfg.clone()).unwrap();
    let c = cfg.stages[si].channels_out;

    let mut r = rng(seed ^ 0x5eed);
    let mut retained: Vec<usize> = rand::seq::index::sample(&mut r, c, k).into_vec();
    retained.sort_unstable();
    let mut mix = DMatrix::from_fn(c, k, |_, _| r.random_range(-1.0..1.0));
    for (j, &ri) in retained.iter().enumerate() {
        for l in 0..k {
            mix[(ri, l)] = if l == j { 1.0 } else { 0.0 };
        }
    }

    let next_shortcut = cfg.stages.get(si + 1).map(|s| format!("{}.b0.shortcut.weight", s.name));
    let mut params: BTreeMap<String, Tensor> = base.params().clone();
    for p in param_specs(&cfg) {
        let t = params.get_mut(&p.name).unwrap();
        if p.axis0 == Space::Stage(si) {
            let inner: usize = p.shape[1..].iter().product();
            let d = t.data_mut();
            for row in 0..c {
                if retained.contains(&row) {
                    continue;
                }
                for e in 0..inner {
                    d[row * inner + e] = retained
                        .iter()
                        .enumerate()
                        .map(|(j, &rj)| mix[(row, j)] * d[rj * inner + e])
                        .sum();
                }
            }
        }
        if p.axis1 == Some(Space::Stage(si)) && Some(&p.name) != next_shortcut.as_ref() {
            let (co, ci) = (p.shape[0], p.shape[1]);
            let inner: usize = p.shape[2..].iter().product();
            let d = t.data_mut();
            for o in 0..co {
                let at = |col: usize, e: usize| (o * ci + col) * inner + e;
                for e in 0..inner {
                    for (j, &rj) in retained.iter().enumerate() {
                        let extra: f64 = (0..ci)
                            .filter(|col| !retained.contains(col))
                            .map(|col| d[at(col, e)] * mix[(col, j)])
                            .sum();
                        d[at(rj, e)] += extra;
                    }
                    for col in 0..ci {
                        if !retained.contains(&col) {
                            d[at(col, e)] = 0.0;
                        }
                    }
                }
            }
        }
    }
    RankK {
        decoder: Decoder::from_parts(cfg, params).unwrap(),
        retained,
        mix,
    }
}

pub fn calibration(latent_channels: usize, n: usize, seed: u64) -> Vec<Tensor> {
    let mut r = rng(seed);
    (0..n)
        .map(|_| Tensor::randn(&[latent_channels, 2, 2, 2], &mut r))
        .collect()
}

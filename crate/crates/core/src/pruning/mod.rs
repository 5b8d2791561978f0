//! Independence-aware channel pruning.
//!
//! A stage keeps the `k` channels whose features best reconstruct all of
//! its channels by least squares; the reconstruction quality is the
//! coefficient of determination R².

mod apply;
mod expressivity;
mod features;
mod greedy;
mod linalg;
mod mask;
mod redundancy;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

pub use apply::{apply_prune, PruneReport};
pub use expressivity::{as_matrix, expressivity_loss, expressivity_loss_with};
pub use features::{collect_features, collect_features_multi, features_from_maps, FeatureMatrix};
pub use greedy::{greedy_select, Selection, TIE_TOLERANCE};
pub use linalg::{least_squares_projection, pseudo_inverse, r_squared, total_sum_of_squares};
pub use mask::{gradient_mask, GradMask};
pub use redundancy::{svd_redundancy, RedundancyReport};

use crate::decoder::{Decoder, DecoderConfig, Space, StageName};
use crate::error::{bail, Error, Result};
use crate::tensor::Tensor;

pub const DEFAULT_MAX_SAMPLES: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ProjectionTarget {
    /// Retained channels of a stage to all of its channels.
    FullBlock,
    /// Retained channels of a producing stage to the retained channels of
    /// the stage that consumes it.
    NextBlockRetained,
    DistillAdapter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionMatrix {
    /// `C_target × k`.
    pub values: DMatrix<f64>,
    pub retained: Vec<usize>,
    pub target: ProjectionTarget,
}

impl ProjectionMatrix {
    /// As a `[C_target, k, 1, 1, 1]` pointwise kernel.
    pub fn to_kernel(&self) -> Tensor {
        let (r, c) = self.values.shape();
        let data = (0..r)
            .flat_map(|i| self.values.row(i).iter().copied().collect::<Vec<_>>())
            .collect();
        Tensor::new(vec![r, c, 1, 1, 1], data).expect("shape matches data")
    }
}

/// Fraction of channels kept, written `a/b` or as an integer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Ratio {
    pub num: u32,
    pub den: u32,
}

impl Ratio {
    pub const ONE: Ratio = Ratio { num: 1, den: 1 };

    pub fn new(num: u32, den: u32) -> Result<Self> {
        if den == 0 || num == 0 || num > den {
            bail!(Config, "prune ratio {}/{} must lie in (0, 1]", num, den);
        }
        Ok(Self { num, den })
    }

    /// Channels kept out of `c`, rounded to nearest and at least one.
    pub fn retained(self, c: usize) -> usize {
        let n = self.num as usize;
        let d = self.den as usize;
        ((c * n + d / 2) / d).clamp(1, c.max(1))
    }

    pub fn value(self) -> f64 {
        self.num as f64 / self.den as f64
    }

    pub fn is_one(self) -> bool {
        self.num == self.den
    }
}

impl FromStr for Ratio {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("cannot parse prune ratio '{s}'"));
        match s.trim().split_once('/') {
            Some((a, b)) => Ratio::new(
                a.trim().parse().map_err(|_| bad())?,
                b.trim().parse().map_err(|_| bad())?,
            ),
            None => Ratio::new(s.trim().parse().map_err(|_| bad())?, 1),
        }
    }
}

impl TryFrom<String> for Ratio {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Ratio> for String {
    fn from(r: Ratio) -> String {
        r.to_string()
    }
}

impl fmt::Display for Ratio {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StagePrune {
    /// Channel count before pruning.
    pub channels: usize,
    pub retained: Vec<usize>,
    /// R² after each greedy pick, empty when the set was given directly.
    #[serde(default)]
    pub r2_trace: Vec<f64>,
}

impl StagePrune {
    pub fn ratio(&self) -> f64 {
        self.retained.len() as f64 / self.channels as f64
    }

    pub fn is_pruned(&self) -> bool {
        self.retained.len() < self.channels
    }

    pub fn dropped(&self) -> Vec<usize> {
        let keep: BTreeSet<_> = self.retained.iter().collect();
        (0..self.channels).filter(|c| !keep.contains(c)).collect()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PruneSpec {
    pub stages: BTreeMap<StageName, StagePrune>,
}

impl PruneSpec {
    pub fn is_empty(&self) -> bool {
        !self.stages.values().any(StagePrune::is_pruned)
    }

    pub fn pruned_stages(&self) -> BTreeSet<StageName> {
        self.stages
            .iter()
            .filter(|(_, p)| p.is_pruned())
            .map(|(n, _)| *n)
            .collect()
    }

    /// Checks the spec against an unpruned decoder configuration.
    pub fn validate(&self, config: &DecoderConfig) -> Result<()> {
        for (name, p) in &self.stages {
            let s = config.stage(*name)?;
            if s.retained.is_some() {
                bail!(Contract, "stage '{}' is already pruned", name);
            }
            if p.channels != s.channels_out {
                bail!(
                    Contract,
                    "prune spec gives stage '{}' {} channels, decoder has {}",
                    name,
                    p.channels,
                    s.channels_out
                );
            }
            if p.retained.is_empty() {
                bail!(Contract, "stage '{}' retains no channels", name);
            }
            if p.retained.windows(2).any(|w| w[0] >= w[1]) {
                bail!(Contract, "stage '{}' retained indices must strictly increase", name);
            }
            if p.retained.last().is_some_and(|&l| l >= p.channels) {
                bail!(Contract, "stage '{}' retained index out of range", name);
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("prune spec serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Format(format!("prune spec: {e}")))
    }
}

/// Retained indices of the channel space, `None` when it is not pruned.
pub(crate) fn retained_for_space(config: &DecoderConfig, spec: &PruneSpec, space: Space) -> Option<Vec<usize>> {
    let Space::Stage(i) = space else {
        return None;
    };
    spec.stages
        .get(&config.stages[i].name)
        .filter(|p| p.is_pruned())
        .map(|p| p.retained.clone())
}

/// Collects calibration features and runs greedy selection for every stage
/// with a ratio below one.
pub fn plan_prune(
    decoder: &Decoder,
    latents: &[Tensor],
    ratios: &BTreeMap<StageName, Ratio>,
    max_samples: usize,
    seed: u64,
) -> Result<(PruneSpec, BTreeMap<StageName, FeatureMatrix>)> {
    let stages: BTreeSet<StageName> = ratios.iter().filter(|(_, r)| !r.is_one()).map(|(s, _)| *s).collect();
    for s in ratios.keys() {
        decoder.config().stage_index(*s)?;
    }
    let feats = if stages.is_empty() {
        BTreeMap::new()
    } else {
        collect_features_multi(decoder, latents, &stages, max_samples, seed)?
    };
    let mut spec = PruneSpec::default();
    for (name, ratio) in ratios {
        let c = decoder.config().stage(*name)?.channels_out;
        let entry = match feats.get(name) {
            Some(f) => {
                let sel = greedy_select(&f.values, ratio.retained(c), None)?;
                StagePrune {
                    channels: c,
                    retained: sel.indices,
                    r2_trace: sel.r2_trace,
                }
            }
            None => StagePrune {
                channels: c,
                retained: (0..c).collect(),
                r2_trace: Vec::new(),
            },
        };
        spec.stages.insert(*name, entry);
    }
    Ok((spec, feats))
}

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{bail, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageName {
    Mid,
    Up0,
    Up1,
    Up2,
    Up3,
}

impl StageName {
    pub const ALL: [StageName; 5] = [
        StageName::Mid,
        StageName::Up0,
        StageName::Up1,
        StageName::Up2,
        StageName::Up3,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            StageName::Mid => "mid",
            StageName::Up0 => "up0",
            StageName::Up1 => "up1",
            StageName::Up2 => "up2",
            StageName::Up3 => "up3",
        }
    }
}

impl fmt::Display for StageName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for StageName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        StageName::ALL
            .into_iter()
            .find(|n| n.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown stage name '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OperatorKind {
    Causal3d,
    Dwsep3d,
    Conv2d,
}

impl OperatorKind {
    pub fn as_str(self) -> &'static str {
        match self {
            OperatorKind::Causal3d => "causal3d",
            OperatorKind::Dwsep3d => "dwsep3d",
            OperatorKind::Conv2d => "conv2d",
        }
    }
}

impl fmt::Display for OperatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for OperatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "causal3d" => Ok(OperatorKind::Causal3d),
            "dwsep3d" => Ok(OperatorKind::Dwsep3d),
            "conv2d" => Ok(OperatorKind::Conv2d),
            other => Err(Error::Config(format!("unknown operator kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ShortcutKind {
    Identity,
    Conv1x1,
}

/// One decoder stage: optional nearest upsampling followed by residual
/// blocks. Only the first block may change the channel count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StageSpec {
    pub name: StageName,
    pub operator: OperatorKind,
    pub channels_in: usize,
    pub channels_out: usize,
    pub num_blocks: usize,
    /// `(f_t, f_h, f_w)` applied at stage entry.
    pub upsample: [usize; 3],
    /// Shortcut of the first residual block.
    pub shortcut: ShortcutKind,
    /// Original channel indices kept by pruning, `None` when unpruned.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub retained: Option<Vec<usize>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub latent_channels: usize,
    pub output_channels: usize,
    /// Cubic kernel extent `N` of every spatial convolution.
    pub kernel: usize,
    pub stages: Vec<StageSpec>,
    pub norm_groups: usize,
    /// Overall `(d_T, d_H, d_W)` expansion from latent to video.
    pub compression: [usize; 3],
    pub seed: u64,
    /// Replaces normalization and activation by the identity. Used to build
    /// exactly linear decoders in tests.
    #[serde(default)]
    pub linear: bool,
}

fn stage(name: StageName, channels_in: usize, channels_out: usize, upsample: [usize; 3]) -> StageSpec {
    StageSpec {
        name,
        operator: OperatorKind::Causal3d,
        channels_in,
        channels_out,
        num_blocks: 2,
        upsample,
        shortcut: if channels_in == channels_out {
            ShortcutKind::Identity
        } else {
            ShortcutKind::Conv1x1
        },
        retained: None,
    }
}

impl DecoderConfig {
    /// Five-stage miniature decoder with a `(4, 8, 8)` expansion: temporal x2
    /// in `up0` and `up1`, spatial x2 in `up0` through `up2`.
    pub fn reference(seed: u64) -> Self {
        Self::with_widths([32, 32, 16, 16, 8], 8, seed)
    }

    /// The reference topology with custom stage widths.
    pub fn with_widths(widths: [usize; 5], latent_channels: usize, seed: u64) -> Self {
        let [w0, w1, w2, w3, w4] = widths;
        Self {
            latent_channels,
            output_channels: 3,
            kernel: 3,
            stages: vec![
                stage(StageName::Mid, w0, w0, [1, 1, 1]),
                stage(StageName::Up0, w0, w1, [2, 2, 2]),
                stage(StageName::Up1, w1, w2, [2, 2, 2]),
                stage(StageName::Up2, w2, w3, [1, 2, 2]),
                stage(StageName::Up3, w3, w4, [1, 1, 1]),
            ],
            norm_groups: 4,
            compression: [4, 8, 8],
            seed,
            linear: false,
        }
    }

    pub fn stage_index(&self, name: StageName) -> Result<usize> {
        self.stages
            .iter()
            .position(|s| s.name == name)
            .ok_or_else(|| Error::Config(format!("decoder has no stage '{name}'")))
    }

    pub fn stage(&self, name: StageName) -> Result<&StageSpec> {
        Ok(&self.stages[self.stage_index(name)?])
    }

    /// Group count used for a normalization over `channels` channels.
    pub fn groups_for(&self, channels: usize) -> usize {
        gcd(self.norm_groups.max(1), channels.max(1))
    }

    pub fn head_channels(&self) -> usize {
        self.stages.first().map_or(0, |s| s.channels_in)
    }

    pub fn tail_channels(&self) -> usize {
        self.stages.last().map_or(0, |s| s.channels_out)
    }

    pub fn validate(&self) -> Result<()> {
        if self.latent_channels == 0 || self.output_channels == 0 {
            bail!(Config, "latent and output channel counts must be positive");
        }
        if self.kernel == 0 {
            bail!(Config, "kernel extent must be positive");
        }
        if self.stages.is_empty() {
            bail!(Config, "decoder needs at least one stage");
        }
        let mut seen = BTreeSet::new();
        let mut prev_out = None;
        let mut product = [1usize; 3];
        for s in &self.stages {
            if !seen.insert(s.name) {
                bail!(Config, "stage '{}' appears twice", s.name);
            }
            if s.channels_in == 0 || s.channels_out == 0 || s.num_blocks == 0 {
                bail!(Config, "stage '{}' needs positive channels and blocks", s.name);
            }
            if s.upsample.contains(&0) {
                bail!(Config, "stage '{}' upsample factors must be >= 1", s.name);
            }
            if s.name == StageName::Mid && s.upsample != [1, 1, 1] {
                bail!(Config, "stage 'mid' must not upsample");
            }
            if let Some(p) = prev_out {
                if p != s.channels_in {
                    bail!(
                        Config,
                        "stage '{}' expects {} input channels but receives {}",
                        s.name,
                        s.channels_in,
                        p
                    );
                }
            }
            if s.shortcut == ShortcutKind::Identity && s.channels_in != s.channels_out {
                bail!(
                    Config,
                    "stage '{}' maps {} to {} channels through an identity shortcut",
                    s.name,
                    s.channels_in,
                    s.channels_out
                );
            }
            if let Some(r) = &s.retained {
                if r.len() != s.channels_out || r.windows(2).any(|w| w[0] >= w[1]) {
                    bail!(Config, "stage '{}' retained indices are inconsistent", s.name);
                }
            }
            for (p, f) in product.iter_mut().zip(s.upsample) {
                *p *= f;
            }
            prev_out = Some(s.channels_out);
        }
        if product != self.compression {
            bail!(
                Config,
                "stage upsampling {:?} does not realize the declared expansion {:?}",
                product,
                self.compression
            );
        }
        Ok(())
    }

    /// Video extents `(T, H, W)` for latent extents `(T, H, W)`.
    pub fn output_extents(&self, latent: [usize; 3]) -> [usize; 3] {
        [
            latent[0] * self.compression[0],
            latent[1] * self.compression[1],
            latent[2] * self.compression[2],
        ]
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("decoder config serializes")
    }

    /// SHA-256 of the canonical JSON encoding, hex encoded.
    pub fn fingerprint(&self) -> String {
        hex::encode(Sha256::digest(self.to_json().as_bytes()))
    }
}

pub fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn reference_config_is_valid() {
        let c = DecoderConfig::reference(0);
        c.validate().unwrap();
        assert_eq!(c.output_extents([4, 8, 8]), [16, 64, 64]);
    }

    #[test]
    fn mismatched_interface_with_identity_shortcut_is_rejected() {
        let mut c = DecoderConfig::reference(0);
        c.stages[3].channels_in = 32;
        c.stages[3].shortcut = ShortcutKind::Identity;
        assert!(matches!(c.validate(), Err(Error::Config(_))));

        let mut c = DecoderConfig::reference(0);
        c.stages[3].channels_out = 32;
        c.stages[4].channels_in = 32;
        assert!(matches!(c.validate(), Err(Error::Config(_))));
    }

    #[test]
    fn expansion_must_match_stage_factors() {
        let mut c = DecoderConfig::reference(0);
        c.compression = [4, 8, 4];
        assert!(c.validate().is_err());
    }

    #[test]
    fn names_parse_round_trip() {
        for n in StageName::ALL {
            assert_eq!(n.as_str().parse::<StageName>().unwrap(), n);
        }
        assert!("up9".parse::<StageName>().is_err());
    }
}

//! Run configuration file (TOML).

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::data::{LatentKind, TeacherStyle};
use crate::decoder::{DecoderConfig, OperatorKind, ShortcutKind, StageName};
use crate::distill::{AdapterInit, LossWeights, PhaseConfig};
use crate::error::{bail, Error, Result};
use crate::pruning::{Ratio, DEFAULT_MAX_SAMPLES};
use crate::rng::derive_seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DecoderSection {
    pub latent_channels: usize,
    /// Output widths of mid, up0, up1, up2, up3.
    pub widths: [usize; 5],
    pub kernel: usize,
    pub norm_groups: usize,
    pub blocks_per_stage: usize,
}

impl Default for DecoderSection {
    fn default() -> Self {
        Self {
            latent_channels: 8,
            widths: [32, 32, 16, 16, 8],
            kernel: 3,
            norm_groups: 4,
            blocks_per_stage: 2,
        }
    }
}

impl DecoderSection {
    pub fn build(&self, seed: u64) -> Result<DecoderConfig> {
        let mut c = DecoderConfig::with_widths(self.widths, self.latent_channels, seed);
        c.kernel = self.kernel;
        c.norm_groups = self.norm_groups;
        for s in &mut c.stages {
            s.num_blocks = self.blocks_per_stage;
            s.shortcut = if s.channels_in == s.channels_out {
                ShortcutKind::Identity
            } else {
                ShortcutKind::Conv1x1
            };
        }
        c.validate()?;
        Ok(c)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub train: usize,
    pub eval: usize,
    pub latent_extents: [usize; 3],
    pub kind: LatentKind,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            train: 24,
            eval: 8,
            latent_extents: [2, 4, 4],
            kind: LatentKind::Structured,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneSection {
    pub ratios: BTreeMap<StageName, Ratio>,
    pub max_samples: usize,
    /// Training latents used for calibration.
    pub calibration: usize,
}

impl Default for PruneSection {
    fn default() -> Self {
        Self {
            ratios: [
                (StageName::Up2, Ratio { num: 1, den: 4 }),
                (StageName::Up3, Ratio { num: 1, den: 4 }),
            ]
            .into(),
            max_samples: DEFAULT_MAX_SAMPLES,
            calibration: 8,
        }
    }
}

/// Overrides applied on top of a phase's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSection {
    pub steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub weight_decay: Option<f64>,
    pub distill_stages: Option<BTreeSet<StageName>>,
    /// Phase 3 only.
    pub adapter_init: Option<AdapterInit>,
}

impl PhaseSection {
    pub fn resolve(&self, phase: u8) -> Result<PhaseConfig> {
        let mut p = PhaseConfig::default_for(phase);
        if let Some(v) = self.steps {
            p.steps = v;
        }
        if let Some(v) = self.batch_size {
            p.batch_size = v;
        }
        if let Some(v) = self.lr {
            p.lr = v;
        }
        if let Some(v) = self.weight_decay {
            p.weight_decay = v;
        }
        if let Some(v) = &self.distill_stages {
            p.distill_stages = v.clone();
        }
        if phase != 3 && self.adapter_init.is_some() {
            bail!(Config, "adapter_init applies to phase 3 only");
        }
        p.validate()?;
        Ok(p)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchSection {
    pub shapes: Vec<[usize; 3]>,
    pub repeats: usize,
    pub warmup: usize,
}

impl Default for BenchSection {
    fn default() -> Self {
        Self {
            shapes: vec![[2, 4, 4], [2, 8, 8], [4, 8, 8]],
            repeats: 5,
            warmup: 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub decoder: DecoderSection,
    pub teacher: TeacherStyle,
    pub data: DataSection,
    /// Operator per stage for the student.
    pub substitution: BTreeMap<StageName, OperatorKind>,
    pub prune: PruneSection,
    pub loss: LossWeights,
    pub phase1: PhaseSection,
    pub phase2: PhaseSection,
    pub phase3: PhaseSection,
    pub bench: BenchSection,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            decoder: DecoderSection::default(),
            teacher: TeacherStyle::default(),
            data: DataSection::default(),
            substitution: [
                (StageName::Mid, OperatorKind::Dwsep3d),
                (StageName::Up0, OperatorKind::Dwsep3d),
                (StageName::Up1, OperatorKind::Dwsep3d),
                (StageName::Up2, OperatorKind::Conv2d),
                (StageName::Up3, OperatorKind::Conv2d),
            ]
            .into(),
            prune: PruneSection::default(),
            loss: LossWeights::default(),
            phase1: PhaseSection::default(),
            phase2: PhaseSection::default(),
            phase3: PhaseSection::default(),
            bench: BenchSection::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::Config(e.message().to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let dec = self.teacher_config()?;
        self.loss.validate()?;
        for s in self.prune.ratios.keys().chain(self.substitution.keys()) {
            dec.stage_index(*s)?;
        }
        if self.data.train == 0 {
            bail!(Config, "data.train must be positive");
        }
        if self.data.latent_extents.contains(&0) {
            bail!(Config, "data.latent_extents must be positive");
        }
        if self.prune.calibration == 0 || self.prune.calibration > self.data.train {
            bail!(
                Config,
                "prune.calibration must lie in 1..={} (the training set size)",
                self.data.train
            );
        }
        for p in 1..=3 {
            let ph = self.phase(p)?;
            if ph.batch_size > self.data.train {
                bail!(Config, "phase {} batch size exceeds the training set", p);
            }
        }
        Ok(())
    }

    pub fn teacher_config(&self) -> Result<DecoderConfig> {
        self.decoder.build(self.teacher_seed())
    }

    pub fn phase(&self, p: u8) -> Result<PhaseConfig> {
        match p {
            1 => self.phase1.resolve(1),
            2 => self.phase2.resolve(2),
            3 => self.phase3.resolve(3),
            _ => bail!(Config, "phase must be 1, 2 or 3, got {}", p),
        }
    }

    pub fn adapter_init(&self) -> AdapterInit {
        self.phase3.adapter_init.unwrap_or(AdapterInit::Projection)
    }

    pub fn teacher_seed(&self) -> u64 {
        derive_seed(self.seed, "teacher")
    }

    pub fn data_seed(&self) -> u64 {
        derive_seed(self.seed, "data")
    }

    pub fn student_seed(&self) -> u64 {
        derive_seed(self.seed, "student")
    }

    pub fn train_seed(&self, phase: u8) -> u64 {
        derive_seed(self.seed, &format!("phase{phase}"))
    }

    pub fn select_seed(&self) -> u64 {
        derive_seed(self.seed, "select")
    }

    pub fn with_seed(&self, seed: u64) -> Self {
        Self { seed, ..self.clone() }
    }
}

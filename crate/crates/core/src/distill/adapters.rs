//! Pointwise adapters mapping pruned student features to teacher width.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::decoder::store::{read_container, write_container};
use crate::decoder::StageName;
use crate::error::{Error, Result};
use crate::pruning::PruneReport;
use crate::rng::derive_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterInit {
    /// The stored least-squares reconstruction of the pruned stage.
    Projection,
    /// Seeded uniform in `±1/sqrt(k)`.
    Random,
}

impl std::str::FromStr for AdapterInit {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "projection" => Ok(AdapterInit::Projection),
            "random" => Ok(AdapterInit::Random),
            other => Err(Error::Config(format!("unknown adapter init '{other}'"))),
        }
    }
}

/// `[C_teacher, k, 1, 1, 1]` kernels keyed by stage. Stages without an
/// entry use the identity.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Adapters {
    pub kernels: BTreeMap<StageName, Tensor>,
}

impl Adapters {
    pub fn param_name(stage: StageName) -> String {
        format!("adapter.{stage}")
    }

    pub fn is_empty(&self) -> bool {
        self.kernels.is_empty()
    }

    pub fn named(&self) -> Vec<(String, &Tensor)> {
        self.kernels.iter().map(|(s, t)| (Self::param_name(*s), t)).collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let named = self.named();
        let tensors: Vec<_> = named.iter().map(|(n, t)| (n.as_str(), *t)).collect();
        write_container(path, &serde_json::json!({ "section": "adapters" }), &tensors)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let c = read_container(path)?;
        if c.section() != Some("adapters") {
            return Err(Error::Format(format!("{} is not an adapters file", path.display())));
        }
        let mut kernels = BTreeMap::new();
        for (name, t) in c.tensors {
            let stage = name
                .strip_prefix("adapter.")
                .ok_or_else(|| Error::Format(format!("unexpected tensor '{name}' in adapters file")))?;
            let stage: StageName = stage
                .parse()
                .map_err(|_| Error::Format(format!("unknown stage in '{name}'")))?;
            kernels.insert(stage, t);
        }
        Ok(Self { kernels })
    }
}

/// One adapter per pruned stage, initialized from its reconstruction map or
/// at random.
pub fn make_phase3_adapters(report: &PruneReport, init: AdapterInit, seed: u64) -> Adapters {
    let kernels = report
        .reconstruction
        .iter()
        .map(|(stage, w)| {
            let kernel = match init {
                AdapterInit::Projection => w.to_kernel(),
                AdapterInit::Random => {
                    let (c, k) = w.values.shape();
                    let mut rng = derive_rng(seed, &Adapters::param_name(*stage));
                    Tensor::uniform(&[c, k, 1, 1, 1], 1.0 / (k as f64).sqrt(), &mut rng)
                }
            };
            (*stage, kernel)
        })
        .collect();
    Adapters { kernels }
}

//! Update suspension for channels that are about to be removed.

use std::collections::BTreeMap;

use super::{retained_for_space, PruneSpec};
use crate::decoder::Decoder;
use crate::error::Result;

/// Per-parameter element flags; `true` marks an element whose update is
/// suspended. Parameters without an entry update normally.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GradMask {
    frozen: BTreeMap<String, Vec<bool>>,
}

impl GradMask {
    pub fn is_empty(&self) -> bool {
        self.frozen.is_empty()
    }

    pub fn get(&self, name: &str) -> Option<&[bool]> {
        self.frozen.get(name).map(Vec::as_slice)
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.frozen.keys()
    }

    /// Marks every element of `name` frozen.
    pub fn freeze_all(&mut self, name: &str, numel: usize) {
        self.frozen.insert(name.to_string(), vec![true; numel]);
    }

    pub fn frozen_count(&self) -> usize {
        self.frozen.values().map(|v| v.iter().filter(|&&b| b).count()).sum()
    }
}

/// Freezes every parameter slice whose leading (output-channel) index lies
/// in a channel set that `spec` removes.
pub fn gradient_mask(decoder: &Decoder, spec: &PruneSpec) -> Result<GradMask> {
    spec.validate(decoder.config())?;
    let mut mask = GradMask::default();
    for p in decoder.specs() {
        let Some(keep) = retained_for_space(decoder.config(), spec, p.axis0) else {
            continue;
        };
        let rows = p.shape[0];
        let inner: usize = p.shape[1..].iter().product();
        let mut flags = vec![true; rows * inner];
        for &r in &keep {
            flags[r * inner..(r + 1) * inner].fill(false);
        }
        if flags.iter().any(|&f| f) {
            mask.frozen.insert(p.name, flags);
        }
    }
    Ok(mask)
}

//! AdamW with decoupled weight decay and per-element update suspension.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{bail, Result};
use crate::pruning::GradMask;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamWConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub config: AdamWConfig,
    step: u64,
    first: BTreeMap<String, Vec<f64>>,
    second: BTreeMap<String, Vec<f64>>,
}

impl AdamW {
    pub fn new(config: AdamWConfig) -> Self {
        Self {
            config,
            step: 0,
            first: BTreeMap::new(),
            second: BTreeMap::new(),
        }
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter that has a gradient. Frozen elements
    /// of `mask` keep their value and their moments.
    pub fn step<'a>(
        &mut self,
        params: impl IntoIterator<Item = (&'a String, &'a mut Tensor)>,
        grads: &BTreeMap<String, Tensor>,
        mask: &GradMask,
    ) -> Result<()> {
        self.step += 1;
        let c = self.config;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for (name, p) in params {
            let Some(gr) = grads.get(name) else { continue };
            if gr.shape() != p.shape() {
                bail!(
                    Dimension,
                    "gradient for '{}' has shape {:?}, parameter {:?}",
                    name,
                    gr.shape(),
                    p.shape()
                );
            }
            let n = p.numel();
            let m = self.first.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let v = self.second.entry(name.clone()).or_insert_with(|| vec![0.0; n]);
            let frozen = mask.get(name);
            for (i, (w, &g)) in p.data_mut().iter_mut().zip(gr.data()).enumerate() {
                if frozen.is_some_and(|f| f[i]) {
                    continue;
                }
                *w -= c.lr * c.weight_decay * *w;
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g;
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g * g;
                let mh = m[i] / bc1;
                let vh = v[i] / bc2;
                *w -= c.lr * mh / (vh.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut opt = AdamW::new(AdamWConfig {
            weight_decay: 0.0,
            ..Default::default()
        });
        let name = "w".to_string();
        let mut p = Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap();
        let before = p.clone();
        let grads = [(name.clone(), Tensor::zeros(&[3]))].into();
        for _ in 0..5 {
            opt.step([(&name, &mut p)], &grads, &GradMask::default()).unwrap();
        }
        assert_eq!(p, before);
    }
}

//! Reconstruction, structural, perceptual and feature losses on graph
//! values.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, SpatialAxis, Var};
use crate::decoder::StageName;
use crate::error::{bail, Result};

pub const SSIM_WINDOW: usize = 7;
pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;

/// Mean absolute difference.
pub fn l1_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let d = g.sub(a, b)?;
    let d = g.abs(d);
    Ok(g.mean(d))
}

/// Mean SSIM over frames and channels of `[C, T, H, W]` videos in `[0, 1]`,
/// with a uniform window of side `min(7, H, W)` at every valid position.
pub fn ssim(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let [_, _, h, w] = g.value(a).dims4()?;
    if g.value(a).shape() != g.value(b).shape() {
        bail!(
            Dimension,
            "SSIM inputs differ in shape: {:?} vs {:?}",
            g.value(a).shape(),
            g.value(b).shape()
        );
    }
    let win = SSIM_WINDOW.min(h).min(w);
    let mu_a = g.box_filter(a, win)?;
    let mu_b = g.box_filter(b, win)?;
    let aa = g.mul(a, a)?;
    let bb = g.mul(b, b)?;
    let ab = g.mul(a, b)?;
    let e_aa = g.box_filter(aa, win)?;
    let e_bb = g.box_filter(bb, win)?;
    let e_ab = g.box_filter(ab, win)?;
    let mu_a2 = g.mul(mu_a, mu_a)?;
    let mu_b2 = g.mul(mu_b, mu_b)?;
    let mu_ab = g.mul(mu_a, mu_b)?;
    let var_a = g.sub(e_aa, mu_a2)?;
    let var_b = g.sub(e_bb, mu_b2)?;
    let cov = g.sub(e_ab, mu_ab)?;

    let l_num = g.scale(mu_ab, 2.0);
    let l_num = g.add_scalar(l_num, SSIM_C1);
    let c_num = g.scale(cov, 2.0);
    let c_num = g.add_scalar(c_num, SSIM_C2);
    let num = g.mul(l_num, c_num)?;
    let l_den = g.add(mu_a2, mu_b2)?;
    let l_den = g.add_scalar(l_den, SSIM_C1);
    let c_den = g.add(var_a, var_b)?;
    let c_den = g.add_scalar(c_den, SSIM_C2);
    let den = g.mul(l_den, c_den)?;
    let map = g.div(num, den)?;
    Ok(g.mean(map))
}

pub fn ssim_loss(g: &mut Graph, a: Var, b: Var) -> Result<Var> {
    let s = ssim(g, a, b)?;
    let neg = g.scale(s, -1.0);
    Ok(g.add_scalar(neg, 1.0))
}

/// Pluggable perceptual distance between two videos.
pub trait Perceptual {
    fn loss(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var>;
}

/// Mean L1 distance between spatial gradient magnitudes
/// `sqrt(dx² + dy² + eps)`, averaged over dyadic scales obtained by 2x2
/// average pooling. Coarse scales whose frames shrink below 2x2 are skipped.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradientPerceptual {
    pub scales: usize,
    pub eps: f64,
}

impl Default for GradientPerceptual {
    fn default() -> Self {
        Self { scales: 3, eps: 1e-6 }
    }
}

impl GradientPerceptual {
    fn magnitude(&self, g: &mut Graph, x: Var) -> Result<Var> {
        let dx = g.spatial_diff(x, SpatialAxis::Width)?;
        let dy = g.spatial_diff(x, SpatialAxis::Height)?;
        let dx2 = g.square(dx);
        let dy2 = g.square(dy);
        let s = g.add(dx2, dy2)?;
        let s = g.add_scalar(s, self.eps);
        Ok(g.sqrt(s))
    }
}

impl Perceptual for GradientPerceptual {
    fn loss(&self, g: &mut Graph, a: Var, b: Var) -> Result<Var> {
        let (mut a, mut b) = (a, b);
        let mut terms = Vec::new();
        for s in 0..self.scales.max(1) {
            if s > 0 {
                let [_, _, h, w] = g.value(a).dims4()?;
                if h < 4 || w < 4 {
                    break;
                }
                a = g.avg_pool2(a)?;
                b = g.avg_pool2(b)?;
            }
            let ma = self.magnitude(g, a)?;
            let mb = self.magnitude(g, b)?;
            terms.push(l1_loss(g, ma, mb)?);
        }
        let mut acc = terms[0];
        for &t in &terms[1..] {
            acc = g.add(acc, t)?;
        }
        Ok(g.scale(acc, 1.0 / terms.len() as f64))
    }
}

/// `σ` of the distillation loss for one stage.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum AdapterVar {
    Identity,
    /// `[C_teacher, C_student, 1, 1, 1]` pointwise kernel.
    Conv1x1(Var),
}

/// `Σ_l (1 / numel(f_l)) Σ_i |σ(f_l)_i − t_l,i|`, normalized by the student
/// feature size.
pub fn distill_loss(
    g: &mut Graph,
    student: &BTreeMap<StageName, Var>,
    teacher: &BTreeMap<StageName, Var>,
    adapters: &BTreeMap<StageName, AdapterVar>,
) -> Result<Var> {
    if !student.keys().eq(teacher.keys()) {
        bail!(
            Contract,
            "student stages {:?} and teacher stages {:?} differ",
            student.keys().collect::<Vec<_>>(),
            teacher.keys().collect::<Vec<_>>()
        );
    }
    let mut total: Option<Var> = None;
    for (name, &fs) in student {
        let ft = teacher[name];
        let numel = g.value(fs).numel();
        let mapped = match adapters.get(name).copied().unwrap_or(AdapterVar::Identity) {
            AdapterVar::Identity => fs,
            AdapterVar::Conv1x1(w) => g.conv(fs, w, None, [1, 1, 1], 1)?,
        };
        if g.value(mapped).shape() != g.value(ft).shape() {
            bail!(
                Contract,
                "stage '{}': adapted student feature {:?} does not match teacher {:?}",
                name,
                g.value(mapped).shape(),
                g.value(ft).shape()
            );
        }
        let d = g.sub(mapped, ft)?;
        let d = g.abs(d);
        let s = g.sum(d);
        let term = g.scale(s, 1.0 / numel as f64);
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(match total {
        Some(t) => t,
        None => g.constant(crate::Tensor::scalar(0.0)),
    })
}

/// Loss coefficients.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub l1: f64,
    pub perceptual: f64,
    pub distill: f64,
    pub ssim: f64,
    pub expressivity: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            l1: 10.0,
            perceptual: 2.0,
            distill: 1.0,
            ssim: 5.0,
            expressivity: 1.0,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        for (n, v) in [
            ("l1", self.l1),
            ("perceptual", self.perceptual),
            ("distill", self.distill),
            ("ssim", self.ssim),
            ("expressivity", self.expressivity),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                bail!(Config, "loss weight '{}' must be finite and non-negative, got {}", n, v);
            }
        }
        Ok(())
    }
}

/// Component losses of one objective; `ssim` holds `1 − SSIM`.
#[derive(Debug, Clone, Copy)]
pub struct LossTerms {
    pub l1: Var,
    pub perceptual: Var,
    pub distill: Var,
    pub ssim: Var,
    pub expressivity: Option<Var>,
}

/// `α1 L1 + α2 Lp + α3 Ld + α4 Lssim`, plus `α5 Lce` when an expressivity
/// term is present.
pub fn total_loss(g: &mut Graph, w: &LossWeights, t: &LossTerms) -> Result<Var> {
    let mut acc = g.scale(t.l1, w.l1);
    for (v, a) in [(t.perceptual, w.perceptual), (t.distill, w.distill), (t.ssim, w.ssim)] {
        let s = g.scale(v, a);
        acc = g.add(acc, s)?;
    }
    if let Some(ce) = t.expressivity {
        let s = g.scale(ce, w.expressivity);
        acc = g.add(acc, s)?;
    }
    Ok(acc)
}

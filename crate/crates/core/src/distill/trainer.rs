//! Phase orchestration.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::adapters::Adapters;
use super::losses::{
    distill_loss, l1_loss, ssim_loss, total_loss, AdapterVar, GradientPerceptual, LossTerms, LossWeights, Perceptual,
};
use super::optim::{AdamW, AdamWConfig};
use crate::autodiff::{Graph, Var};
use crate::data::Sample;
use crate::decoder::{Decoder, StageName};
use crate::error::{bail, Error, Result};
use crate::pruning::{expressivity_loss, gradient_mask, GradMask, PruneSpec};
use crate::rng::derive_rng;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AdapterKind {
    Identity,
    Conv1x1,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseConfig {
    pub phase: u8,
    pub distill_stages: BTreeSet<StageName>,
    pub adapter: AdapterKind,
    pub mask: bool,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
}

impl PhaseConfig {
    pub const DEEP: [StageName; 3] = [StageName::Mid, StageName::Up0, StageName::Up1];
    pub const SHALLOW: [StageName; 2] = [StageName::Up2, StageName::Up3];

    pub fn default_for(phase: u8) -> Self {
        let (stages, adapter, mask, steps): (&[StageName], _, _, _) = match phase {
            1 => (&Self::DEEP, AdapterKind::Identity, false, 200),
            2 => (&Self::DEEP, AdapterKind::Identity, true, 200),
            _ => (&Self::SHALLOW, AdapterKind::Conv1x1, false, 400),
        };
        Self {
            phase,
            distill_stages: stages.iter().copied().collect(),
            adapter,
            mask,
            steps,
            batch_size: 2,
            lr: 1e-4,
            weight_decay: 1e-4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self.phase {
            1 if self.adapter != AdapterKind::Identity || self.mask => {
                bail!(Config, "phase 1 uses identity adapters and no gradient mask")
            }
            2 if self.adapter != AdapterKind::Identity || !self.mask => {
                bail!(Config, "phase 2 uses identity adapters and the gradient mask")
            }
            3 if self.adapter != AdapterKind::Conv1x1 || self.mask => {
                bail!(Config, "phase 3 uses pointwise adapters and no gradient mask")
            }
            1..=3 => {}
            p => bail!(Config, "phase must be 1, 2 or 3, got {}", p),
        }
        if self.batch_size == 0 {
            bail!(Config, "batch size must be positive");
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) || !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            bail!(Config, "learning rate and weight decay must be finite and non-negative");
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..AdamWConfig::default()
        }
    }
}

/// Loss values of one step, before the update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossRow {
    pub step: usize,
    pub total: f64,
    pub l1: f64,
    pub perceptual: f64,
    pub distill: f64,
    /// `1 − SSIM`.
    pub ssim: f64,
    pub ce: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct History {
    pub rows: Vec<LossRow>,
}

impl History {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,total,l1,perceptual,distill,ssim,ce\n");
        for r in &self.rows {
            writeln!(
                s,
                "{},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e},{:.17e}",
                r.step, r.total, r.l1, r.perceptual, r.distill, r.ssim, r.ce
            )
            .expect("writing to a String");
        }
        s
    }

    /// First step whose total loss is at or below `threshold`.
    pub fn steps_to(&self, threshold: f64) -> Option<usize> {
        self.rows.iter().find(|r| r.total <= threshold).map(|r| r.step)
    }

    /// Trailing mean of the total loss over up to `window` steps.
    pub fn smoothed(&self, window: usize) -> Vec<f64> {
        let w = window.max(1);
        let mut acc = 0.0;
        let mut out = Vec::with_capacity(self.rows.len());
        for (i, r) in self.rows.iter().enumerate() {
            acc += r.total;
            if i >= w {
                acc -= self.rows[i - w].total;
            }
            out.push(acc / (i + 1).min(w) as f64);
        }
        out
    }

    /// First step whose smoothed loss is at or below `threshold`. Only
    /// steps with a full window count.
    pub fn steps_to_smoothed(&self, threshold: f64, window: usize) -> Option<usize> {
        let w = window.max(1);
        self.smoothed(w)
            .iter()
            .enumerate()
            .skip(w - 1)
            .find(|(_, &v)| v <= threshold)
            .map(|(i, _)| self.rows[i].step)
    }
}

/// Everything a phase needs besides the student.
pub struct PhaseInputs<'a> {
    pub teacher: &'a Decoder,
    pub train: &'a [Sample],
    pub weights: LossWeights,
    /// Retained channels of the stages that will be pruned. Required in
    /// phase 2, where it drives the gradient mask and the expressivity term.
    pub prune: Option<&'a PruneSpec>,
    pub perceptual: &'a dyn Perceptual,
    pub seed: u64,
}

impl<'a> PhaseInputs<'a> {
    pub fn new(teacher: &'a Decoder, train: &'a [Sample], seed: u64) -> Self {
        static DEFAULT: GradientPerceptual = GradientPerceptual { scales: 3, eps: 1e-6 };
        Self {
            teacher,
            train,
            weights: LossWeights::default(),
            prune: None,
            perceptual: &DEFAULT,
            seed,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PhaseOutcome {
    pub student: Decoder,
    pub adapters: Adapters,
    pub history: History,
}

struct Plan {
    distill: BTreeSet<StageName>,
    ce: BTreeMap<StageName, Vec<usize>>,
    mask: GradMask,
    teacher_feats: Vec<BTreeMap<StageName, Tensor>>,
}

fn prepare(student: &Decoder, adapters: &Adapters, phase: &PhaseConfig, inp: &PhaseInputs) -> Result<Plan> {
    phase.validate()?;
    inp.weights.validate()?;
    for s in &phase.distill_stages {
        student.config().stage_index(*s)?;
        inp.teacher.config().stage_index(*s)?;
    }
    let mut ce = BTreeMap::new();
    let mut mask = GradMask::default();
    match phase.phase {
        2 => {
            let Some(spec) = inp.prune else {
                bail!(Contract, "phase 2 needs the retained channel sets");
            };
            if phase.mask {
                mask = gradient_mask(student, spec)?;
            }
            for (name, p) in &spec.stages {
                if p.is_pruned() {
                    ce.insert(*name, p.retained.clone());
                }
            }
        }
        3 => {
            for s in &phase.distill_stages {
                let pruned = student.config().stage(*s)?.retained.is_some();
                if pruned && !adapters.kernels.contains_key(s) {
                    bail!(Contract, "pruned stage '{}' is distilled without an adapter", s);
                }
            }
        }
        _ => {}
    }
    let teacher_feats = inp
        .train
        .par_iter()
        .map(|s| Ok(inp.teacher.forward(&s.latent, &phase.distill_stages)?.1))
        .collect::<Result<Vec<_>>>()?;
    Ok(Plan {
        distill: phase.distill_stages.clone(),
        ce,
        mask,
        teacher_feats,
    })
}

struct BatchGraph {
    graph: Graph,
    total: Var,
    row: LossRow,
    params: BTreeMap<String, Var>,
}

fn check_finite(term: &str, v: f64, step: usize) -> Result<()> {
    if v.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            term: term.into(),
            detail: format!("value {v} at step {step}"),
        })
    }
}

fn build_batch(
    student: &Decoder,
    adapters: &Adapters,
    plan: &Plan,
    inp: &PhaseInputs,
    batch: &[usize],
    step: usize,
) -> Result<BatchGraph> {
    let mut g = Graph::new();
    let bound = student.bind(&mut g, true);
    let mut params: BTreeMap<String, Var> = bound.iter().map(|(n, v)| (n.clone(), *v)).collect();
    let mut adapter_vars = BTreeMap::new();
    for (stage, k) in &adapters.kernels {
        let v = g.param(k.clone());
        params.insert(Adapters::param_name(*stage), v);
        adapter_vars.insert(*stage, AdapterVar::Conv1x1(v));
    }
    let capture: BTreeSet<StageName> = plan.distill.iter().chain(plan.ce.keys()).copied().collect();
    let mut sums: [Option<Var>; 4] = [None; 4];
    let mut ce_feats: BTreeMap<StageName, Vec<Var>> = BTreeMap::new();
    for &i in batch {
        let s = &inp.train[i];
        let z = g.constant(s.latent.clone());
        let (y, feats) = student.forward_graph(&mut g, &bound, z, &capture)?;
        let target = g.constant(s.target.clone());
        let l1 = l1_loss(&mut g, y, target)?;
        let perc = inp.perceptual.loss(&mut g, y, target)?;
        let ss = ssim_loss(&mut g, y, target)?;
        let student_d: BTreeMap<_, _> = plan.distill.iter().map(|n| (*n, feats[n])).collect();
        let teacher_d: BTreeMap<_, _> = plan.teacher_feats[i]
            .iter()
            .map(|(n, t)| (*n, g.constant(t.clone())))
            .collect();
        let d = distill_loss(&mut g, &student_d, &teacher_d, &adapter_vars)?;
        for (slot, v) in sums.iter_mut().zip([l1, perc, d, ss]) {
            *slot = Some(match *slot {
                Some(acc) => g.add(acc, v)?,
                None => v,
            });
        }
        for n in plan.ce.keys() {
            ce_feats.entry(*n).or_default().push(feats[n]);
        }
    }
    let inv = 1.0 / batch.len() as f64;
    let [l1, perc, d, ss] = sums.map(|v| g.scale(v.expect("batch is not empty"), inv));
    let mut ce: Option<Var> = None;
    for (n, keep) in &plan.ce {
        let y = g.concat_frames(&ce_feats[n])?;
        let term = expressivity_loss(&mut g, y, keep)?;
        ce = Some(match ce {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let terms = LossTerms {
        l1,
        perceptual: perc,
        distill: d,
        ssim: ss,
        expressivity: ce,
    };
    let total = total_loss(&mut g, &inp.weights, &terms)?;
    let val = |v: Var| g.value(v).item();
    let row = LossRow {
        step,
        total: val(total)?,
        l1: val(l1)?,
        perceptual: val(perc)?,
        distill: val(d)?,
        ssim: val(ss)?,
        ce: ce.map(val).transpose()?.unwrap_or(0.0),
    };
    for (name, v) in [
        ("l1", row.l1),
        ("perceptual", row.perceptual),
        ("distill", row.distill),
        ("ssim", row.ssim),
        ("expressivity", row.ce),
        ("total", row.total),
    ] {
        check_finite(name, v, step)?;
    }
    Ok(BatchGraph {
        graph: g,
        total,
        row,
        params,
    })
}

/// Seeded shuffle per epoch; each batch is sorted and the ragged tail is
/// dropped.
fn batches(n: usize, batch: usize, steps: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    if n < batch {
        bail!(Contract, "{} training samples cannot fill a batch of {}", n, batch);
    }
    let per_epoch = n / batch;
    let mut out = Vec::with_capacity(steps);
    let mut epoch = 0;
    while out.len() < steps {
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut derive_rng(seed, &format!("batches/{epoch}")));
        for b in 0..per_epoch {
            if out.len() == steps {
                break;
            }
            let mut idx = order[b * batch..(b + 1) * batch].to_vec();
            idx.sort_unstable();
            out.push(idx);
        }
        epoch += 1;
    }
    Ok(out)
}

/// Trains `student` (and any adapters) for one phase.
pub fn run_phase(student: Decoder, adapters: Adapters, phase: &PhaseConfig, inp: &PhaseInputs) -> Result<PhaseOutcome> {
    let mut student = student;
    let mut adapters = adapters;
    let plan = prepare(&student, &adapters, phase, inp)?;
    let mut opt = AdamW::new(phase.optimizer());
    let mut history = History::default();
    let schedule = batches(inp.train.len(), phase.batch_size, phase.steps, inp.seed)?;
    for (step, batch) in schedule.iter().enumerate() {
        let bg = build_batch(&student, &adapters, &plan, inp, batch, step)?;
        let mut grads = bg.graph.backward(bg.total)?;
        let mut named = BTreeMap::new();
        for (name, v) in &bg.params {
            if let Some(t) = grads.take(*v) {
                named.insert(name.clone(), t);
            }
        }
        drop(bg.graph);
        let adapter_names: BTreeMap<String, StageName> = adapters
            .kernels
            .keys()
            .map(|s| (Adapters::param_name(*s), *s))
            .collect();
        let mut adapter_params: BTreeMap<String, Tensor> = adapters
            .kernels
            .iter()
            .map(|(s, t)| (Adapters::param_name(*s), t.clone()))
            .collect();
        opt.step(
            student.params_mut().iter_mut().chain(adapter_params.iter_mut()),
            &named,
            &plan.mask,
        )?;
        for (name, t) in adapter_params {
            adapters.kernels.insert(adapter_names[&name], t);
        }
        history.rows.push(bg.row);
    }
    Ok(PhaseOutcome {
        student,
        adapters,
        history,
    })
}

/// Mean objective over all of `inp.train` without updating anything.
pub fn evaluate_objective(
    student: &Decoder,
    adapters: &Adapters,
    phase: &PhaseConfig,
    inp: &PhaseInputs,
) -> Result<LossRow> {
    let plan = prepare(student, adapters, phase, inp)?;
    let all: Vec<usize> = (0..inp.train.len()).collect();
    if all.is_empty() {
        bail!(Contract, "no samples to evaluate");
    }
    Ok(build_batch(student, adapters, &plan, inp, &all, 0)?.row)
}

//! The full compression pipeline: substitute operators, distill deep
//! stages, select channels, train with the gradient mask, prune, and
//! recover through adapters.

use std::collections::BTreeMap;

use rayon::prelude::*;

use crate::config::RunConfig;
use crate::cost::{block_breakdown, CostReport};
use crate::data::{gen_dataset, make_teacher_with, Dataset, Sample};
use crate::decoder::{Decoder, StageName};
use crate::distill::{make_phase3_adapters, run_phase, AdapterInit, Adapters, History, PhaseInputs, PhaseOutcome};
use crate::error::Result;
use crate::metrics::{evaluate_videos, EvalReport};
use crate::pruning::{apply_prune, collect_features_multi, plan_prune, FeatureMatrix, PruneReport, PruneSpec};
use crate::tensor::Tensor;

pub struct Prepared {
    pub teacher: Decoder,
    pub dataset: Dataset,
    pub train_len: usize,
}

impl Prepared {
    pub fn train(&self) -> &[Sample] {
        &self.dataset.samples[..self.train_len]
    }

    pub fn eval(&self) -> &[Sample] {
        &self.dataset.samples[self.train_len..]
    }

    pub fn calibration(&self, cfg: &RunConfig) -> Vec<Tensor> {
        self.train()[..cfg.prune.calibration]
            .iter()
            .map(|s| s.latent.clone())
            .collect()
    }
}

pub fn prepare(cfg: &RunConfig) -> Result<Prepared> {
    cfg.validate()?;
    let teacher = make_teacher_with(&cfg.teacher_config()?, cfg.teacher_seed(), &cfg.teacher)?;
    let dataset = gen_dataset(
        &teacher,
        cfg.data.train + cfg.data.eval,
        cfg.data.latent_extents,
        cfg.data_seed(),
        cfg.data.kind,
    )?;
    Ok(Prepared {
        teacher,
        dataset,
        train_len: cfg.data.train,
    })
}

/// Rebuilds the train/eval view around an existing teacher and dataset.
pub fn prepared_from(cfg: &RunConfig, teacher: Decoder, dataset: Dataset) -> Result<Prepared> {
    cfg.validate()?;
    dataset.check_teacher(&teacher)?;
    dataset.split(cfg.data.train)?;
    Ok(Prepared {
        teacher,
        dataset,
        train_len: cfg.data.train,
    })
}

pub fn substitute(cfg: &RunConfig, teacher: &Decoder) -> Result<Decoder> {
    teacher.substitute_operators(&cfg.substitution, cfg.student_seed())
}

pub fn evaluate_split(student: &Decoder, samples: &[Sample]) -> Result<EvalReport> {
    let outputs = samples
        .par_iter()
        .map(|s| student.decode(&s.latent))
        .collect::<Result<Vec<_>>>()?;
    let targets: Vec<Tensor> = samples.iter().map(|s| s.target.clone()).collect();
    evaluate_videos(&outputs, &targets)
}

fn inputs<'a>(cfg: &RunConfig, prep: &'a Prepared, phase: u8) -> PhaseInputs<'a> {
    let mut inp = PhaseInputs::new(&prep.teacher, prep.train(), cfg.train_seed(phase));
    inp.weights = cfg.loss;
    inp
}

pub fn train_phase1(cfg: &RunConfig, prep: &Prepared, student: Decoder) -> Result<PhaseOutcome> {
    run_phase(student, Adapters::default(), &cfg.phase(1)?, &inputs(cfg, prep, 1))
}

pub fn select(cfg: &RunConfig, prep: &Prepared, student: &Decoder) -> Result<PruneSpec> {
    Ok(plan_prune(
        student,
        &prep.calibration(cfg),
        &cfg.prune.ratios,
        cfg.prune.max_samples,
        cfg.select_seed(),
    )?
    .0)
}

pub fn train_phase2(cfg: &RunConfig, prep: &Prepared, student: Decoder, spec: &PruneSpec) -> Result<PhaseOutcome> {
    let mut inp = inputs(cfg, prep, 2);
    inp.prune = Some(spec);
    run_phase(student, Adapters::default(), &cfg.phase(2)?, &inp)
}

/// Features of the pruned stages on the calibration latents.
pub fn calibration_features(
    cfg: &RunConfig,
    prep: &Prepared,
    student: &Decoder,
    spec: &PruneSpec,
) -> Result<BTreeMap<StageName, FeatureMatrix>> {
    let stages = spec.pruned_stages();
    if stages.is_empty() {
        return Ok(BTreeMap::new());
    }
    collect_features_multi(
        student,
        &prep.calibration(cfg),
        &stages,
        cfg.prune.max_samples,
        cfg.select_seed(),
    )
}

pub fn prune(cfg: &RunConfig, prep: &Prepared, student: &Decoder, spec: &PruneSpec) -> Result<(Decoder, PruneReport)> {
    let feats = calibration_features(cfg, prep, student, spec)?;
    apply_prune(student, spec, &feats)
}

/// Adapters of stages that phase 3 does not distill are discarded.
pub fn train_phase3(cfg: &RunConfig, prep: &Prepared, pruned: Decoder, adapters: Adapters) -> Result<PhaseOutcome> {
    let phase = cfg.phase(3)?;
    let adapters = Adapters {
        kernels: adapters
            .kernels
            .into_iter()
            .filter(|(s, _)| phase.distill_stages.contains(s))
            .collect(),
    };
    run_phase(pruned, adapters, &phase, &inputs(cfg, prep, 3))
}

pub struct PipelineResult {
    pub substituted: Decoder,
    pub after_phase1: Decoder,
    pub after_phase2: Decoder,
    pub spec: PruneSpec,
    pub report: PruneReport,
    pub student: Decoder,
    pub adapters: Adapters,
    pub histories: [History; 3],
    pub eval_substituted: EvalReport,
    pub eval_final: EvalReport,
    pub teacher_cost: CostReport,
    pub student_cost: CostReport,
}

impl PipelineResult {
    /// Teacher over student convolution cost.
    pub fn flop_reduction(&self) -> f64 {
        self.teacher_cost.total_macs() as f64 / self.student_cost.total_macs() as f64
    }
}

pub fn run_pipeline(cfg: &RunConfig, prep: &Prepared) -> Result<PipelineResult> {
    run_pipeline_with(cfg, prep, cfg.adapter_init())
}

pub fn run_pipeline_with(cfg: &RunConfig, prep: &Prepared, init: AdapterInit) -> Result<PipelineResult> {
    let substituted = substitute(cfg, &prep.teacher)?;
    let eval_substituted = evaluate_split(&substituted, prep.eval())?;
    let p1 = train_phase1(cfg, prep, substituted.clone())?;
    let spec = select(cfg, prep, &p1.student)?;
    let p2 = train_phase2(cfg, prep, p1.student.clone(), &spec)?;
    let (pruned, report) = prune(cfg, prep, &p2.student, &spec)?;
    let adapters = make_phase3_adapters(&report, init, cfg.student_seed());
    let p3 = train_phase3(cfg, prep, pruned, adapters)?;
    let eval_final = evaluate_split(&p3.student, prep.eval())?;
    let e = cfg.data.latent_extents;
    Ok(PipelineResult {
        teacher_cost: block_breakdown(&prep.teacher, e, None)?,
        student_cost: block_breakdown(&p3.student, e, None)?,
        substituted,
        after_phase1: p1.student,
        after_phase2: p2.student,
        spec,
        report,
        student: p3.student,
        adapters: p3.adapters,
        histories: [p1.history, p2.history, p3.history],
        eval_substituted,
        eval_final,
    })
}

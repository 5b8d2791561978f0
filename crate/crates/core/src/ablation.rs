//! Toy-scale reproductions of the three ablation protocols: pruning ratio,
//! adapter initialization and which stages receive feature distillation.

use std::collections::BTreeSet;
use std::fmt::{self, Write as _};
use std::str::FromStr;

use crate::config::RunConfig;
use crate::cost::{block_breakdown, count_params};
use crate::decoder::StageName;
use crate::distill::{make_phase3_adapters, AdapterInit, History, PhaseConfig};
use crate::error::{Error, Result};
use crate::pipeline::{
    evaluate_split, prepare, prune, run_pipeline, select, substitute, train_phase1, train_phase2, train_phase3,
};
use crate::pruning::Ratio;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Ablation {
    PruneRatio,
    AdapterInit,
    DistillLayers,
}

impl FromStr for Ablation {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "prune_ratio" => Ok(Ablation::PruneRatio),
            "adapter_init" => Ok(Ablation::AdapterInit),
            "distill_layers" => Ok(Ablation::DistillLayers),
            other => Err(Error::Config(format!(
                "unknown ablation '{other}' (expected prune_ratio, adapter_init or distill_layers)"
            ))),
        }
    }
}

impl fmt::Display for Ablation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Ablation::PruneRatio => "prune_ratio",
            Ablation::AdapterInit => "adapter_init",
            Ablation::DistillLayers => "distill_layers",
        })
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

fn seed_columns(prefix: &str, seeds: &[u64]) -> String {
    seeds.iter().map(|s| format!(",{prefix}_seed{s}")).collect()
}

fn values(v: &[f64]) -> String {
    v.iter().map(|x| format!(",{x:.6}")).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct RatioRow {
    pub ratio: Ratio,
    pub macs: u64,
    pub params: u64,
    /// One entry per seed.
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl RatioRow {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }
}

pub const SWEEP_RATIOS: [Ratio; 4] = [
    Ratio { num: 1, den: 1 },
    Ratio { num: 1, den: 2 },
    Ratio { num: 1, den: 4 },
    Ratio { num: 1, den: 8 },
];

/// Runs the full pipeline once per seed and ratio. The ratio applies to every
/// stage listed in `cfg.prune.ratios`; phase 1 is shared across ratios.
pub fn prune_ratio_sweep(cfg: &RunConfig, ratios: &[Ratio], seeds: &[u64]) -> Result<Vec<RatioRow>> {
    let mut rows: Vec<RatioRow> = ratios
        .iter()
        .map(|&ratio| RatioRow {
            ratio,
            macs: 0,
            params: 0,
            psnr: Vec::new(),
            ssim: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let base = cfg.with_seed(seed);
        let prep = prepare(&base)?;
        let p1 = train_phase1(&base, &prep, substitute(&base, &prep.teacher)?)?;
        for row in rows.iter_mut() {
            let mut c = base.clone();
            for r in c.prune.ratios.values_mut() {
                *r = row.ratio;
            }
            let spec = select(&c, &prep, &p1.student)?;
            let p2 = train_phase2(&c, &prep, p1.student.clone(), &spec)?;
            let (pruned, report) = prune(&c, &prep, &p2.student, &spec)?;
            let adapters = make_phase3_adapters(&report, c.adapter_init(), c.student_seed());
            let p3 = train_phase3(&c, &prep, pruned, adapters)?;
            let eval = evaluate_split(&p3.student, prep.eval())?;
            row.macs = block_breakdown(&p3.student, c.data.latent_extents, None)?.total_macs();
            row.params = count_params(&p3.student);
            row.psnr.push(eval.psnr);
            row.ssim.push(eval.ssim);
        }
    }
    Ok(rows)
}

pub fn ratio_sweep_csv(rows: &[RatioRow], seeds: &[u64]) -> String {
    let mut s = format!(
        "ratio,macs,params,psnr_mean,ssim_mean{}{}\n",
        seed_columns("psnr", seeds),
        seed_columns("ssim", seeds)
    );
    for r in rows {
        writeln!(
            s,
            "{},{},{},{:.6},{:.6}{}{}",
            r.ratio,
            r.macs,
            r.params,
            r.mean_psnr(),
            mean(&r.ssim),
            values(&r.psnr),
            values(&r.ssim)
        )
        .expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, PartialEq)]
pub struct InitRow {
    pub seed: u64,
    pub threshold: f64,
    /// Steps until the smoothed phase-3 loss first reaches the threshold.
    pub steps_projection: Option<usize>,
    pub steps_random: Option<usize>,
    pub final_projection: f64,
    pub final_random: f64,
}

impl InitRow {
    /// The projection-initialized run reached the threshold no later than
    /// the random one.
    pub fn projection_not_slower(&self) -> bool {
        match (self.steps_projection, self.steps_random) {
            (Some(p), Some(r)) => p <= r,
            (Some(_), None) => true,
            (None, _) => false,
        }
    }
}

/// Smoothed phase-3 loss both initializations pass partway through a run of
/// `configs/ablation.toml`, measured on a pilot over seeds 0..3.
pub const INIT_THRESHOLD: f64 = 4.5;
pub const INIT_WINDOW: usize = 8;

/// Phase 3 from the same pruned student with both adapter initializations.
pub fn adapter_init_ablation(cfg: &RunConfig, seeds: &[u64], threshold: f64, window: usize) -> Result<Vec<InitRow>> {
    let mut rows = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let c = cfg.with_seed(seed);
        let prep = prepare(&c)?;
        let p1 = train_phase1(&c, &prep, substitute(&c, &prep.teacher)?)?;
        let spec = select(&c, &prep, &p1.student)?;
        let p2 = train_phase2(&c, &prep, p1.student, &spec)?;
        let (pruned, report) = prune(&c, &prep, &p2.student, &spec)?;
        let run = |init| {
            let adapters = make_phase3_adapters(&report, init, c.student_seed());
            train_phase3(&c, &prep, pruned.clone(), adapters).map(|o| o.history)
        };
        let hp = run(AdapterInit::Projection)?;
        let hr = run(AdapterInit::Random)?;
        let last = |h: &History| {
            let s = h.smoothed(window);
            s.last().copied().unwrap_or(f64::NAN)
        };
        rows.push(InitRow {
            seed,
            threshold,
            steps_projection: hp.steps_to_smoothed(threshold, window),
            steps_random: hr.steps_to_smoothed(threshold, window),
            final_projection: last(&hp),
            final_random: last(&hr),
        });
    }
    Ok(rows)
}

pub fn adapter_init_csv(rows: &[InitRow]) -> String {
    let opt = |v: Option<usize>| v.map_or_else(|| "never".to_string(), |v| v.to_string());
    let mut s = String::from("seed,threshold,steps_projection,steps_random,final_loss_projection,final_loss_random\n");
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{},{},{:.6},{:.6}",
            r.seed,
            r.threshold,
            opt(r.steps_projection),
            opt(r.steps_random),
            r.final_projection,
            r.final_random
        )
        .expect("writing to a String");
    }
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DistillVariant {
    /// Deep stages in phases 1 and 2, shallow stages in phase 3.
    Full,
    NoDistill,
    DeepOnly,
    ShallowOnly,
}

impl DistillVariant {
    pub const ALL: [DistillVariant; 4] = [
        DistillVariant::Full,
        DistillVariant::NoDistill,
        DistillVariant::DeepOnly,
        DistillVariant::ShallowOnly,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DistillVariant::Full => "full",
            DistillVariant::NoDistill => "no_distill",
            DistillVariant::DeepOnly => "deep_only",
            DistillVariant::ShallowOnly => "shallow_only",
        }
    }

    /// Distilled stages for phases 1, 2 and 3.
    pub fn stages(self) -> [BTreeSet<StageName>; 3] {
        let deep: BTreeSet<_> = PhaseConfig::DEEP.into_iter().collect();
        let shallow: BTreeSet<_> = PhaseConfig::SHALLOW.into_iter().collect();
        match self {
            DistillVariant::Full => [deep.clone(), deep, shallow],
            DistillVariant::NoDistill => Default::default(),
            DistillVariant::DeepOnly => [deep.clone(), deep.clone(), deep],
            DistillVariant::ShallowOnly => [shallow.clone(), shallow.clone(), shallow],
        }
    }

    pub fn apply(self, cfg: &RunConfig) -> RunConfig {
        let mut c = cfg.clone();
        let [a, b, d] = self.stages();
        c.phase1.distill_stages = Some(a);
        c.phase2.distill_stages = Some(b);
        c.phase3.distill_stages = Some(d);
        c
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VariantRow {
    pub variant: DistillVariant,
    pub psnr: Vec<f64>,
    pub ssim: Vec<f64>,
}

impl VariantRow {
    pub fn mean_psnr(&self) -> f64 {
        mean(&self.psnr)
    }
}

/// Every variant under the same step budgets and seeds.
pub fn distill_layers_ablation(cfg: &RunConfig, seeds: &[u64]) -> Result<Vec<VariantRow>> {
    let mut rows: Vec<VariantRow> = DistillVariant::ALL
        .iter()
        .map(|&variant| VariantRow {
            variant,
            psnr: Vec::new(),
            ssim: Vec::new(),
        })
        .collect();
    for &seed in seeds {
        let prep = prepare(&cfg.with_seed(seed))?;
        for row in rows.iter_mut() {
            let c = row.variant.apply(&cfg.with_seed(seed));
            let r = run_pipeline(&c, &prep)?;
            row.psnr.push(r.eval_final.psnr);
            row.ssim.push(r.eval_final.ssim);
        }
    }
    Ok(rows)
}

pub fn distill_layers_csv(rows: &[VariantRow], seeds: &[u64]) -> String {
    let mut s = format!(
        "variant,psnr_mean,ssim_mean{}{}\n",
        seed_columns("psnr", seeds),
        seed_columns("ssim", seeds)
    );
    for r in rows {
        writeln!(
            s,
            "{},{:.6},{:.6}{}{}",
            r.variant.as_str(),
            r.mean_psnr(),
            mean(&r.ssim),
            values(&r.psnr),
            values(&r.ssim)
        )
        .expect("writing to a String");
    }
    s
}

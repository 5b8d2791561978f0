//! Three-phase feature distillation from a full teacher decoder into a
//! compressed student.
//!
//! Phase 1 aligns the deep stages of an operator-substituted student. Phase 2
//! keeps training with updates to soon-to-be-removed channels suspended and
//! an expressivity penalty on the channels that stay. Phase 3 trains the
//! pruned student, comparing its pruned stages to the teacher through
//! pointwise adapters.

mod adapters;
mod losses;
mod optim;
mod trainer;

pub use adapters::{make_phase3_adapters, AdapterInit, Adapters};
pub use losses::{
    distill_loss, l1_loss, ssim, ssim_loss, total_loss, AdapterVar, GradientPerceptual, LossTerms, LossWeights,
    Perceptual, SSIM_C1, SSIM_C2, SSIM_WINDOW,
};
pub use optim::{AdamW, AdamWConfig};
pub use trainer::{
    evaluate_objective, run_phase, AdapterKind, History, LossRow, PhaseConfig, PhaseInputs, PhaseOutcome,
};

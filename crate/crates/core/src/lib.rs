//! Decoder compression toolkit: independence-aware channel pruning,
//! stage-wise operator substitution and three-phase feature distillation for
//! miniature causal video decoders.

pub mod ablation;
pub mod autodiff;
pub mod config;
pub mod conv;
pub mod cost;
pub mod data;
pub mod decoder;
pub mod distill;
pub mod error;
pub mod metrics;
pub mod ops;
pub mod pipeline;
pub mod pruning;
pub mod rng;
pub mod tensor;

pub use error::{Error, ErrorClass, Result};
pub use tensor::Tensor;

/// Sizes the global worker pool used for per-clip work. Results do not
/// depend on the thread count.
pub fn set_threads(n: usize) -> Result<()> {
    if n == 0 {
        return Err(Error::Config("thread count must be positive".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Contract(format!("worker pool already initialized: {e}")))
}

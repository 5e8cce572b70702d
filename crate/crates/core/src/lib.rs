//! Desk-scale adversarial-robustness laboratory for tiny vision encoders.
//!
//! The crate provides, end to end: a dense `f32` tensor with reverse-mode
//! automatic differentiation ([`graph`]), a synthetic shapes dataset
//! ([`dataset`]), small MLP image encoders with a frozen zero-shot
//! classifier and standard/adversarial training ([`encoders`]), linear
//! feature-space alignment between encoders ([`alignment`]), l-infinity
//! gradient attacks — PGD, APGD, targeted, two-stage, ensemble, transfer —
//! ([`attacks`]), fifteen common image corruptions at five severities
//! ([`corruptions`]), caption/VQA/robustness metrics ([`metrics`]), and a
//! config-driven experiment harness ([`harness`]).

pub mod alignment;
pub mod attacks;
pub mod corruptions;
pub mod dataset;
pub mod encoders;
pub mod error;
pub mod gradcheck;
pub mod graph;
pub mod harness;
pub mod io;
pub mod jpeg;
pub mod metrics;
pub mod optim;
pub mod rng;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::Tensor;

/// Worker pool shared by batch attack and corruption loops. Its size is
/// capped by the `ADVLAB_THREADS` environment variable (0 or unset = auto).
pub fn thread_pool() -> &'static rayon::ThreadPool {
    use once_cell::sync::OnceCell;
    static POOL: OnceCell<rayon::ThreadPool> = OnceCell::new();
    POOL.get_or_init(|| {
        let threads = std::env::var("ADVLAB_THREADS")
            .ok()
            .and_then(|v| v.parse::<usize>().ok())
            .unwrap_or(0);
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .expect("worker pool construction")
    })
}

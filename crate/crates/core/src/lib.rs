//! In-context binary discrimination lab.
//!
//! Episodes pose a two-hypothesis Gaussian discrimination problem whose
//! exact log-likelihood-ratio statistic is known in closed form. The crate
//! bundles everything needed to train a small Transformer on such episodes
//! and compare it against the Bayes-optimal oracle: a tensor/autodiff core,
//! task generators with corruption modes, the oracle statistics, the model
//! with its ablation variants, an AdamW/one-cycle trainer, mechanistic
//! analyses (logit-LLR regression, logit lens, OV alignment, kernel
//! baseline), and a file-driven experiment harness.

pub mod model;
pub mod numerics;
pub mod oracle;
pub mod taskgen;

pub use numerics::{grad_check, normal_cdf, normal_pdf, Scalar};

/// Concrete element type used by the lab end to end.
///
/// The numeric core is generic over [`Scalar`]; experiments run in f64 so
/// that gradient checks and repeated runs are exactly reproducible.
pub type Elem = f64;

pub type Tensor = numerics::Tensor<Elem>;
pub type Param = numerics::Param<Elem>;
pub type Graph = numerics::Graph<Elem>;
pub type ValueId = numerics::ValueId;
pub type NumericsError = numerics::NumericsError;

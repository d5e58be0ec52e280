//! Multi-site class-incremental view classification with weighted expert
//! score fusion.
//!
//! One expert classifier is trained per site; experts are combined by a
//! score-fusion model whose per-expert contributions can be re-weighted by a
//! learned in-distribution score (from expert features or from neural-mean
//! discrepancy vectors). Sites exchange model weights and feature bundles
//! only; images never cross a site boundary.

pub mod baselines;
pub mod data;
pub mod error;
pub mod expert;
pub mod fusion;
pub mod metrics;
pub mod multisite;
pub mod nmd;
pub mod nn;
pub mod pipeline;
pub mod report;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod weights;

pub use error::{Error, Result};
pub use tensor::Tensor;

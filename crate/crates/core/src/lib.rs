//! Regularized policy gradients over finite outcome spaces.
//!
//! Every objective in this crate (forward/reverse KL, normalized or with an
//! unnormalized reference measure) has three views that can be checked
//! against each other:
//!
//! - an exact value and gradient computed by enumerating the outcome space,
//! - a fully differentiable surrogate loss built on a scalar reverse-mode tape,
//! - a REINFORCE-style surrogate that detaches the per-sample weight with a
//!   stop-gradient node.
//!
//! The math is generic over [`Scalar`] (`f32` or `f64`). The aliases at the
//! crate root fix the scalar to `f64`, which is what the CLI and the test
//! suites use.

// `!(x > 0)` is used on purpose so that NaN fails validation.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod autodiff;
pub mod clipping;
pub mod divergences;
pub mod error;
pub mod grpo_audit;
pub mod measures;
pub mod objectives;
pub mod scalar;
pub mod training;

pub use error::{Result, RpgError};
pub use scalar::Scalar;

pub type Tape = autodiff::Tape<f64>;
pub type FiniteMeasure = measures::FiniteMeasure<f64>;
pub type SoftmaxPolicy = measures::SoftmaxPolicy<f64>;
pub type OutcomeSample = measures::OutcomeSample<f64>;
pub type Batch = measures::Batch<f64>;
pub type RpgConfig = objectives::RpgConfig<f64>;
pub type ClipParams = clipping::ClipParams<f64>;
pub type AuditReport = grpo_audit::AuditReport<f64>;
pub type TrainConfig = training::TrainConfig<f64>;
pub type TrainTrace = training::TrainTrace<f64>;
pub type BanditEnv = training::BanditEnv<f64>;

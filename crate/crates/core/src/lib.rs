//! Joint energy-based model laboratory.
//!
//! A classifier's logits `f(x)` double as an energy `E(x) = -logsumexp(f(x))`.
//! This crate trains such models with persistent SGLD sampling, a replay
//! buffer, sharpness-aware (SAM / ASAM) updates and a dual data loader that
//! keeps augmentation out of the generative branch, then evaluates them for
//! calibration, OOD detection, adversarial robustness and energy-landscape
//! sharpness.
//!
//! Everything runs on a small reverse-mode autodiff engine in [`autodiff`].

pub mod autodiff;
pub mod checkpoint;
pub mod cli;
pub mod data;
pub mod eval;
pub mod error;
pub mod model;
pub mod optimizer;
pub mod sampler;
pub mod seeds;
pub mod trainer;

pub use autodiff::{Graph, ParameterSet, Real, Tensor, Var};
pub use error::{Error, Result};

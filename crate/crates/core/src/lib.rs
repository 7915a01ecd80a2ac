//! Compressed multiview self-supervised learning at desk scale.
//!
//! The crate bundles everything needed to train and analyse SimCLR/BYOL
//! style encoders with conditional-entropy-bottleneck compression on
//! synthetic multiview data:
//!
//! - [`autodiff`]: a small reverse-mode engine over [`tensor::Tensor`].
//! - [`vmf`]: von Mises-Fisher numerics (log Bessel, normalizer, KL, sampler).
//! - [`losses`]: InfoNCE, SimCLR, C-SimCLR, BYOL and C-BYOL objectives.
//! - [`encoders`]: MLP encoder stacks with an EMA target copy.
//! - [`data`]: synthetic multiview generator, augmentations, shift suites.
//! - [`training`]: SGD-momentum loop with cosine schedules and checkpoints.
//! - [`evaluation`]: linear probes, Brier score, robustness tables.
//! - [`lipschitz`]: local smoothness estimates of stochastic encoders.
//! - [`experiments`]: parameter sweeps with paired seeds.

pub mod autodiff;
pub mod checkpoint;
pub mod config;
pub mod data;
pub mod encoders;
pub mod error;
pub mod evaluation;
pub mod experiments;
pub mod lipschitz;
pub mod losses;
pub mod rng;
pub mod tensor;
pub mod training;
pub mod vmf;

pub use autodiff::{Graph, Var};
pub use error::{Error, Result};
pub use tensor::Tensor;

//! Relation-consistency semi-supervised learning on small synthetic problems.
//!
//! The crate trains a student/teacher pair of small classifiers where the
//! unsupervised signal combines per-sample prediction consistency with
//! consistency of the batch's row-normalized case-wise Gram matrix. Baseline
//! schemes (supervised only, self-training, Π model, temporal ensembling,
//! mean teacher, feature consistency) live in the same strategy registry so
//! ablations run through one code path.

pub mod autodiff;
mod codec;
pub mod data;
pub mod error;
pub mod experiment;
pub mod fmt;
pub mod losses;
pub mod metrics;
pub mod model;
pub mod perturb;
pub mod rng;
pub mod selftest;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use tensor::Tensor;

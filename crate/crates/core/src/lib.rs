//! Feature-space targeted adversarial attacks by statistic alignment.
//!
//! The crate is organised bottom-up:
//!
//! - [`tensor`]: a small tape-based reverse-mode differentiation engine with
//!   the convolutional layer primitives the models need.
//! - [`model`]: three small CNN architectures with feature taps ordered by
//!   depth, training, and a binary checkpoint format.
//! - [`data`]: IDX dataset ingestion and a procedural 10-class image generator.
//! - [`statalign`]: sample-set construction, kernels, MMD² estimators, the
//!   pair-wise (MMD²) and global-wise (channel moment) alignment losses, and
//!   the Euclidean feature baseline.
//! - [`attack`]: the momentum sign attack loop, gallery construction and
//!   target selection.
//! - [`harness`]: tSuc/tTR metrics, layer/rank/bias sweeps, the translation
//!   demo and CSV/JSON export.
//! - [`cli`]: run configuration and the workflows behind the `saat` binary.

pub mod attack;
pub mod cli;
pub mod data;
mod error;
pub mod harness;
pub mod model;
pub mod seed;
pub mod statalign;
pub mod tensor;

pub use error::{Error, Result};

//! Prompt-conditioned image-to-image processing at desk scale.
//!
//! The crate implements:
//!
//! * a deterministic, seeded corpus of classic image-processing tasks
//!   (degradations, enhancement, edge extraction, smoothing) packaged as
//!   prompt bundles: an input/target pair plus a (source, target) example
//!   pair from a second scene that demonstrates the task;
//! * a U-shaped attention network in which the example pair steers the
//!   computation through cross-attention at the bottleneck;
//! * a reverse-mode autodiff tape over `ndarray`, generic over `f32`
//!   (training) and `f64` (finite-difference gradient oracles);
//! * a deterministic trainer (L1 objective, decoupled weight decay) and
//!   the evaluation protocols exercised by the acceptance suite.

pub mod cli;
pub mod config;
pub mod corpus;
pub mod error;
pub mod eval;
pub mod img;
pub mod model;
pub mod ops;
pub mod scene;
pub mod seed;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};

//! Reverse-mode autodiff over `ndarray`.
//!
//! The tape records one node per operation during the forward pass;
//! `Tape::backward` replays the nodes in reverse, pushing gradients to
//! parents. Everything is generic over [`Scalar`], so the same layer code
//! runs in `f32` for training and in `f64` for the finite-difference
//! gradient oracles.

pub mod gradcheck;
pub mod ops;
pub mod scalar;
pub mod tape;

pub use scalar::Scalar;
pub use tape::{Ctx, Grads, NodeId, Tape, Var};

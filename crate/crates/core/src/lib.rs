//! Desk-scale laboratory for studying batch-coupled attacks on test-time
//! adaptation (TTA).
//!
//! The crate is organised around a small reverse-mode autodiff engine
//! ([`tape`]) driving an MLP classifier with batch-statistics BatchNorm
//! ([`nn`]). On top of that sit the TTA engines and defenses ([`tta`]),
//! trigger operators ([`trigger`]), the priority-aware gradient alignment
//! solver and its baselines ([`align`]), the meta-learned perturbation
//! generator ([`attack`]), and a deployment-stream simulator with metrics
//! ([`stream`], [`deploy`]). [`verify`] bundles the numerical verification
//! suites (gradient checks, solver oracles, descent bounds, reductions) that
//! both the test suite and the CLI expose.

// validations use the negated form `!(x > 0.0)` so NaN fails them too
#![allow(clippy::neg_cmp_op_on_partial_ord)]
// index loops mirror the matrix arithmetic they implement
#![allow(clippy::needless_range_loop)]

pub mod align;
pub mod attack;
pub mod data;
pub mod deploy;
pub mod error;
pub mod nn;
pub mod pipeline;
pub mod rng;
pub mod stream;
pub mod tape;
pub mod tensor;
pub mod trigger;
pub mod tta;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::Tensor;

//! Simulation and tail analysis for stochastic recurrence equations
//! `X_n = A_n X_{n-1} + B_n` with a diagonal random coefficient `A`.
//!
//! The crate is organised the way a typical analysis runs:
//!
//! * [`model`] describes and samples the joint law of `(A, B)`;
//! * [`moments`] solves `E|A_j|^s = 1` for the per-coordinate tail indices;
//! * [`simulate`] produces stationary sample pools that keep the
//!   `(X_{n-1}, A_n, B_n)` triples needed by the implicit-renewal formula;
//! * [`geometry`] holds the anisotropic quasi-norm `|x|_α` and its dilations;
//! * [`blocks`] finds the coordinates that share a coefficient modulus;
//! * [`tails`] and [`independence`] estimate the limiting tail objects;
//! * [`cli`] glues everything behind a config-driven command line.

// `!(x > 0.0)` is used on purpose: it also rejects NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod blocks;
pub mod cli;
pub mod error;
pub mod geometry;
pub mod independence;
pub mod model;
pub mod moments;
pub mod parallel;
pub mod rng;
pub mod simulate;
pub mod stats;
pub mod tails;

pub use error::{Error, Result};
pub use geometry::AlphaNorm;
pub use model::{CoeffBatch, CoeffSample, Model, ModelSpec};
pub use moments::{Method, TailProfile};
pub use rng::SeedSequence;
pub use simulate::SamplePool;
pub use stats::Estimate;

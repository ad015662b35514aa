//! Agnostic learning-rate adaptation for stochastic gradient descent.
//!
//! The crate is organised bottom-up:
//!
//! - [`vecmath`]: flat `f64` vectors, layer partitions and the seeded random stream.
//! - [`agnostic`]: moments of the random-walk reference path and the learning-rate
//!   update rules that compare a gradient path against it.
//! - [`page_hinkley`]: Page-Hinkley change detection on the smoothed mini-batch loss
//!   and the checkpoint used for backtracking.
//! - [`optimizers`]: SGD, NAG, Adagrad, Adam and the agnostic family (ALeRA, SALeRA,
//!   SPALeRA, Ag-Adam) behind one step interface.
//! - [`nn`]: dense feed-forward networks with manual backpropagation.
//! - [`data`]: IDX loading, standardization, mini-batch schedules and synthetic
//!   objectives.
//! - [`analysis`]: Monte Carlo moments of the reference path and the dividing-factor
//!   cost model.
//! - [`harness`]: run configuration, training loop, grids, metrics and the
//!   verification suites used by the CLI.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod agnostic;
pub mod analysis;
pub mod data;
mod error;
pub mod harness;
pub mod nn;
pub mod objective;
pub mod optimizers;
pub mod page_hinkley;
pub mod vecmath;

pub use error::{Error, Result};
pub use objective::Objective;
pub use vecmath::{FlatVector, Partition, RngStream, Segment};

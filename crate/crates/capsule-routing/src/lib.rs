//! Capsule networks with pluggable, learnable routing.
//!
//! The crate provides:
//!
//! - [`tensor`] — a minimal dense n-dimensional array with reverse-mode
//!   differentiation (`f32` for training, `f64` for verification) and a
//!   finite-difference gradient checker.
//! - [`kernels`] — parametric similarity functions (Gaussian mixture,
//!   cosine, linear) used by similarity-based routing.
//! - [`routing`] — the generic routing engine: compatibility-weighted pose
//!   aggregation over receptive fields, parameterized by pluggable
//!   compatibility/activation procedures.
//! - [`similarity`] — routing as alternating minimization of a
//!   kernel-clustering objective with KL penalties, with a closed-form
//!   compatibility update, plus the 2-D toy solver.
//! - [`connectionist`] — routing whose compatibility and activation
//!   functions are neural networks, with an LSTM carrying per-vote state
//!   across iterations.
//! - [`net`] — capsule layers (primary, convolutional, class) assembled
//!   into a trainable classifier, and the checkpoint format.
//! - [`data`] — MNIST IDX and smallNORB binary loaders, preprocessing and
//!   augmentation, and the 2-D toy vote-cloud generator.
//! - [`train`] — spread loss, Adam with exponential learning-rate decay,
//!   the epoch loop and evaluation.
//! - [`cli`] — the `train | eval | toy | gradcheck | shapes` command-line
//!   entry point (see the `capsule-routing` binary).
//!
//! Runnable walkthroughs of each capability live under `examples/`.

pub mod cli;
pub mod config;
pub mod connectionist;
pub mod data;
pub mod error;
pub mod kernels;
pub mod net;
pub mod routing;
pub mod similarity;
pub mod tensor;
pub mod train;
pub mod verify;

pub use error::{Error, Result};
pub use tensor::{Scalar, Tensor};

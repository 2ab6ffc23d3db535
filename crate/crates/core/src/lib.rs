//! Momentum-conserving learned particle dynamics.
//!
//! The centerpiece is the antisymmetric continuous convolution (ASCC): a
//! continuous convolution whose kernel grid is mirrored and negated through
//! its center and whose feature term is reflexive. Every pairwise
//! contribution then has an equal and opposite partner, so the summed output
//! over all particles is zero by construction — the learned interaction
//! cannot change total linear momentum, for any parameter values.
//!
//! Around that core the crate provides:
//!
//! - [`geometry`]: neighbor search, subsampling, window functions,
//!   kernel-coordinate mapping, gravity normalization;
//! - [`layers`]: CConv/ASCC forward and backward passes;
//! - [`network`]: the multi-scale particle network with type-aware
//!   preprocessing and an ASCC output head;
//! - [`simulator`]: predictive Euler stepping with network position
//!   corrections and position-based velocity updates;
//! - [`sph`]: SPH reference solvers and dataset generators;
//! - [`training`]: loss, schedules, noise, warmup, Adam and the full
//!   training loop with backpropagation through time;
//! - [`metrics`]: RMSE, earth mover's distance, velocity-distribution JSD,
//!   max-density ratio and momentum-change diagnostics;
//! - [`io`] and [`config`]: binary frame/checkpoint formats, CSV logs and
//!   the flat key=value run configuration.

pub mod config;
pub mod error;
pub mod geometry;
pub mod io;
pub mod layers;
pub mod mat;
pub mod metrics;
pub mod network;
pub mod simulator;
pub mod sph;
pub mod training;

pub use error::{Error, Result};

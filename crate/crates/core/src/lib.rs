//! Diversified flow matching.
//!
//! Learns one time-dependent velocity field that carries each of several
//! conditional source distributions onto its own conditional target. The
//! regression targets come from a learnable interpolant trained so that
//! paths belonging to different conditions never meet in space-time.
//!
//! Module map:
//! - [`autodiff`]: reverse-mode tape over dense `f64` tensors
//! - [`nn`]: MLPs, Adam, EMA
//! - [`interpolant`]: linear and learnable paths, repulsion objective
//! - [`coupling`]: datasets, independent and minibatch-OT pairings
//! - [`flow`]: flow-matching losses, trainers, ODE integration
//! - [`metrics`]: EMD, translation error, reflection diagnostics
//! - [`surface`]: point clouds, LAND metric, surface adherence
//! - [`data`]: synthetic presets and dataset files
//! - [`checkpoint`]: on-disk model format

pub mod autodiff;
pub mod checkpoint;
pub mod coupling;
pub mod data;
mod error;
pub mod flow;
pub mod interpolant;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod surface;

pub use error::{Error, Result};

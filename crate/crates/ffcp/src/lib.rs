//! Fast feature conformal prediction toolkit.
//!
//! Split conformal prediction sizes a band around a model's prediction by the
//! calibration-fold quantile of a non-conformity score. The fast feature
//! variants normalize that score by the gradient norm of the network's
//! prediction head at the feature layer — a first-order stand-in for running
//! the conformal step in feature space — which keeps per-point adaptive band
//! widths while avoiding the feature-space search and band-estimation machinery
//! of the full FCP baseline.
//!
//! Modules:
//! - [`nnkit`]: the MLP engine (training, feature split, head Jacobians)
//! - [`calib`]: conformal quantiles, weighted and unweighted
//! - [`scores`]: vanilla / ffcp / cqr / ffcqr / fcp score functions
//! - [`bands`]: band construction and membership
//! - [`fcp`]: the FCP baseline (surrogate search + band estimation)
//! - [`raps`]: classification prediction sets (RAPS / FFRAPS)
//! - [`data`]: synthetic generators, CSV IO, splits, standardization
//! - [`bench`]: metrics, timing, square-condition checks, report emission
//! - [`harness`]: end-to-end method runners
//! - [`cli`]: configuration and command execution for the `ffcp` binary

pub mod bands;
pub mod bench;
pub mod calib;
pub mod cli;
pub mod data;
pub mod error;
pub mod fcp;
pub mod harness;
pub mod matrix;
pub mod nnkit;
pub mod raps;
pub mod scores;

pub use error::{Error, Result};
pub use matrix::RowMatrix;

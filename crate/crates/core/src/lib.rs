//! Estimation of MOVES operating-mode distributions for road links.
//!
//! The crate covers the whole chain: second-by-second kinematics and
//! operating-mode binning, a small signalized microsimulator that produces
//! ground truth, feature/dataset preparation, a modular neural network with
//! a shared trunk and four speed-regime heads, a drive-cycle baseline, an
//! emissions rate-table model and the evaluation metrics that compare them.
//!
//! Data-parallel loops go through [`par`]; with the default `parallel`
//! feature they run on rayon, otherwise sequentially. Results are identical
//! either way.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod baseline;
pub mod config;
pub mod dataset;
pub mod emissions;
pub mod error;
pub mod evalreport;
pub mod hashing;
pub mod kinematics;
pub mod microsim;
pub mod mnn;
pub mod par;
pub mod pipeline;

pub use error::{Error, Result};
pub use kinematics::{OpModeBin, OpModeDistribution, TrajectoryPoint, VehicleParams};
pub use par::Execution;

//! Desk-scale simulator and learning stack for autonomous robotic
//! ultrasound scanning of a parametric neck phantom.
//!
//! The library is organized around the closed loop it simulates:
//!
//! * [`phantom`] — parametric neck/artery geometry and the compliant
//!   skin-contact model that produces the external wrench on the probe.
//! * [`imaging`] — simulated linear-array ultrasound renderer, ground-truth
//!   landmark positions and the linear pixel/lateral-displacement map.
//! * [`arm`] — 7-DOF serial-arm kinematics, and in [`dynamics`] the
//!   rigid-body dynamics (recursive Newton-Euler, composite-rigid-body).
//! * [`controller`] — hybrid force-impedance control law with selection
//!   matrices, null-space posture task and the navigation-rate low-pass.
//! * [`sim`] — wires arm, phantom and probe into a 1 kHz simulation with a
//!   10 Hz navigation boundary.
//! * [`nn`] — small deterministic CPU neural-network substrate.
//! * [`perception`] — landmark encoder pretraining (classification +
//!   regression heads) and inference.
//! * [`policy`] — conditional DDPM noise-prediction network with guided
//!   sampling, 6D rotation representation, observation/action encodings.
//! * [`expert`] — scripted expert demonstrator, demonstration capture,
//!   augmentation and observation-action pairing.
//! * [`eval`] — closed-loop rollouts, the metric suite (success rate,
//!   centering, SSIM, force rate) and the BC / visual-servo baselines.
//! * [`cli`] — command implementations behind the `sonosim` binary.

pub mod arm;
pub mod cli;
pub mod config;
pub mod controller;
pub mod dynamics;
pub mod eval;
pub mod expert;
pub mod imaging;
pub mod io;
pub mod nn;
pub mod perception;
pub mod phantom;
pub mod policy;
pub mod sim;

use thiserror::Error;

/// Crate-wide error type.
#[derive(Debug, Error)]
pub enum Error {
    /// Invalid configuration (ranges, missing files, inconsistent flags).
    #[error("config error: {0}")]
    Config(String),
    /// Precondition violation on an operation's inputs.
    #[error("domain error: {0}")]
    Domain(String),
    /// Numerical fault during simulation or training; the run halts.
    #[error("fault: {0}")]
    Fault(String),
    /// Artifact provenance mismatch between pipeline stages.
    #[error("hash mismatch: {0}")]
    HashMismatch(String),
    /// Malformed binary artifact; `offset` is the byte position.
    #[error("parse error at byte {offset}: {msg}")]
    Parse { offset: u64, msg: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

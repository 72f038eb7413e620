//! Simulation and constrained pulse-input optimization for two
//! glucose-insulin models: an affine five-state compartment model and the
//! nonlinear minimal model.
//!
//! The library answers one question: given a meal disturbance, a hard lower
//! bound on the glucose response and a required total insulin amount, which
//! single rectangular bolus (or impulse) minimizes the glucose peak? The
//! solvers return the optimizing input together with an evidence-carrying
//! shape certificate, and an independent brute-force grid search is available
//! to cross-check them.

pub mod cli;
pub mod error;
pub mod models;
pub mod optimize;
pub mod scenario;
pub mod signals;
pub mod simulate;
pub mod verify;

pub use error::{Error, Result};

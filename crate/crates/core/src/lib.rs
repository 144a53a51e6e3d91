//! Loss-minimizing reactive power dispatch for PV inverters on a single-branch
//! radial distribution feeder.
//!
//! - [`circuit`]: feeder model, per-unit bases and the seeded prototype generator.
//! - [`powerflow`]: AC branch-flow sweep and closed-form linearized flows.
//! - [`dispatch`]: zero, local and QP-optimal inverter setpoints.
//! - [`experiments`]: Monte Carlo sweeps over inverter size and PV penetration.

pub mod circuit;
pub mod cli;
pub mod dispatch;
pub mod error;
pub mod experiments;
pub mod powerflow;

pub use circuit::{generate_circuit, Circuit, ScenarioParams};
pub use error::{Error, Result};
pub use powerflow::{Dispatch, FlowState, Policy};

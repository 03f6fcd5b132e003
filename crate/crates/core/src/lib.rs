//! Minimum-information sensing and control for linear-Gaussian systems.
//!
//! The sensing problem is a log-det SDP over posterior covariances, solved
//! either by a dense interior-point method ([`central`]) or by a per-step
//! ADMM whose iterations cost `O(T)` ([`admm`]). [`sensor`] turns a
//! covariance schedule into a sensor and filter, [`riccati`] provides the
//! control side, and [`planner`] embeds the sensing cost in a
//! covariance-aware path smoother.

pub mod admm;
pub mod central;
pub mod error;
pub mod matcore;
pub mod model;
pub mod planner;
pub mod riccati;
pub mod sensor;

pub use admm::{AdmmConfig, AdmmOutcome, AdmmState, ResidualRecord, Status, Variant};
pub use central::{BarrierOptions, FeasibilityReport, SrdOptions, SrdSolution};
pub use error::{Error, Result};
pub use matcore::{GenMat, SymMat};
pub use model::{synthetic_instance, DistortionSpec, ProblemFile, SatelliteParams, SystemModel};
pub use planner::{CcpOptions, CcpOutcome, McResult, Scenario, Trajectory};
pub use riccati::{ControllerSynthesis, LqgWeights};
pub use sensor::{RateSchedule, SensorDesign};

//! Scenario programs for linear systems under disturbance feedback, with
//! greedy scenario truncation and buffered constraints.
//!
//! The flow is: stack the plant ([`system`]), draw disturbance scenarios
//! ([`scenarios`]), map them to the point cloud that drives the constraint
//! error and pick a small subset ([`truncation`]), solve the buffered program
//! ([`optimization`]), then check the policy on fresh samples ([`validation`]).

pub mod config;
pub mod error;
pub mod optimization;
pub mod pipeline;
pub mod scenarios;
pub mod serde_matrix;
pub mod system;
pub mod truncation;
pub mod validation;

pub use error::{Error, Result};

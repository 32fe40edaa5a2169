//! Desk-scale congestion-control laboratory for an IoT gateway.
//!
//! The pieces fit together as a loop: the [`sim`] module produces labeled
//! [`telemetry`], the stacked LSTM in [`nn`] is fitted by [`training`], and
//! the [`controller`] turns its class probabilities into shaping / QoS
//! actions that are fed back into the simulator. [`fls`] provides a fuzzy
//! baseline behind the same scoring interface, and [`metrics`] reduces runs
//! to comparable reports. [`experiment`] wires the stages into the pipelines
//! the command-line tool exposes.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod controller;
mod error;
pub mod experiment;
pub mod fls;
pub mod metrics;
pub mod nn;
pub mod seed;
pub mod sim;
pub mod telemetry;
pub mod training;

pub use error::{Error, Result};

pub use controller::{congestion_score, decide, ControlAction};
pub use nn::{LstmClassifier, ModelConfig};
pub use telemetry::{CongestionLevel, SequenceSample, TelemetryRecord};

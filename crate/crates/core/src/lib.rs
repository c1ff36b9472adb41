//! Simulation and moment-based calibration of click-counting detectors.

// `!(x >= 0.0)` style checks reject NaN along with out-of-range values.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod appsense;
pub mod click_model;
pub mod config;
pub mod dataset;
pub mod error;
pub mod exec;
pub mod linalg;
pub mod moments;
pub mod pipeline;
pub mod povm;
pub mod regress;
pub mod report;
pub mod synthetic;

pub use error::{Error, Result};
pub use exec::Exec;

//! Multi-sensor multi-object tracking over a generic feature-level
//! interface.
//!
//! Distributed sensors send possibly incomplete, reference-point-relative
//! detections; a labeled multi-Bernoulli filter fuses them into complete
//! tracks, inferring unmeasured extent from position measurements taken at
//! different rectangle vertices. A simulation harness and an OSPA-T metrics
//! suite drive reproducible Monte Carlo evaluation.

pub mod assignment;
pub mod error;
pub mod geometry;
pub mod interface;
pub mod lmb;
pub mod measurement;
pub mod metrics;
pub mod motion;
pub mod pipeline;
pub mod sim;
pub mod types;

pub use error::{Error, Result};

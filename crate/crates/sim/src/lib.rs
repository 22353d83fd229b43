//! Discrete-event simulation of federated learning over LEO constellations,
//! plus the Monte Carlo experiments built on the same models.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod config;
pub mod delay;
pub mod engine;
pub mod experiments;
pub mod metrics;

pub use config::{Orchestration, ScenarioConfig};
pub use engine::{datasets, run, RunMetadata, Simulation};
pub use metrics::Metrics;

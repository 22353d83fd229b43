//! Monte Carlo studies built on the same models as the simulator.

pub mod commload;
pub mod estimators;
pub mod failure;

//! Federated learning over LEO constellations with intra-orbit links.
//!
//! The numerical kernels ([`orbital`], [`links`], [`flcore`], [`sparsify`]) are
//! generic over [`Scalar`]; the aliases below fix them to `f64`, which is what
//! the routing, orchestration and simulation layers use.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod contacts;
pub mod error;
pub mod flcore;
pub mod links;
pub mod orbital;
pub mod orchestration;
pub mod rng;
pub mod routing;
pub mod scalar;
pub mod sparsify;

pub use error::{Error, Result};
pub use scalar::Scalar;

pub type Position = orbital::Position3<f64>;
pub type Constellation = orbital::ConstellationConfig<f64>;
pub type GroundStation = orbital::GroundStationConfig<f64>;
pub type Orbit = orbital::CircularOrbit<f64>;
pub type PsSite = orbital::PsLocation<f64>;
pub type LinkBudget = links::LinkBudgetParams<f64>;
pub type Rates = links::LinkRates<f64>;
pub type Params = flcore::ModelParams<f64>;
pub type Data = flcore::Dataset<f64>;
pub type Update = flcore::WeightedUpdate<f64>;
pub type CostModel = flcore::ComputeCostModel<f64>;
pub type Training = flcore::TrainConfig<f64>;
pub type Sparse = sparsify::SparseGradient<f64>;
pub type Gradient = sparsify::Payload<f64>;
pub type Residual = sparsify::ResidualState<f64>;
pub type GradientCompressor = sparsify::Compressor<f64>;

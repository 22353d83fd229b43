//! Federated-learning primitives: data, models, local training and the global update.

pub mod data;
pub mod model;
pub mod partition;
pub mod train;

pub use data::{load_idx, synthetic_digits, Dataset, LocalDataset, SyntheticSpec};
pub use model::{LeastSquares, LogisticRegression, Model};
pub use partition::{partition_dataset, partition_indices, PartitionMode};
pub use train::{apply_update, client_opt, compute_time, evaluate, ComputeCostModel, DenseGradient, ModelParams, TrainConfig, WeightedUpdate};

//! Local training, the global update rule, evaluation and the runtime model.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::sparsify::{Compressor, Payload};

use super::data::Dataset;
use super::model::Model;

/// Global model parameters.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelParams<T> {
    pub values: Vec<T>,
    /// Storage width of one element on the wire.
    pub elem_bits: u32,
}

impl<T: Scalar> ModelParams<T> {
    pub fn zeros(n_d: usize) -> Self {
        Self { values: vec![T::zero(); n_d], elem_bits: 32 }
    }

    pub fn dim(&self) -> usize {
        self.values.len()
    }

    pub fn wire_bits(&self) -> u64 {
        self.values.len() as u64 * u64::from(self.elem_bits)
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Sum of weighted effective gradients with the total weight behind it.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseGradient<T> {
    pub values: Vec<T>,
    pub weight: T,
}

/// Output of local training: `D_k` times the compressed effective gradient.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightedUpdate<T> {
    pub payload: Payload<T>,
    pub weight: T,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig<T> {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: T,
}

impl<T: Scalar> Default for TrainConfig<T> {
    fn default() -> Self {
        Self { epochs: 5, batch_size: 10, lr: T::lit(0.1) }
    }
}

/// `I` epochs of shuffled mini-batch SGD from `w`, returning `D_k * compress(w_final - w)`.
pub fn client_opt<T: Scalar, M: Model<T> + ?Sized, R: Rng>(
    model: &M,
    w: &[T],
    data: &Dataset<T>,
    cfg: &TrainConfig<T>,
    compressor: &mut Compressor<T>,
    rng: &mut R,
) -> Result<WeightedUpdate<T>> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if cfg.batch_size == 0 || !(cfg.lr > T::zero()) {
        return Err(Error::Config(format!("batch {} and learning rate {} must be positive", cfg.batch_size, cfg.lr)));
    }
    if w.len() != model.num_params() {
        return Err(Error::DimensionMismatch { expected: model.num_params(), got: w.len() });
    }
    let mut local = w.to_vec();
    let mut grad = vec![T::zero(); w.len()];
    let mut order: Vec<usize> = (0..data.len()).collect();
    for epoch in 0..cfg.epochs {
        order.shuffle(rng);
        for batch in order.chunks(cfg.batch_size) {
            grad.iter_mut().for_each(|g| *g = T::zero());
            let loss = model.accumulate_grad(&local, data, batch, &mut grad);
            if !loss.is_finite() {
                return Err(Error::Diverged(format!("loss {loss} in epoch {epoch}")));
            }
            let step = cfg.lr / T::from_usize(batch.len()).unwrap();
            for (p, g) in local.iter_mut().zip(&grad) {
                *p -= step * *g;
            }
        }
    }
    let effective: Vec<T> = local.iter().zip(w).map(|(a, b)| *a - *b).collect();
    if effective.iter().any(|v| !v.is_finite()) {
        return Err(Error::Diverged("non-finite parameters".into()));
    }
    let weight = T::from_usize(data.len()).unwrap();
    let mut payload = compressor.compress(effective)?;
    payload.scale(weight);
    Ok(WeightedUpdate { payload, weight })
}

/// `w + eta_s / D * aggregate`; the aggregate already carries the `D_k` weights.
pub fn apply_update<T: Scalar>(model: &ModelParams<T>, aggregate: &[T], total_weight: T, server_lr: T) -> Result<ModelParams<T>> {
    if aggregate.len() != model.dim() {
        return Err(Error::DimensionMismatch { expected: model.dim(), got: aggregate.len() });
    }
    if !(total_weight > T::zero()) {
        return Err(Error::Domain(format!("total weight {total_weight} must be positive")));
    }
    let scale = server_lr / total_weight;
    let mut out = model.clone();
    for (w, g) in out.values.iter_mut().zip(aggregate) {
        *w += scale * *g;
    }
    Ok(out)
}

/// Top-1 accuracy on `test`.
pub fn evaluate<T: Scalar, M: Model<T> + ?Sized>(model: &M, w: &[T], test: &Dataset<T>) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let hits = (0..test.len()).filter(|&i| model.predict(w, test.row(i)) == test.labels[i]).count();
    Ok(hits as f64 / test.len() as f64)
}

/// Cycle counts and clock of the on-board learning runtime model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ComputeCostModel<T> {
    #[serde(default)]
    pub c_epoch: T,
    #[serde(default)]
    pub c_s: T,
    #[serde(default)]
    pub c_step: T,
    #[serde(default)]
    pub c_compress: T,
    #[serde(default)]
    pub c_os: T,
    pub cpu_hz: T,
    /// Constant runtime that replaces the cycle model when set.
    #[serde(default)]
    pub fixed_override: Option<T>,
}

impl<T: Scalar> ComputeCostModel<T> {
    pub fn fixed(seconds: T) -> Self {
        Self { c_epoch: T::zero(), c_s: T::zero(), c_step: T::zero(), c_compress: T::zero(), c_os: T::zero(), cpu_hz: T::one(), fixed_override: Some(seconds) }
    }
}

/// Seconds to run local training on `d_k` samples of an `n_d`-parameter model.
pub fn compute_time<T: Scalar>(cost: &ComputeCostModel<T>, d_k: usize, n_d: usize, epochs: usize, batch: usize) -> T {
    if let Some(t) = cost.fixed_override {
        return t;
    }
    let f = |x: usize| T::from_usize(x).unwrap();
    let (d, n, i) = (f(d_k), f(n_d), f(epochs));
    let batches = f(d_k.div_ceil(batch.max(1)));
    let cycles = i * d * (cost.c_epoch + n * cost.c_s) + cost.c_step * n * (i * batches + T::one()) + cost.c_compress + cost.c_os;
    cycles / cost.cpu_hz
}

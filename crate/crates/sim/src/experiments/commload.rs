//! Bits needed to collect one plane's gradients at the PS, with and without
//! in-network aggregation, measured on real local updates.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use orbitfl_core::flcore::{apply_update, client_opt, partition_dataset, synthetic_digits, LogisticRegression, Model, PartitionMode, SyntheticSpec};
use orbitfl_core::rng::{purpose, stream};
use orbitfl_core::routing::build_aggregation_tree;
use orbitfl_core::sparsify::{expected_nnz, expected_total_bits, index_bits, Payload};
use orbitfl_core::{Data, Error, GradientCompressor, Params, Result, Training};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CommloadConfig {
    pub k_values: Vec<usize>,
    /// Sparsification ratios; `1` sends dense vectors.
    pub qs: Vec<f64>,
    pub data: SyntheticSpec,
    pub partition: PartitionMode,
    pub train: Training,
    pub elem_bits: u32,
    /// Rounds run before measuring, so residuals are populated.
    pub warmup_rounds: usize,
    pub measured_rounds: usize,
    pub seed: u64,
}

impl Default for CommloadConfig {
    fn default() -> Self {
        Self {
            k_values: (1..=10).map(|i| 4 * i).collect(),
            qs: vec![1.0, 0.1, 0.01],
            data: SyntheticSpec::default(),
            partition: PartitionMode::Dirichlet { beta: 0.5 },
            train: Training { epochs: 1, batch_size: 10, lr: 0.1 },
            elem_bits: 32,
            warmup_rounds: 2,
            measured_rounds: 3,
            seed: 1,
        }
    }
}

impl CommloadConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.contains(&0) || self.k_values.is_empty() {
            return Err(Error::Config("plane sizes must be positive".into()));
        }
        if let Some(q) = self.qs.iter().find(|q| !(**q > 0.0 && **q <= 1.0)) {
            return Err(Error::Config(format!("sparsification ratio {q} outside (0, 1]")));
        }
        if self.measured_rounds == 0 {
            return Err(Error::Config("at least one measured round".into()));
        }
        if self.k_values.iter().any(|&k| k > self.data.samples) {
            return Err(Error::Config("more satellites than samples".into()));
        }
        Ok(())
    }
}

/// Mean bits per round for one plane size and ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CommloadRow {
    pub k_p: usize,
    pub q: f64,
    /// Incremental aggregation: every member sends one partial sum.
    pub ia_bits: f64,
    /// Every gradient unicast to the sink and uploaded separately.
    pub no_ia_bits: f64,
    /// Gradients unicast to the sink, which uploads their sum.
    pub sink_only_bits: f64,
    /// Expected IA bits for independent supports.
    pub bound_bits: f64,
}

impl CommloadRow {
    /// Relative saving of IA over the unicast baseline.
    pub fn reduction(&self) -> f64 {
        1.0 - self.ia_bits / self.no_ia_bits
    }
}

/// Bits per round of a plane of `k_p` members whose updates are `updates`
/// (indexed by slot − 1), with the sink at slot 1.
pub fn round_bits(updates: &[Payload<f64>], elem_bits: u32) -> Result<(f64, f64, f64, Payload<f64>)> {
    let k_p = updates.len();
    let tree = build_aggregation_tree(k_p, 1)?;
    let mut order: Vec<usize> = (1..=k_p).collect();
    order.sort_by_key(|&s| std::cmp::Reverse(tree.depth(s)));
    let mut partial: Vec<Option<Payload<f64>>> = vec![None; k_p];
    let (mut ia, mut unicast, mut uploads) = (0.0, 0.0, 0.0);
    for &slot in &order {
        let own = &updates[slot - 1];
        let mut acc = own.clone();
        for child in tree.children(slot) {
            let p = partial[child - 1].take().ok_or_else(|| Error::Protocol(format!("slot {child} has no partial")))?;
            acc = acc.add(&p)?;
        }
        let bits = own.wire_bits(elem_bits) as f64;
        unicast += tree.depth(slot) as f64 * bits;
        uploads += bits;
        if slot != tree.sink {
            ia += acc.wire_bits(elem_bits) as f64;
        }
        partial[slot - 1] = Some(acc);
    }
    let sum = partial[tree.sink - 1].take().expect("sink visited last");
    let upload = sum.wire_bits(elem_bits) as f64;
    Ok((ia + upload, unicast + uploads, unicast + upload, sum))
}

/// Expected IA bits per round when supports are independent.
pub fn ia_bound(n_d: usize, elem_bits: u32, q: f64, k_p: usize) -> f64 {
    let (a, b) = (k_p / 2, (k_p - 1) / 2);
    let per_entry = f64::from(elem_bits + index_bits(n_d));
    expected_total_bits(n_d, elem_bits, q, a as u32) + expected_total_bits(n_d, elem_bits, q, b as u32) + expected_nnz(n_d, q, k_p as u32) * per_entry
}

fn run_cell(cfg: &CommloadConfig, train: &Data, k_p: usize, q: f64) -> Result<CommloadRow> {
    let model = LogisticRegression::new(train.n_features, train.n_classes);
    let n_d = Model::<f64>::num_params(&model);
    let shares = partition_dataset(train, k_p, cfg.partition, &mut stream(cfg.seed, purpose::PARTITION, k_p as u64, 0))?;
    let total: f64 = shares.iter().map(|d| d.len() as f64).sum();
    let mut compressors: Vec<GradientCompressor> =
        (0..k_p).map(|_| if q < 1.0 { GradientCompressor::top_q(q) } else { GradientCompressor::Identity }).collect();
    let mut w = Params { values: vec![0.0; n_d], elem_bits: cfg.elem_bits };
    let (mut ia, mut no_ia, mut sink_only) = (0.0, 0.0, 0.0);
    for round in 0..cfg.warmup_rounds + cfg.measured_rounds {
        let updates = shares
            .iter()
            .zip(&mut compressors)
            .enumerate()
            .map(|(k, (d, c))| {
                let mut rng = stream(cfg.seed, purpose::SHUFFLE, k as u64, round as u64);
                client_opt(&model, &w.values, d, &cfg.train, c, &mut rng).map(|u| u.payload)
            })
            .collect::<Result<Vec<_>>>()?;
        let (a, b, c, sum) = round_bits(&updates, cfg.elem_bits)?;
        if round >= cfg.warmup_rounds {
            ia += a;
            no_ia += b;
            sink_only += c;
        }
        w = apply_update(&w, &sum.to_dense(), total, 1.0)?;
    }
    let m = cfg.measured_rounds as f64;
    let bound_bits = if q < 1.0 { ia_bound(n_d, cfg.elem_bits, q, k_p) } else { (k_p * n_d) as f64 * f64::from(cfg.elem_bits) };
    Ok(CommloadRow { k_p, q, ia_bits: ia / m, no_ia_bits: no_ia / m, sink_only_bits: sink_only / m, bound_bits })
}

/// One row per `(q, K_p)` cell, ordered by `q` as given, then `K_p`.
pub fn run_commload_experiment(cfg: &CommloadConfig) -> Result<Vec<CommloadRow>> {
    cfg.validate()?;
    let train: Data = synthetic_digits(&cfg.data, &mut stream(cfg.seed, purpose::DATASET, 0, 0));
    let cells: Vec<(f64, usize)> = cfg.qs.iter().flat_map(|&q| cfg.k_values.iter().map(move |&k| (q, k))).collect();
    cells.par_iter().map(|&(q, k)| run_cell(cfg, &train, k, q)).collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(points: &[(f64, f64)]) -> f64 {
    let n = points.len() as f64;
    let (lx, ly): (Vec<f64>, Vec<f64>) = points.iter().map(|&(x, y)| (x.ln(), y.ln())).unzip();
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    sxy / sxx
}

#[cfg(test)]
mod tests {
    use super::*;

    fn dense(k: usize, n: usize) -> Vec<Payload<f64>> {
        (0..k).map(|i| Payload::Dense(vec![i as f64 + 1.0; n])).collect()
    }

    #[test]
    fn dense_counts_follow_hop_sums() {
        for k in 1..=12usize {
            let (ia, no_ia, sink_only, sum) = round_bits(&dense(k, 3), 32).unwrap();
            let s = 96.0;
            let hops = (k * k / 4) as f64;
            assert_eq!(ia, k as f64 * s);
            assert_eq!(no_ia, (hops + k as f64) * s);
            assert_eq!(sink_only, (hops + 1.0) * s);
            assert_eq!(sum.to_dense()[0], (k * (k + 1) / 2) as f64);
        }
    }

    #[test]
    fn single_member_only_uploads() {
        let (ia, no_ia, _, _) = round_bits(&dense(1, 10), 32).unwrap();
        assert_eq!(ia, 320.0);
        assert_eq!(no_ia, 320.0);
    }

    #[test]
    fn slope_of_power_law() {
        let pts: Vec<(f64, f64)> = (1..10).map(|x| (x as f64, 3.0 * (x as f64).powi(2))).collect();
        assert!((loglog_slope(&pts) - 2.0).abs() < 1e-12);
    }
}

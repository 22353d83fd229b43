//! Monte Carlo checks of the support-size and chain-bits expectations.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::Serialize;

use orbitfl_core::rng::{purpose, stream};
use orbitfl_core::sparsify::{expected_nnz, expected_total_bits, index_bits, n_active, top_q};
use orbitfl_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct NnzCell {
    pub n_d: usize,
    pub q: f64,
    pub l: u32,
    pub formula: f64,
    pub mc_mean: f64,
    pub stderr: f64,
}

impl NnzCell {
    /// Within `k` standard errors, with exact equality allowed for zero-variance cells.
    pub fn agrees(&self, k: f64) -> bool {
        (self.formula - self.mc_mean).abs() <= k * self.stderr + 1e-9 * self.formula.max(1.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BitsCell {
    pub n_d: usize,
    pub q: f64,
    pub hops: u32,
    pub bound: f64,
    pub mc_mean: f64,
    pub stderr: f64,
}

/// How the summed vectors are generated.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub enum Summands {
    /// Uniformly random supports of size `floor(n_d q)`.
    Independent,
    /// Top-q of `signal * s + noise` with a shared Gaussian `s` per trial.
    SharedSignal { signal: f64 },
}

/// Running sums for mean and standard error.
#[derive(Debug, Clone, Copy, Default)]
struct Moments {
    n: f64,
    sum: f64,
    sum_sq: f64,
}

impl Moments {
    fn push(&mut self, x: f64) {
        self.n += 1.0;
        self.sum += x;
        self.sum_sq += x * x;
    }

    fn mean(&self) -> f64 {
        self.sum / self.n
    }

    fn stderr(&self) -> f64 {
        if self.n < 2.0 {
            return 0.0;
        }
        let var = (self.sum_sq - self.sum * self.sum / self.n) / (self.n - 1.0);
        (var.max(0.0) / self.n).sqrt()
    }
}

/// Marks visited indices without clearing between trials.
struct StampSet {
    stamps: Vec<u32>,
    current: u32,
}

impl StampSet {
    fn new(n: usize) -> Self {
        Self { stamps: vec![0; n], current: 0 }
    }

    fn clear(&mut self) {
        self.current += 1;
        if self.current == u32::MAX {
            self.stamps.fill(0);
            self.current = 1;
        }
    }

    /// True if `i` was not yet in the set.
    fn insert(&mut self, i: usize) -> bool {
        let fresh = self.stamps[i] != self.current;
        self.stamps[i] = self.current;
        fresh
    }

    fn contains(&self, i: usize) -> bool {
        self.stamps[i] == self.current
    }
}

/// Floyd's sampling of `k` distinct indices below `n`, fed to `sink`.
fn sample_support<R: Rng>(n: usize, k: usize, rng: &mut R, picked: &mut StampSet, mut sink: impl FnMut(usize)) {
    picked.clear();
    for j in n - k..n {
        let t = rng.random_range(0..=j);
        let chosen = if picked.contains(t) { j } else { t };
        picked.insert(chosen);
        sink(chosen);
    }
}

fn check(n_d: usize, q: f64) -> Result<usize> {
    if n_d == 0 || !(q > 0.0 && q <= 1.0) {
        return Err(Error::Domain(format!("n_d = {n_d}, q = {q}")));
    }
    match n_active(n_d, q) {
        0 => Err(Error::DegenerateRatio { q, dim: n_d }),
        k => Ok(k),
    }
}

/// Support size of a running sum of `1..=l_max` independent sparse vectors.
/// Each trial extends one sum vector by vector, so every `l` shares its trials.
pub fn nnz_table(n_ds: &[usize], qs: &[f64], l_max: u32, trials: usize, seed: u64) -> Result<Vec<NnzCell>> {
    let combos: Vec<(usize, f64)> = n_ds.iter().flat_map(|&n| qs.iter().map(move |&q| (n, q))).collect();
    for &(n, q) in &combos {
        check(n, q)?;
    }
    let rows: Vec<Vec<NnzCell>> = combos
        .par_iter()
        .enumerate()
        .map(|(c, &(n_d, q))| {
            let n_a = n_active(n_d, q);
            let mut rng = stream(seed, purpose::MONTE_CARLO, c as u64, 1);
            let mut picked = StampSet::new(n_d);
            let mut union = StampSet::new(n_d);
            let mut stats = vec![Moments::default(); l_max as usize];
            for _ in 0..trials {
                union.clear();
                let mut size = 0usize;
                for m in &mut stats {
                    sample_support(n_d, n_a, &mut rng, &mut picked, |i| size += usize::from(union.insert(i)));
                    m.push(size as f64);
                }
            }
            stats
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let l = i as u32 + 1;
                    NnzCell { n_d, q, l, formula: expected_nnz(n_d, q, l), mc_mean: m.mean(), stderr: m.stderr() }
                })
                .collect()
        })
        .collect();
    Ok(rows.into_iter().flatten().collect())
}

/// Bits sent along chains of `1..=h_max` hops, where hop `j` carries the sum
/// of `j` Top-q vectors, against the independent-support expectation.
pub fn chain_bits_table(n_d: usize, elem_bits: u32, qs: &[f64], h_max: u32, trials: usize, summands: Summands, seed: u64) -> Result<Vec<BitsCell>> {
    for &q in qs {
        check(n_d, q)?;
    }
    let per_entry = f64::from(elem_bits + index_bits(n_d));
    let rows: Vec<Result<Vec<BitsCell>>> = qs
        .par_iter()
        .enumerate()
        .map(|(c, &q)| {
            let n_a = n_active(n_d, q);
            let mut rng = stream(seed, purpose::MONTE_CARLO, c as u64, 2);
            let mut picked = StampSet::new(n_d);
            let mut union = StampSet::new(n_d);
            let mut stats = vec![Moments::default(); h_max as usize];
            let mut signal = vec![0.0f64; n_d];
            let mut v = vec![0.0f64; n_d];
            for _ in 0..trials {
                union.clear();
                if let Summands::SharedSignal { signal: a } = summands {
                    signal.iter_mut().for_each(|s| *s = a * Distribution::<f64>::sample(&StandardNormal, &mut rng));
                }
                let (mut size, mut total) = (0usize, 0.0);
                for m in &mut stats {
                    match summands {
                        Summands::Independent => sample_support(n_d, n_a, &mut rng, &mut picked, |i| size += usize::from(union.insert(i))),
                        Summands::SharedSignal { .. } => {
                            for (x, s) in v.iter_mut().zip(&signal) {
                                let noise: f64 = StandardNormal.sample(&mut rng);
                                *x = s + noise;
                            }
                            for &i in &top_q(&v, q)?.indices {
                                size += usize::from(union.insert(i as usize));
                            }
                        }
                    }
                    total += size as f64 * per_entry;
                    m.push(total);
                }
            }
            Ok(stats
                .iter()
                .enumerate()
                .map(|(i, m)| {
                    let hops = i as u32 + 1;
                    BitsCell { n_d, q, hops, bound: expected_total_bits(n_d, elem_bits, q, hops), mc_mean: m.mean(), stderr: m.stderr() }
                })
                .collect())
        })
        .collect();
    let mut out = Vec::new();
    for r in rows {
        out.extend(r?);
    }
    Ok(out)
}

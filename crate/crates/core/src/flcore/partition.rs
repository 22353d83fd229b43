//! Splitting a global dataset across satellites.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::data::Dataset;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase")]
pub enum PartitionMode {
    Iid,
    Dirichlet { beta: f64 },
}

const MAX_DIRICHLET_ATTEMPTS: usize = 1000;

/// Disjoint cover of `data` by `k` nonempty local datasets.
pub fn partition_dataset<T: Scalar, R: Rng>(data: &Dataset<T>, k: usize, mode: PartitionMode, rng: &mut R) -> Result<Vec<Dataset<T>>> {
    Ok(partition_indices(&data.labels, data.n_classes, k, mode, rng)?.iter().map(|rows| data.subset(rows)).collect())
}

/// Row indices of each share; every share is sorted.
pub fn partition_indices<R: Rng>(labels: &[u32], n_classes: usize, k: usize, mode: PartitionMode, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if k == 0 {
        return Err(Error::Config("cannot partition across zero satellites".into()));
    }
    if k > labels.len() {
        return Err(Error::Config(format!("{k} satellites but only {} samples", labels.len())));
    }
    let mut shares = match mode {
        PartitionMode::Iid => {
            let mut rows: Vec<usize> = (0..labels.len()).collect();
            rows.shuffle(rng);
            let base = rows.len() / k;
            let extra = rows.len() % k;
            let mut out = Vec::with_capacity(k);
            let mut at = 0;
            for s in 0..k {
                let n = base + usize::from(s < extra);
                out.push(rows[at..at + n].to_vec());
                at += n;
            }
            out
        }
        PartitionMode::Dirichlet { beta } => dirichlet_split(labels, n_classes, k, beta, rng)?,
    };
    for s in &mut shares {
        s.sort_unstable();
    }
    Ok(shares)
}

fn dirichlet_split<R: Rng>(labels: &[u32], n_classes: usize, k: usize, beta: f64, rng: &mut R) -> Result<Vec<Vec<usize>>> {
    if !(beta > 0.0) || !beta.is_finite() {
        return Err(Error::Config(format!("Dirichlet concentration {beta} must be positive")));
    }
    let gamma = Gamma::new(beta, 1.0).map_err(|e| Error::Config(e.to_string()))?;
    let mut by_class = vec![Vec::new(); n_classes];
    for (i, &l) in labels.iter().enumerate() {
        by_class[l as usize].push(i);
    }
    for _ in 0..MAX_DIRICHLET_ATTEMPTS {
        let mut shares = vec![Vec::new(); k];
        for rows in &by_class {
            let mut rows = rows.clone();
            rows.shuffle(rng);
            let draws: Vec<f64> = (0..k).map(|_| gamma.sample(rng)).collect();
            let total: f64 = draws.iter().sum();
            let mut cum = 0.0;
            let mut start = 0;
            for (s, d) in draws.iter().enumerate() {
                cum += d;
                let end = if s + 1 == k { rows.len() } else { ((cum / total) * rows.len() as f64).round() as usize };
                let end = end.clamp(start, rows.len());
                shares[s].extend_from_slice(&rows[start..end]);
                start = end;
            }
        }
        if shares.iter().all(|s| !s.is_empty()) {
            return Ok(shares);
        }
    }
    Err(Error::Config(format!("no Dirichlet({beta}) split of {} samples left all {k} satellites nonempty", labels.len())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{purpose, stream};

    fn labels(n: usize) -> Vec<u32> {
        (0..n).map(|i| (i % 10) as u32).collect()
    }

    fn entropy(hist: &[usize]) -> f64 {
        let n: usize = hist.iter().sum();
        hist.iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / n as f64;
                -p * p.ln()
            })
            .sum()
    }

    fn assert_cover(shares: &[Vec<usize>], n: usize) {
        let mut all: Vec<usize> = shares.iter().flatten().copied().collect();
        all.sort();
        assert_eq!(all, (0..n).collect::<Vec<_>>());
    }

    #[test]
    fn iid_examples() {
        let mut rng = stream(3, purpose::PARTITION, 0, 0);
        let one = partition_indices(&labels(100), 10, 1, PartitionMode::Iid, &mut rng).unwrap();
        assert_eq!(one[0], (0..100).collect::<Vec<_>>());
        let four = partition_indices(&labels(100), 10, 4, PartitionMode::Iid, &mut rng).unwrap();
        assert!(four.iter().all(|s| s.len() == 25));
        assert_cover(&four, 100);
        assert!(partition_indices(&labels(3), 10, 4, PartitionMode::Iid, &mut rng).is_err());
    }

    #[test]
    fn dirichlet_is_skewed_and_reproducible() {
        let l = labels(4000);
        let mode = PartitionMode::Dirichlet { beta: 0.5 };
        let a = partition_indices(&l, 10, 40, mode, &mut stream(9, purpose::PARTITION, 0, 0)).unwrap();
        let b = partition_indices(&l, 10, 40, mode, &mut stream(9, purpose::PARTITION, 0, 0)).unwrap();
        assert_eq!(a, b);
        assert_cover(&a, 4000);
        assert!(a.iter().all(|s| !s.is_empty()));
        let iid = partition_indices(&l, 10, 40, PartitionMode::Iid, &mut stream(9, purpose::PARTITION, 0, 0)).unwrap();
        let mean_entropy = |shares: &[Vec<usize>]| {
            shares
                .iter()
                .map(|s| {
                    let mut h = vec![0; 10];
                    s.iter().for_each(|&i| h[l[i] as usize] += 1);
                    entropy(&h)
                })
                .sum::<f64>()
                / shares.len() as f64
        };
        assert!(mean_entropy(&a) < mean_entropy(&iid) - 0.3);
        assert!(partition_indices(&l, 10, 4, PartitionMode::Dirichlet { beta: 0.0 }, &mut stream(0, 0, 0, 0)).is_err());
    }
}

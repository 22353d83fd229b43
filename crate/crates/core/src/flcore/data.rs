//! Labelled datasets, the synthetic digit generator and the IDX reader.

use std::io::Read;
use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Row-major feature matrix with integer class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset<T> {
    pub n_features: usize,
    pub n_classes: usize,
    pub features: Vec<T>,
    pub labels: Vec<u32>,
}

/// Satellite-local share of the training set.
pub type LocalDataset<T> = Dataset<T>;

impl<T: Scalar> Dataset<T> {
    pub fn new(n_features: usize, n_classes: usize, features: Vec<T>, labels: Vec<u32>) -> Result<Self> {
        if features.len() != labels.len() * n_features {
            return Err(Error::DimensionMismatch { expected: labels.len() * n_features, got: features.len() });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l as usize >= n_classes) {
            return Err(Error::Malformed(format!("label {bad} out of range for {n_classes} classes")));
        }
        Ok(Self { n_features, n_classes, features, labels })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn row(&self, i: usize) -> &[T] {
        &self.features[i * self.n_features..(i + 1) * self.n_features]
    }

    pub fn subset(&self, rows: &[usize]) -> Self {
        let mut features = Vec::with_capacity(rows.len() * self.n_features);
        for &r in rows {
            features.extend_from_slice(self.row(r));
        }
        Self { n_features: self.n_features, n_classes: self.n_classes, features, labels: rows.iter().map(|&r| self.labels[r]).collect() }
    }

    pub fn class_histogram(&self) -> Vec<usize> {
        let mut h = vec![0; self.n_classes];
        for &l in &self.labels {
            h[l as usize] += 1;
        }
        h
    }

    /// First `n` rows and the remainder.
    pub fn split_at(&self, n: usize) -> (Self, Self) {
        let n = n.min(self.len());
        let head: Vec<usize> = (0..n).collect();
        let tail: Vec<usize> = (n..self.len()).collect();
        (self.subset(&head), self.subset(&tail))
    }
}

const SIDE: usize = 28;
const MARGIN: usize = 4;

/// Knobs of the synthetic 28x28 ten-class generator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticSpec {
    pub samples: usize,
    /// Gaussian bumps per class prototype.
    pub strokes: usize,
    /// Pixel noise standard deviation.
    pub noise: f64,
    /// Maximum random translation of a sample, in pixels.
    pub jitter_px: i32,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self { samples: 4000, strokes: 6, noise: 0.35, jitter_px: 2 }
    }
}

/// MNIST-shaped synthetic data: 784 features in `[0, 1]`, ten balanced classes.
///
/// Each class is a fixed sum of Gaussian blobs placed inside the central
/// 20x20 box; a sample is its class prototype shifted by a few pixels with
/// additive noise, clipped to `[0, 1]`. The 4-pixel border stays zero.
pub fn synthetic_digits<T: Scalar, R: Rng>(spec: &SyntheticSpec, rng: &mut R) -> Dataset<T> {
    let n_classes = 10;
    let inner = (SIDE - 2 * MARGIN) as f64;
    let prototypes: Vec<Vec<f64>> = (0..n_classes)
        .map(|_| {
            let blobs: Vec<(f64, f64, f64)> = (0..spec.strokes)
                .map(|_| {
                    let cy = MARGIN as f64 + 3.0 + rng.random::<f64>() * (inner - 6.0);
                    let cx = MARGIN as f64 + 3.0 + rng.random::<f64>() * (inner - 6.0);
                    (cy, cx, 1.5 + rng.random::<f64>() * 1.5)
                })
                .collect();
            (0..SIDE * SIDE)
                .map(|p| {
                    let (y, x) = ((p / SIDE) as f64, (p % SIDE) as f64);
                    blobs.iter().map(|&(cy, cx, s)| (-((y - cy).powi(2) + (x - cx).powi(2)) / (2.0 * s * s)).exp()).sum::<f64>().min(1.0)
                })
                .collect()
        })
        .collect();

    let noise = Normal::new(0.0, spec.noise.max(0.0)).expect("finite noise level");
    let lo = MARGIN as i32;
    let hi = (SIDE - MARGIN) as i32;
    let mut features = Vec::with_capacity(spec.samples * SIDE * SIDE);
    let mut labels = Vec::with_capacity(spec.samples);
    for s in 0..spec.samples {
        let class = s % n_classes;
        let dy = rng.random_range(-spec.jitter_px..=spec.jitter_px);
        let dx = rng.random_range(-spec.jitter_px..=spec.jitter_px);
        for p in 0..SIDE * SIDE {
            let (y, x) = ((p / SIDE) as i32, (p % SIDE) as i32);
            let v = if y < lo || y >= hi || x < lo || x >= hi {
                0.0
            } else {
                let (sy, sx) = (y - dy, x - dx);
                let base =
                    if (0..SIDE as i32).contains(&sy) && (0..SIDE as i32).contains(&sx) { prototypes[class][sy as usize * SIDE + sx as usize] } else { 0.0 };
                (base + noise.sample(rng)).clamp(0.0, 1.0)
            };
            features.push(T::lit(v));
        }
        labels.push(class as u32);
    }
    Dataset { n_features: SIDE * SIDE, n_classes, features, labels }
}

fn read_be_u32(bytes: &[u8], at: usize) -> Result<u32> {
    bytes.get(at..at + 4).map(|b| u32::from_be_bytes(b.try_into().unwrap())).ok_or_else(|| Error::Malformed("truncated IDX header".into()))
}

/// Parses an IDX3 image file; returns `(rows, cols, pixels)`.
pub fn parse_idx_images(bytes: &[u8]) -> Result<(usize, usize, Vec<u8>)> {
    if read_be_u32(bytes, 0)? != 0x0000_0803 {
        return Err(Error::Malformed("not an IDX3 ubyte image file".into()));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let rows = read_be_u32(bytes, 8)? as usize;
    let cols = read_be_u32(bytes, 12)? as usize;
    let body = &bytes[16..];
    if body.len() != n * rows * cols {
        return Err(Error::Malformed(format!("expected {} pixels, found {}", n * rows * cols, body.len())));
    }
    Ok((rows, cols, body.to_vec()))
}

pub fn parse_idx_labels(bytes: &[u8]) -> Result<Vec<u8>> {
    if read_be_u32(bytes, 0)? != 0x0000_0801 {
        return Err(Error::Malformed("not an IDX1 ubyte label file".into()));
    }
    let n = read_be_u32(bytes, 4)? as usize;
    let body = &bytes[8..];
    if body.len() != n {
        return Err(Error::Malformed(format!("expected {n} labels, found {}", body.len())));
    }
    Ok(body.to_vec())
}

/// Loads an MNIST image/label pair with pixels scaled to `[0, 1]`.
pub fn load_idx<T: Scalar>(images: &Path, labels: &Path) -> Result<Dataset<T>> {
    let slurp = |p: &Path| -> Result<Vec<u8>> {
        let mut buf = Vec::new();
        std::fs::File::open(p)?.read_to_end(&mut buf)?;
        Ok(buf)
    };
    let (rows, cols, pixels) = parse_idx_images(&slurp(images)?)?;
    let labels = parse_idx_labels(&slurp(labels)?)?;
    let n_classes = labels.iter().copied().max().map_or(0, |m| m as usize + 1).max(10);
    let features = pixels.iter().map(|&p| T::lit(f64::from(p) / 255.0)).collect();
    Dataset::new(rows * cols, n_classes, features, labels.into_iter().map(u32::from).collect())
}

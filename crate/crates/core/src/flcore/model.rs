//! Differentiable models with a flat parameter vector.

use crate::scalar::Scalar;

use super::data::Dataset;

/// Loss/gradient oracle over a flat parameter vector.
pub trait Model<T: Scalar>: Send + Sync {
    fn num_params(&self) -> usize;

    /// Adds the per-sample gradients of `rows` to `grad` and returns their summed loss.
    fn accumulate_grad(&self, w: &[T], data: &Dataset<T>, rows: &[usize], grad: &mut [T]) -> T;

    fn predict(&self, w: &[T], x: &[T]) -> u32;

    fn loss(&self, w: &[T], data: &Dataset<T>, rows: &[usize]) -> T {
        let mut scratch = vec![T::zero(); self.num_params()];
        self.accumulate_grad(w, data, rows, &mut scratch)
    }
}

/// Multinomial logistic regression: weights `[classes x features]` then biases.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogisticRegression {
    pub n_features: usize,
    pub n_classes: usize,
}

impl LogisticRegression {
    pub fn new(n_features: usize, n_classes: usize) -> Self {
        Self { n_features, n_classes }
    }

    /// The 784-input, 10-class model with 7850 parameters.
    pub fn mnist() -> Self {
        Self::new(784, 10)
    }

    fn logits<T: Scalar>(&self, w: &[T], x: &[T], out: &mut [T]) {
        let f = self.n_features;
        let bias = &w[self.n_classes * f..];
        for (c, o) in out.iter_mut().enumerate() {
            let row = &w[c * f..(c + 1) * f];
            *o = bias[c] + row.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
        }
    }
}

impl<T: Scalar> Model<T> for LogisticRegression {
    fn num_params(&self) -> usize {
        self.n_classes * (self.n_features + 1)
    }

    fn accumulate_grad(&self, w: &[T], data: &Dataset<T>, rows: &[usize], grad: &mut [T]) -> T {
        let f = self.n_features;
        let mut z = vec![T::zero(); self.n_classes];
        let mut loss = T::zero();
        for &r in rows {
            let x = data.row(r);
            let y = data.labels[r] as usize;
            self.logits(w, x, &mut z);
            let m = z.iter().copied().fold(T::neg_infinity(), T::max);
            let zy = z[y] - m;
            let mut norm = T::zero();
            for v in z.iter_mut() {
                *v = (*v - m).exp();
                norm += *v;
            }
            loss += norm.ln() - zy;
            for (c, p) in z.iter().enumerate() {
                let mut e = *p / norm;
                if c == y {
                    e -= T::one();
                }
                if e == T::zero() {
                    continue;
                }
                for (g, &xi) in grad[c * f..(c + 1) * f].iter_mut().zip(x) {
                    *g += e * xi;
                }
                grad[self.n_classes * f + c] += e;
            }
        }
        loss
    }

    fn predict(&self, w: &[T], x: &[T]) -> u32 {
        let mut z = vec![T::zero(); self.n_classes];
        self.logits(w, x, &mut z);
        let mut best = 0;
        for c in 1..z.len() {
            if z[c] > z[best] {
                best = c;
            }
        }
        best as u32
    }
}

/// Scalar linear regression `f = (w.x - y)^2 / 2` with the label as target.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LeastSquares {
    pub n_features: usize,
}

impl<T: Scalar> Model<T> for LeastSquares {
    fn num_params(&self) -> usize {
        self.n_features
    }

    fn accumulate_grad(&self, w: &[T], data: &Dataset<T>, rows: &[usize], grad: &mut [T]) -> T {
        let mut loss = T::zero();
        for &r in rows {
            let x = data.row(r);
            let err = w.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>() - T::from_u32(data.labels[r]).unwrap();
            loss += err * err / T::lit(2.0);
            for (g, &xi) in grad.iter_mut().zip(x) {
                *g += err * xi;
            }
        }
        loss
    }

    fn predict(&self, w: &[T], x: &[T]) -> u32 {
        let v = w.iter().zip(x).map(|(&a, &b)| a * b).sum::<T>();
        v.round().max(T::zero()).to_u32().unwrap_or(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::collection::vec;
    use proptest::prelude::*;

    proptest! {
        #[test]
        fn logistic_gradient_matches_finite_differences(
            w in vec(-1.0..1.0_f64, 15),
            x in vec(-2.0..2.0_f64, 4),
            y in 0u32..3,
        ) {
            let m = LogisticRegression::new(4, 3);
            let d = Dataset::new(4, 3, x, vec![y]).unwrap();
            let mut g = vec![0.0; 15];
            m.accumulate_grad(&w, &d, &[0], &mut g);
            let h = 1e-5;
            for i in 0..15 {
                let mut wp = w.clone();
                let mut wm = w.clone();
                wp[i] += h;
                wm[i] -= h;
                let fd = (m.loss(&wp, &d, &[0]) - m.loss(&wm, &d, &[0])) / (2.0 * h);
                prop_assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs().max(1e-3), "{i}: {fd} vs {}", g[i]);
            }
        }
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = LogisticRegression::new(2, 10);
        let d = Dataset::new(2, 10, vec![0.3, 0.7], vec![4]).unwrap();
        let w = vec![0.0; 30];
        let loss = m.loss(&w, &d, &[0]);
        assert!((loss - 10f64.ln()).abs() < 1e-12);
        assert_eq!(m.predict(&w, d.row(0)), 0);
        assert_eq!(<LogisticRegression as Model<f64>>::num_params(&LogisticRegression::mnist()), 7850);
    }
}

//! Random additions to learning and transmission times.

use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use orbitfl_core::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DelayConfig {
    /// Shape of the Gamma-distributed learning delay.
    pub learn_shape: f64,
    /// Scale of the learning delay, seconds.
    pub learn_scale_s: f64,
    /// Rate of the exponential per-hop communication delay, 1/s.
    pub comm_rate: f64,
}

impl DelayConfig {
    /// Learning and ISL delay parameters of the failure-handling study.
    pub fn failure_study() -> Self {
        Self { learn_shape: 25.0, learn_scale_s: 25.0, comm_rate: 0.025 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learn_shape > 0.0 && self.learn_scale_s > 0.0 && self.comm_rate > 0.0) {
            return Err(Error::Config(format!("delay parameters must be positive: {self:?}")));
        }
        Ok(())
    }
}

/// `T_l = t_l + X` with `X ~ Gamma(alpha, theta)` and `T_c = t_c + Y` with `Y ~ Exp(lambda)`.
#[derive(Debug, Clone, Copy)]
pub struct StochasticDelayModel {
    learn: Gamma<f64>,
    comm_rate: f64,
}

impl StochasticDelayModel {
    pub fn new(cfg: &DelayConfig) -> Result<Self> {
        cfg.validate()?;
        let learn = Gamma::new(cfg.learn_shape, cfg.learn_scale_s).map_err(|e| Error::Config(e.to_string()))?;
        Ok(Self { learn, comm_rate: cfg.comm_rate })
    }

    pub fn learn_jitter<R: Rng>(&self, rng: &mut R) -> f64 {
        self.learn.sample(rng)
    }

    /// Inverse-CDF exponential draw.
    pub fn comm_jitter<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        -(1.0 - u).ln() / self.comm_rate
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use orbitfl_core::rng::{purpose, stream};

    #[test]
    fn moments_match() {
        let m = StochasticDelayModel::new(&DelayConfig::failure_study()).unwrap();
        let mut rng = stream(1, purpose::LEARN_JITTER, 0, 0);
        let n = 200_000;
        let (mut sx, mut sy) = (0.0, 0.0);
        for _ in 0..n {
            sx += m.learn_jitter(&mut rng);
            sy += m.comm_jitter(&mut rng);
        }
        // Gamma mean alpha theta = 625 s, sd 125 s; Exp mean 40 s
        assert!((sx / n as f64 - 625.0).abs() < 3.0 * 125.0 / (n as f64).sqrt() * 3.0);
        assert!((sy / n as f64 - 40.0).abs() < 0.5);
        assert!(StochasticDelayModel::new(&DelayConfig { learn_shape: 0.0, ..DelayConfig::failure_study() }).is_err());
    }
}

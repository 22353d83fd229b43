//! Free-space link budget and the fixed-rate transmission model.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orbital::SPEED_OF_LIGHT;
use crate::scalar::Scalar;

/// Boltzmann constant in J/K.
pub const BOLTZMANN: f64 = 1.380649e-23;

pub fn db_to_linear<T: Scalar>(db: T) -> T {
    T::lit(10.0).powf(db / T::lit(10.0))
}

pub fn linear_to_db<T: Scalar>(x: T) -> T {
    T::lit(10.0) * x.log10()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkBudgetParams<T> {
    pub carrier_freq_hz: T,
    pub bandwidth_hz: T,
    pub tx_power_w: T,
    pub noise_temp_k: T,
    /// Linear transmit antenna gain.
    pub tx_gain: T,
    /// Linear receive antenna gain.
    pub rx_gain: T,
}

impl<T: Scalar> Default for LinkBudgetParams<T> {
    /// Ka-band defaults: 20 GHz, 500 MHz, 40 dBm, 354 K, 32.13 dBi at both ends.
    fn default() -> Self {
        let gain = db_to_linear(T::lit(32.13));
        Self { carrier_freq_hz: T::lit(20e9), bandwidth_hz: T::lit(500e6), tx_power_w: T::lit(10.0), noise_temp_k: T::lit(354.0), tx_gain: gain, rx_gain: gain }
    }
}

impl<T: Scalar> LinkBudgetParams<T> {
    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("carrier_freq_hz", self.carrier_freq_hz),
            ("bandwidth_hz", self.bandwidth_hz),
            ("tx_power_w", self.tx_power_w),
            ("noise_temp_k", self.noise_temp_k),
            ("tx_gain", self.tx_gain),
            ("rx_gain", self.rx_gain),
        ];
        for (name, v) in fields {
            if !(v > T::zero()) || !v.is_finite() {
                return Err(Error::Config(format!("link parameter {name} = {v} must be positive")));
            }
        }
        Ok(())
    }
}

/// Rates fixed for a whole run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LinkRates<T> {
    pub isl_rate: T,
    pub ps_rate: T,
}

/// Free-space path loss `(4 pi f d / c)^2` for `distance_m` metres.
pub fn fspl<T: Scalar>(distance_m: T, carrier_freq_hz: T) -> Result<T> {
    if !(distance_m > T::zero()) {
        return Err(Error::Domain(format!("distance {distance_m} m must be positive")));
    }
    let x = T::lit(4.0) * T::PI() * carrier_freq_hz * distance_m / T::lit(SPEED_OF_LIGHT);
    Ok(x * x)
}

pub fn snr<T: Scalar>(params: &LinkBudgetParams<T>, distance_m: T) -> Result<T> {
    let loss = fspl(distance_m, params.carrier_freq_hz)?;
    let noise = T::lit(BOLTZMANN) * params.noise_temp_k * params.bandwidth_hz;
    Ok(params.tx_power_w * params.tx_gain * params.rx_gain / (noise * loss))
}

/// Shannon rate at `max_distance_m`; used for the whole contact.
pub fn link_rate<T: Scalar>(params: &LinkBudgetParams<T>, max_distance_m: T) -> Result<T> {
    Ok(params.bandwidth_hz * (T::one() + snr(params, max_distance_m)?).log2())
}

/// Serialization plus propagation delay.
pub fn transmission_time<T: Scalar>(size_bits: T, rate: T, distance_m: T) -> Result<T> {
    if !(rate > T::zero()) {
        return Err(Error::InfeasibleLink(format!("rate {rate} bit/s")));
    }
    if size_bits < T::zero() {
        return Err(Error::Domain(format!("negative size {size_bits}")));
    }
    Ok(size_bits / rate + distance_m / T::lit(SPEED_OF_LIGHT))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    // Independent dB-domain link budget.
    fn fspl_db_textbook(d_km: f64, f_ghz: f64) -> f64 {
        92.45 + 20.0 * f_ghz.log10() + 20.0 * d_km.log10()
    }

    #[test]
    fn fspl_values() {
        let unit = SPEED_OF_LIGHT / (4.0 * std::f64::consts::PI * 20e9);
        assert_relative_eq!(fspl(unit, 20e9).unwrap(), 1.0, max_relative = 1e-12);
        let a: f64 = fspl(1e6, 20e9).unwrap();
        assert_relative_eq!(fspl(2e6, 20e9).unwrap(), 4.0 * a, max_relative = 1e-12);
        assert!((linear_to_db(a) - 178.47).abs() < 0.01, "{}", linear_to_db(a));
        assert!(fspl(0.0, 20e9).is_err());
        assert!(fspl(-1.0, 20e9).is_err());
    }

    #[test]
    fn snr_hand_calculation() {
        let p = LinkBudgetParams::<f64>::default();
        let s = linear_to_db(snr(&p, 6406e3).unwrap());
        // 40 dBm - 30 + 2*32.13 - FSPL(6406 km) - 10log10(kTB)
        let hand = 10.0 + 64.26 - fspl_db_textbook(6406.0, 20.0) - linear_to_db(BOLTZMANN * 354.0 * 500e6);
        assert!((s - hand).abs() < 0.01, "{s} vs {hand}");
        assert!((s + 4.2).abs() < 0.1);
        let zero_gain = LinkBudgetParams { tx_gain: 0.0, rx_gain: 0.0, ..p.clone() };
        assert_eq!(snr(&zero_gain, 6406e3).unwrap(), 0.0);
        assert_relative_eq!(snr(&p, 3203e3).unwrap(), 4.0 * snr(&p, 6406e3).unwrap(), max_relative = 1e-12);
    }

    #[test]
    fn rate_values() {
        let p = LinkBudgetParams::<f64>::default();
        let r = link_rate(&p, 6406e3).unwrap();
        assert!((r - 2.3e8).abs() / 2.3e8 < 0.05, "{r}");
        // choose the distance where SNR is exactly one
        let d1 = 6406e3 * snr(&p, 6406e3).unwrap().sqrt();
        assert_relative_eq!(link_rate(&p, d1).unwrap(), p.bandwidth_hz, max_relative = 1e-9);
        assert!(link_rate(&p, 1e12).unwrap() < 1.0);
    }

    #[test]
    fn transmission_examples() {
        assert_relative_eq!(transmission_time(0.0, 1e6, 6406e3).unwrap(), 6406e3 / SPEED_OF_LIGHT);
        let t: f64 = transmission_time(251_200.0, 2.3e8, 6406e3).unwrap();
        assert!((t - 0.0225).abs() < 1e-4, "{t}");
        let a = transmission_time(1000.0, 1e3, 0.0).unwrap();
        assert_relative_eq!(transmission_time(2000.0, 1e3, 0.0).unwrap(), 2.0 * a);
        assert!(matches!(transmission_time(1.0, 0.0, 1.0), Err(Error::InfeasibleLink(_))));
    }

    #[test]
    fn defaults_validate() {
        LinkBudgetParams::<f32>::default().validate().unwrap();
        let bad = LinkBudgetParams { bandwidth_hz: 0.0, ..LinkBudgetParams::<f64>::default() };
        assert!(bad.validate().is_err());
    }

    proptest! {
        #[test]
        fn fspl_db_consistency(d_km in 1.0..50_000.0_f64, f_ghz in 1.0..100.0_f64) {
            let db = linear_to_db(fspl(d_km * 1e3, f_ghz * 1e9).unwrap());
            prop_assert!((db - fspl_db_textbook(d_km, f_ghz)).abs() < 0.01);
        }

        #[test]
        fn rate_strictly_decreasing(d in 1e3..1e8_f64, factor in 1.001..10.0_f64) {
            let p = LinkBudgetParams::<f64>::default();
            prop_assert!(link_rate(&p, d * factor).unwrap() < link_rate(&p, d).unwrap());
        }

        #[test]
        fn transmission_additive_and_monotone(a in 0.0..1e9_f64, b in 0.0..1e9_f64, d in 0.0..1e7_f64, dd in 1.0..1e6_f64) {
            let r = 2.3e8;
            let sum = transmission_time(a + b, r, d).unwrap();
            let parts = transmission_time(a, r, d).unwrap() + transmission_time(b, r, 0.0).unwrap();
            prop_assert!((sum - parts).abs() <= 1e-9 * sum.max(1.0));
            prop_assert!(transmission_time(a, r, d + dd).unwrap() > transmission_time(a, r, d).unwrap());
        }
    }
}

//! Circular-orbit propagation, ground-station motion and visibility predicates.
//!
//! Positions are in kilometres in an Earth-centred inertial frame whose x axis
//! points at the Greenwich meridian at `t = 0`. Orbits are ideal Keplerian
//! circles; no perturbations are modelled.

use std::ops::Sub;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Mean Earth radius in km.
pub const EARTH_RADIUS_KM: f64 = 6371.0;
/// Geocentric gravitational constant in m^3/s^2.
pub const MU_EARTH: f64 = 3.98e14;
/// Earth rotation rate in rad/s.
pub const EARTH_ROTATION_RATE: f64 = 7.2921159e-5;
/// Lowest altitude a line of sight between two satellites may graze, in km.
pub const THERMOSPHERE_FLOOR_KM: f64 = 80.0;
/// Vacuum speed of light in m/s.
pub const SPEED_OF_LIGHT: f64 = 299_792_458.0;
/// One sidereal day in seconds.
pub const SIDEREAL_DAY: f64 = 86_164.1;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Position3<T> {
    pub x: T,
    pub y: T,
    pub z: T,
}

impl<T: Scalar> Position3<T> {
    pub fn new(x: T, y: T, z: T) -> Self {
        Self { x, y, z }
    }

    pub fn dot(&self, other: &Self) -> T {
        self.x * other.x + self.y * other.y + self.z * other.z
    }

    pub fn norm(&self) -> T {
        self.dot(self).sqrt()
    }

    pub fn distance(&self, other: &Self) -> T {
        (*self - *other).norm()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }
}

impl<T: Scalar> Sub for Position3<T> {
    type Output = Self;

    fn sub(self, rhs: Self) -> Self {
        Self::new(self.x - rhs.x, self.y - rhs.y, self.z - rhs.z)
    }
}

/// Walker constellation pattern; decides the default RAAN spacing.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WalkerPattern {
    #[default]
    Delta,
    Star,
}

/// Satellite identity: plane `p` in `1..=P`, slot `i` in `1..=K_p`.
/// Slot `i + 1` trails slot `i` along the orbit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SatelliteId {
    pub plane: usize,
    pub slot: usize,
}

impl SatelliteId {
    pub fn new(plane: usize, slot: usize) -> Self {
        Self { plane, slot }
    }

    /// Ring successor (the satellite behind), modulo `k_p`.
    pub fn next(&self, k_p: usize) -> Self {
        Self::new(self.plane, self.slot % k_p + 1)
    }

    /// Ring predecessor (the satellite ahead), modulo `k_p`.
    pub fn prev(&self, k_p: usize) -> Self {
        Self::new(self.plane, (self.slot + k_p - 2) % k_p + 1)
    }
}

impl std::fmt::Display for SatelliteId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "k({},{})", self.plane, self.slot)
    }
}

/// A single circular orbit.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CircularOrbit<T> {
    pub altitude_km: T,
    pub inclination_deg: T,
    pub raan_deg: T,
    /// Argument of latitude at `t = 0`.
    pub phase_deg: T,
}

impl<T: Scalar> CircularOrbit<T> {
    pub fn radius_km(&self) -> T {
        T::lit(EARTH_RADIUS_KM) + self.altitude_km
    }

    pub fn period(&self) -> Result<T> {
        orbital_period(self.altitude_km)
    }

    pub fn position(&self, t: T) -> Position3<T> {
        let r = self.radius_km();
        let period = orbital_period(self.altitude_km).expect("validated altitude");
        let u = self.phase_deg.to_radians() + T::TAU() * t / period;
        let inc = self.inclination_deg.to_radians();
        let raan = self.raan_deg.to_radians();
        let (su, cu) = u.sin_cos();
        let (si, ci) = inc.sin_cos();
        let (so, co) = raan.sin_cos();
        Position3::new(r * (co * cu - so * su * ci), r * (so * cu + co * su * ci), r * su * si)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConstellationConfig<T> {
    pub inclination_deg: T,
    pub altitude_km: T,
    pub num_planes: usize,
    pub sats_per_plane: usize,
    /// Walker phasing parameter `f`.
    #[serde(default)]
    pub phasing: u32,
    #[serde(default)]
    pub pattern: WalkerPattern,
    /// Overrides the pattern's default RAAN spacing.
    #[serde(default)]
    pub raan_spacing_deg: Option<T>,
    /// Overrides the equidistant in-plane spacing of `360 / K_p`.
    #[serde(default)]
    pub slot_spacing_deg: Option<T>,
    /// Common argument-of-latitude offset applied to every satellite at `t = 0`.
    #[serde(default)]
    pub phase_offset_deg: T,
}

impl<T: Scalar> ConstellationConfig<T> {
    /// `i: t/p/f` Walker constellation with `t / p` satellites per plane.
    pub fn walker(pattern: WalkerPattern, inclination_deg: T, altitude_km: T, total: usize, planes: usize, phasing: u32) -> Self {
        Self {
            inclination_deg,
            altitude_km,
            num_planes: planes,
            sats_per_plane: total / planes.max(1),
            phasing,
            pattern,
            raan_spacing_deg: None,
            slot_spacing_deg: None,
            phase_offset_deg: T::zero(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_planes < 1 {
            return Err(Error::Config("constellation needs at least one plane".into()));
        }
        if self.sats_per_plane < 1 {
            return Err(Error::Config("planes need at least one satellite".into()));
        }
        let inc = self.inclination_deg.as_f64();
        if !(0.0..=180.0).contains(&inc) {
            return Err(Error::Config(format!("inclination {inc} outside [0, 180]")));
        }
        if !(self.altitude_km > T::zero()) || !self.altitude_km.is_finite() {
            return Err(Error::Config(format!("altitude {} must be positive", self.altitude_km)));
        }
        Ok(())
    }

    pub fn total(&self) -> usize {
        self.num_planes * self.sats_per_plane
    }

    pub fn period(&self) -> T {
        orbital_period(self.altitude_km).expect("validated altitude")
    }

    pub fn raan_spacing(&self) -> T {
        self.raan_spacing_deg.unwrap_or_else(|| {
            let span = match self.pattern {
                WalkerPattern::Delta => 360.0,
                WalkerPattern::Star => 180.0,
            };
            T::lit(span) / T::from_usize(self.num_planes).unwrap()
        })
    }

    pub fn slot_spacing(&self) -> T {
        self.slot_spacing_deg.unwrap_or_else(|| T::lit(360.0) / T::from_usize(self.sats_per_plane).unwrap())
    }

    pub fn ids(&self) -> impl Iterator<Item = SatelliteId> + '_ {
        (1..=self.num_planes).flat_map(move |p| (1..=self.sats_per_plane).map(move |i| SatelliteId::new(p, i)))
    }

    /// Flat index `0..total` of a satellite.
    pub fn index_of(&self, id: SatelliteId) -> usize {
        (id.plane - 1) * self.sats_per_plane + (id.slot - 1)
    }

    pub fn id_of(&self, index: usize) -> SatelliteId {
        SatelliteId::new(index / self.sats_per_plane + 1, index % self.sats_per_plane + 1)
    }

    pub fn orbit_of(&self, id: SatelliteId) -> CircularOrbit<T> {
        let p = T::from_usize(id.plane - 1).unwrap();
        let i = T::from_usize(id.slot - 1).unwrap();
        let total = T::from_usize(self.total()).unwrap();
        let walker_phase = T::lit(360.0) * T::from_u32(self.phasing).unwrap() * p / total;
        CircularOrbit {
            altitude_km: self.altitude_km,
            inclination_deg: self.inclination_deg,
            raan_deg: self.raan_spacing() * p,
            phase_deg: self.phase_offset_deg - self.slot_spacing() * i + walker_phase,
        }
    }

    /// Constant distance between ring neighbours of a circular plane, in km.
    pub fn neighbor_distance_km(&self) -> T {
        if self.sats_per_plane < 2 {
            return T::zero();
        }
        let r = T::lit(EARTH_RADIUS_KM) + self.altitude_km;
        T::lit(2.0) * r * (self.slot_spacing().to_radians() / T::lit(2.0)).sin()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, bound(deserialize = "T: Deserialize<'de> + Default"))]
pub struct GroundStationConfig<T> {
    pub latitude_deg: T,
    pub longitude_deg: T,
    #[serde(default)]
    pub altitude_km: T,
    pub min_elevation_deg: T,
}

impl<T: Scalar> GroundStationConfig<T> {
    /// Bremen, Germany, with a 10 degree elevation mask.
    pub fn bremen() -> Self {
        Self { latitude_deg: T::lit(53.079), longitude_deg: T::lit(8.802), altitude_km: T::zero(), min_elevation_deg: T::lit(10.0) }
    }

    pub fn validate(&self) -> Result<()> {
        if self.latitude_deg.abs() > T::lit(90.0) {
            return Err(Error::Config(format!("latitude {} outside [-90, 90]", self.latitude_deg)));
        }
        let e = self.min_elevation_deg.as_f64();
        if !(0.0..90.0).contains(&e) {
            return Err(Error::Config(format!("minimum elevation {e} outside [0, 90)")));
        }
        Ok(())
    }
}

/// Where the parameter server lives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", bound(deserialize = "T: Deserialize<'de> + Default"))]
pub enum PsLocation<T> {
    Ground(GroundStationConfig<T>),
    Satellite(CircularOrbit<T>),
}

impl<T: Scalar> PsLocation<T> {
    pub fn position(&self, t: T) -> Position3<T> {
        match self {
            PsLocation::Ground(gs) => ground_station_position(gs, t),
            PsLocation::Satellite(orbit) => orbit.position(t),
        }
    }

    /// Whether a satellite at `sat_pos` (altitude `sat_alt_km`) can talk to the PS at `t`.
    pub fn sees(&self, sat_pos: &Position3<T>, sat_alt_km: T, t: T) -> bool {
        match self {
            PsLocation::Ground(gs) => is_visible_gs(sat_pos, &ground_station_position(gs, t), gs.min_elevation_deg),
            PsLocation::Satellite(orbit) => {
                let ps = orbit.position(t);
                match max_slant_range(sat_alt_km, orbit.altitude_km) {
                    Ok(limit) => sat_pos.distance(&ps) <= limit,
                    Err(_) => false,
                }
            }
        }
    }

    /// Longest distance over which the PS link is ever used; fixes the PS link rate.
    pub fn max_link_distance_km(&self, sat_alt_km: T) -> Result<T> {
        match self {
            PsLocation::Ground(gs) => Ok(slant_range_at_elevation(sat_alt_km, gs.min_elevation_deg)),
            PsLocation::Satellite(orbit) => max_slant_range(sat_alt_km, orbit.altitude_km),
        }
    }
}

/// `2 pi sqrt(a^3 / mu)` for a circular orbit at `altitude_km`.
pub fn orbital_period<T: Scalar>(altitude_km: T) -> Result<T> {
    let r_e = T::lit(EARTH_RADIUS_KM);
    if !altitude_km.is_finite() || altitude_km <= -r_e {
        return Err(Error::Domain(format!("altitude {altitude_km} km is not above the Earth's centre")));
    }
    let a_m = (r_e + altitude_km) * T::lit(1000.0);
    Ok(T::TAU() * (a_m * a_m * a_m / T::lit(MU_EARTH)).sqrt())
}

pub fn satellite_position<T: Scalar>(cfg: &ConstellationConfig<T>, id: SatelliteId, t: T) -> Position3<T> {
    cfg.orbit_of(id).position(t)
}

/// ECI position of a ground station (spherical Earth) after `t` seconds of rotation.
pub fn ground_station_position<T: Scalar>(gs: &GroundStationConfig<T>, t: T) -> Position3<T> {
    let r = T::lit(EARTH_RADIUS_KM) + gs.altitude_km;
    let lat = gs.latitude_deg.to_radians();
    let lon = gs.longitude_deg.to_radians() + T::lit(EARTH_ROTATION_RATE) * t;
    let (slat, clat) = lat.sin_cos();
    let (slon, clon) = lon.sin_cos();
    Position3::new(r * clat * clon, r * clat * slon, r * slat)
}

/// Elevation of `sat_pos` above the local horizon of `gs_pos`, in degrees.
pub fn elevation_deg<T: Scalar>(sat_pos: &Position3<T>, gs_pos: &Position3<T>) -> T {
    let los = *sat_pos - *gs_pos;
    let s = gs_pos.dot(&los) / (gs_pos.norm() * los.norm());
    s.max(-T::one()).min(T::one()).asin().to_degrees()
}

pub fn is_visible_gs<T: Scalar>(sat_pos: &Position3<T>, gs_pos: &Position3<T>, min_elevation_deg: T) -> bool {
    elevation_deg(sat_pos, gs_pos) >= min_elevation_deg
}

/// Longest line of sight between satellites at `h1` and `h2` km that stays
/// above the thermosphere floor.
pub fn max_slant_range<T: Scalar>(h1_km: T, h2_km: T) -> Result<T> {
    let floor = T::lit(THERMOSPHERE_FLOOR_KM);
    if !(h1_km > floor) || !(h2_km > floor) {
        return Err(Error::Domain(format!("altitudes {h1_km}, {h2_km} km must exceed {floor} km")));
    }
    let r_e = T::lit(EARTH_RADIUS_KM);
    let r_t = r_e + floor;
    let leg = |h: T| ((h + r_e).powi(2) - r_t * r_t).sqrt();
    Ok(leg(h1_km) + leg(h2_km))
}

/// Slant range from a ground station to a satellite at `alt_km` seen at `elevation_deg`.
pub fn slant_range_at_elevation<T: Scalar>(alt_km: T, elevation_deg: T) -> T {
    let r_e = T::lit(EARTH_RADIUS_KM);
    let r = r_e + alt_km;
    let e = elevation_deg.to_radians();
    ((r * r - (r_e * e.cos()).powi(2)).sqrt()) - r_e * e.sin()
}

/// Whether the ISL between two distinct satellites of the constellation is usable at `t`.
pub fn isl_feasible<T: Scalar>(cfg: &ConstellationConfig<T>, a: SatelliteId, b: SatelliteId, t: T) -> Result<bool> {
    if a == b {
        return Err(Error::Domain(format!("ISL endpoints must differ, got {a} twice")));
    }
    let d = satellite_position(cfg, a, t).distance(&satellite_position(cfg, b, t));
    Ok(d <= max_slant_range(cfg.altitude_km, cfg.altitude_km)?)
}

pub fn ps_visible<T: Scalar>(cfg: &ConstellationConfig<T>, id: SatelliteId, ps: &PsLocation<T>, t: T) -> bool {
    ps.sees(&satellite_position(cfg, id, t), cfg.altitude_km, t)
}

/// Coarse grid step and boundary tolerance of the contact search, in seconds.
pub const CONTACT_GRID_STEP: f64 = 1.0;
pub const CONTACT_TOLERANCE: f64 = 1e-3;

/// Earliest maximal interval in `[t_start, t_start + horizon]` on which `pred` holds.
///
/// The predicate is sampled on a `step` grid and both boundaries are refined
/// by bisection to `tol`. Windows shorter than `step` may be missed.
pub fn find_next_window<T: Scalar>(pred: impl Fn(T) -> bool, t_start: T, horizon: T, step: T, tol: T) -> Option<(T, T)> {
    let t_stop = t_start + horizon;
    let refine = |mut lo: T, mut hi: T, lo_state: bool| {
        while hi - lo > tol {
            let mid = (lo + hi) / T::lit(2.0);
            if pred(mid) == lo_state {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        (lo, hi)
    };

    let begin = if pred(t_start) {
        t_start
    } else {
        let mut prev = t_start;
        loop {
            if prev >= t_stop {
                return None;
            }
            let next = (prev + step).min(t_stop);
            if pred(next) {
                break refine(prev, next, false).1;
            }
            prev = next;
        }
    };

    let mut prev = begin;
    loop {
        if prev >= t_stop {
            return Some((begin, t_stop));
        }
        let next = (prev + step).min(t_stop);
        if !pred(next) {
            return Some((begin, refine(prev, next, true).0));
        }
        prev = next;
    }
}

pub fn next_contact_window<T: Scalar>(cfg: &ConstellationConfig<T>, id: SatelliteId, ps: &PsLocation<T>, t_start: T, horizon: T) -> Result<Option<(T, T)>> {
    if !(horizon > T::zero()) {
        return Err(Error::Domain(format!("horizon {horizon} must be positive")));
    }
    Ok(find_next_window(|t| ps_visible(cfg, id, ps, t), t_start, horizon, T::lit(CONTACT_GRID_STEP), T::lit(CONTACT_TOLERANCE)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn wdelta() -> ConstellationConfig<f64> {
        ConstellationConfig::walker(WalkerPattern::Delta, 60.0, 2000.0, 40, 5, 1)
    }

    #[test]
    fn period_reference_values() {
        let p550: f64 = orbital_period(550.0).unwrap();
        assert!((p550 / 60.0 - 95.6).abs() < 0.1, "{p550}");
        assert!((orbital_period(2000.0_f64).unwrap() - 7627.0).abs() < 1.0);
        assert!(orbital_period(500.0).unwrap() < p550);
        assert!(orbital_period(-7000.0_f64).is_err());
        assert!(orbital_period(f64::NAN).is_err());
    }

    #[test]
    fn period_generic_over_f32() {
        let p = orbital_period(550.0_f32).unwrap();
        assert!((p - 5734.6).abs() < 1.0);
    }

    #[test]
    fn equatorial_origin() {
        let cfg = ConstellationConfig::walker(WalkerPattern::Delta, 0.0, 550.0, 4, 1, 0);
        let p = satellite_position(&cfg, SatelliteId::new(1, 1), 0.0);
        assert_relative_eq!(p.x, EARTH_RADIUS_KM + 550.0, max_relative = 1e-12);
        assert!(p.y.abs() < 1e-9 && p.z.abs() < 1e-9);
    }

    #[test]
    fn trailing_satellite_relation() {
        let cfg = wdelta();
        let period = cfg.period();
        for t in [0.0, 1234.5, 9000.0] {
            let a = satellite_position(&cfg, SatelliteId::new(3, 4), t - period / 8.0);
            let b = satellite_position(&cfg, SatelliteId::new(3, 5), t);
            assert!(a.distance(&b) / a.norm() < 1e-9);
        }
    }

    #[test]
    fn walker_phasing_is_nine_degrees_for_40_5_1() {
        let cfg = wdelta();
        let o1 = cfg.orbit_of(SatelliteId::new(1, 1));
        let o2 = cfg.orbit_of(SatelliteId::new(2, 1));
        assert_relative_eq!(o2.phase_deg - o1.phase_deg, 9.0, epsilon = 1e-12);
        assert_relative_eq!(o2.raan_deg - o1.raan_deg, 72.0, epsilon = 1e-12);
        let star = ConstellationConfig::walker(WalkerPattern::Star, 85.0, 2000.0, 40, 5, 1);
        assert_relative_eq!(star.raan_spacing(), 36.0, epsilon = 1e-12);
    }

    #[test]
    fn ground_station_rotation() {
        let gs = GroundStationConfig::<f64>::bremen();
        let p0 = ground_station_position(&gs, 0.0);
        let lat = 53.079_f64.to_radians();
        assert_relative_eq!(p0.z, EARTH_RADIUS_KM * lat.sin(), max_relative = 1e-12);
        let p1 = ground_station_position(&gs, SIDEREAL_DAY);
        assert!(p0.distance(&p1) / p0.norm() < 1e-6);
        for t in [10.0, 5000.0, 40000.0] {
            assert_relative_eq!(ground_station_position(&gs, t).norm(), p0.norm(), max_relative = 1e-12);
        }
    }

    #[test]
    fn visibility_zenith_and_antipode() {
        let gs = Position3::new(EARTH_RADIUS_KM, 0.0, 0.0);
        let zenith = Position3::new(EARTH_RADIUS_KM + 550.0, 0.0, 0.0);
        let antipode = Position3::new(-EARTH_RADIUS_KM - 550.0, 0.0, 0.0);
        assert!(is_visible_gs(&zenith, &gs, 89.9));
        assert!(!is_visible_gs(&antipode, &gs, 0.0));
    }

    #[test]
    fn slant_range_values() {
        let d: f64 = max_slant_range(2000.0, 2000.0).unwrap();
        assert!((d - 10669.0).abs() < 1.0, "{d}");
        assert_eq!(max_slant_range(500.0, 2000.0).unwrap(), max_slant_range(2000.0, 500.0).unwrap());
        assert!(max_slant_range(80.0, 500.0).is_err());
        let near: f64 = max_slant_range(80.0 + 1e-9, 500.0).unwrap();
        assert!((near - max_slant_range(500.0, 500.0).unwrap() / 2.0).abs() < 0.1);
        // zenith slant range is the altitude itself
        assert_relative_eq!(slant_range_at_elevation(550.0, 90.0), 550.0, epsilon = 1e-9);
    }

    #[test]
    fn isl_feasibility() {
        let cfg = ConstellationConfig::walker(WalkerPattern::Delta, 60.0, 2000.0, 8, 1, 0);
        let chord: f64 = cfg.neighbor_distance_km();
        assert!((chord - 6406.0).abs() < 1.0, "{chord}");
        assert!(isl_feasible(&cfg, SatelliteId::new(1, 1), SatelliteId::new(1, 2), 100.0).unwrap());
        let opposite = ConstellationConfig::walker(WalkerPattern::Delta, 60.0, 550.0, 2, 1, 0);
        assert!(!isl_feasible(&opposite, SatelliteId::new(1, 1), SatelliteId::new(1, 2), 0.0).unwrap());
        assert!(isl_feasible(&cfg, SatelliteId::new(1, 1), SatelliteId::new(1, 1), 0.0).is_err());
    }

    #[test]
    fn overhead_pass_is_under_ten_minutes() {
        let cfg = ConstellationConfig::walker(WalkerPattern::Delta, 0.0, 550.0, 1, 1, 0);
        // station on the equator under the ascending node, one quarter orbit ahead
        let gs = GroundStationConfig { latitude_deg: 0.0, longitude_deg: 60.0, altitude_km: 0.0, min_elevation_deg: 10.0 };
        let ps = PsLocation::Ground(gs);
        let (b, e) = next_contact_window(&cfg, SatelliteId::new(1, 1), &ps, 0.0, 6000.0).unwrap().unwrap();
        assert!(b > 0.0);
        assert!(e - b < 600.0 && e - b > 240.0, "{}", e - b);
    }

    #[test]
    fn window_in_progress_and_out_of_horizon() {
        let cfg = ConstellationConfig::walker(WalkerPattern::Delta, 0.0, 550.0, 1, 1, 0);
        let gs = GroundStationConfig { latitude_deg: 0.0, longitude_deg: 0.0, altitude_km: 0.0, min_elevation_deg: 10.0 };
        let ps = PsLocation::Ground(gs);
        let (b, _) = next_contact_window(&cfg, SatelliteId::new(1, 1), &ps, 0.0, 1000.0).unwrap().unwrap();
        assert_eq!(b, 0.0);
        assert!(next_contact_window(&cfg, SatelliteId::new(1, 1), &ps, 1000.0, 100.0).unwrap().is_none());
        assert!(next_contact_window(&cfg, SatelliteId::new(1, 1), &ps, 0.0, 0.0).is_err());
    }

    #[test]
    fn leo_ps_gives_near_persistent_plane_coverage() {
        let cfg = wdelta();
        let ps = PsLocation::Satellite(CircularOrbit { altitude_km: 500.0, inclination_deg: 0.0, raan_deg: 0.0, phase_deg: 0.0 });
        let plane = 2;
        let mut covered = 0;
        let samples = 2000;
        for s in 0..samples {
            let t = s as f64 * 30.0;
            if (1..=8).any(|i| ps_visible(&cfg, SatelliteId::new(plane, i), &ps, t)) {
                covered += 1;
            }
        }
        assert!(covered as f64 / samples as f64 > 0.9, "{covered}");
    }

    fn brute_window(pred: impl Fn(f64) -> bool, t0: f64, horizon: f64) -> Option<(f64, f64)> {
        let n = (horizon / 0.1).round() as usize;
        let mut begin = None;
        for s in 0..=n {
            let t = t0 + s as f64 * 0.1;
            match (begin, pred(t)) {
                (None, true) => begin = Some(t),
                (Some(b), false) => return Some((b, t - 0.1)),
                _ => {}
            }
        }
        begin.map(|b| (b, t0 + horizon))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(12))]

        #[test]
        fn radius_and_period_invariants(inc in 0.0..180.0_f64, alt in 300.0..3000.0_f64, slot in 1usize..=8, t in 0.0..1e5_f64) {
            let cfg = ConstellationConfig::walker(WalkerPattern::Delta, inc, alt, 16, 2, 1);
            let id = SatelliteId::new(2, slot);
            let p = satellite_position(&cfg, id, t);
            prop_assert!((p.norm() - (EARTH_RADIUS_KM + alt)).abs() / p.norm() < 1e-6);
            let q = satellite_position(&cfg, id, t + cfg.period());
            prop_assert!(p.distance(&q) / p.norm() < 1e-9);
            let n = satellite_position(&cfg, id.next(8), t);
            let n0 = satellite_position(&cfg, id.next(8), 0.0);
            let p0 = satellite_position(&cfg, id, 0.0);
            prop_assert!(((p.distance(&n) - p0.distance(&n0)) / p0.distance(&n0)).abs() < 1e-6);
        }

        #[test]
        fn window_search_matches_grid_scan(inc in 0.0..90.0_f64, lat in -50.0..50.0_f64, lon in 0.0..360.0_f64, t0 in 0.0..20000.0_f64) {
            let cfg = ConstellationConfig::walker(WalkerPattern::Delta, inc, 800.0, 1, 1, 0);
            let ps = PsLocation::Ground(GroundStationConfig { latitude_deg: lat, longitude_deg: lon, altitude_km: 0.0, min_elevation_deg: 10.0 });
            let id = SatelliteId::new(1, 1);
            let horizon = 6000.0;
            let fast = next_contact_window(&cfg, id, &ps, t0, horizon).unwrap();
            let slow = brute_window(|t| ps_visible(&cfg, id, &ps, t), t0, horizon);
            match (fast, slow) {
                (None, None) => {}
                (Some((b1, e1)), Some((b2, e2))) => {
                    prop_assert!((b1 - b2).abs() < 0.5, "{b1} vs {b2}");
                    prop_assert!((e1 - e2).abs() < 0.5, "{e1} vs {e2}");
                }
                // a window shorter than the coarse step may legitimately differ
                (a, b) => {
                    let len = a.or(b).map(|(b, e)| e - b).unwrap();
                    prop_assert!(len < 1.0, "{a:?} vs {b:?}");
                }
            }
        }
    }
}

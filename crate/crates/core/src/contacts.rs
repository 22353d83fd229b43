//! Satellite-to-PS contact windows, computed on demand or precomputed into a plan.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::orbital::{find_next_window, ps_visible, ConstellationConfig, PsLocation, SatelliteId, CONTACT_GRID_STEP, CONTACT_TOLERANCE};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Window {
    pub begin: f64,
    pub end: f64,
}

impl Window {
    pub fn new(begin: f64, end: f64) -> Self {
        Self { begin, end }
    }

    pub fn len(&self) -> f64 {
        self.end - self.begin
    }

    pub fn is_empty(&self) -> bool {
        self.end <= self.begin
    }

    pub fn contains(&self, t: f64) -> bool {
        self.begin <= t && t <= self.end
    }
}

/// Source of PS visibility for the satellites of a constellation.
pub trait ContactOracle: Sync {
    fn visible(&self, sat: SatelliteId, t: f64) -> bool;

    /// Earliest window meeting `[t, t + horizon]`, with its begin clipped to `t`.
    fn next_window(&self, sat: SatelliteId, t: f64, horizon: f64) -> Option<Window>;

    /// Earliest window from `t` whose usable part is at least `min_len` long.
    fn next_fitting_window(&self, sat: SatelliteId, t: f64, horizon: f64, min_len: f64) -> Option<Window> {
        let stop = t + horizon;
        let mut from = t;
        while from < stop {
            let w = self.next_window(sat, from, stop - from)?;
            if w.len() >= min_len {
                return Some(w);
            }
            if w.end >= stop {
                return None;
            }
            from = w.end + CONTACT_TOLERANCE;
        }
        None
    }
}

/// Visibility straight from the orbital model.
pub struct Geometric<'a> {
    pub cfg: &'a ConstellationConfig<f64>,
    pub ps: &'a PsLocation<f64>,
}

impl ContactOracle for Geometric<'_> {
    fn visible(&self, sat: SatelliteId, t: f64) -> bool {
        ps_visible(self.cfg, sat, self.ps, t)
    }

    fn next_window(&self, sat: SatelliteId, t: f64, horizon: f64) -> Option<Window> {
        find_next_window(|x| self.visible(sat, x), t, horizon, CONTACT_GRID_STEP, CONTACT_TOLERANCE).map(|(b, e)| Window::new(b, e))
    }
}

/// Precomputed windows for every satellite over `[t_start, t_end]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContactPlan {
    pub planes: usize,
    pub sats_per_plane: usize,
    pub t_start: f64,
    pub t_end: f64,
    /// Sorted, disjoint windows per flat satellite index.
    pub windows: Vec<Vec<Window>>,
}

impl ContactPlan {
    pub fn from_geometry(cfg: &ConstellationConfig<f64>, ps: &PsLocation<f64>, t_start: f64, t_end: f64) -> Result<Self> {
        cfg.validate()?;
        if !(t_end > t_start) {
            return Err(Error::Domain(format!("empty plan interval [{t_start}, {t_end}]")));
        }
        let windows = cfg
            .ids()
            .map(|id| {
                let mut out = Vec::new();
                let mut t = t_start;
                while let Some((b, e)) = find_next_window(|x| ps_visible(cfg, id, ps, x), t, t_end - t, CONTACT_GRID_STEP, CONTACT_TOLERANCE) {
                    out.push(Window::new(b, e));
                    if e >= t_end {
                        break;
                    }
                    // step past the refined boundary so the next search starts outside the window
                    t = e + CONTACT_TOLERANCE;
                    if t >= t_end {
                        break;
                    }
                }
                out
            })
            .collect();
        Ok(Self { planes: cfg.num_planes, sats_per_plane: cfg.sats_per_plane, t_start, t_end, windows })
    }

    /// Scripted plan; windows per flat index are sorted and merged.
    pub fn from_windows(planes: usize, sats_per_plane: usize, t_end: f64, mut windows: Vec<Vec<Window>>) -> Result<Self> {
        if windows.len() != planes * sats_per_plane {
            return Err(Error::DimensionMismatch { expected: planes * sats_per_plane, got: windows.len() });
        }
        for ws in &mut windows {
            ws.retain(|w| !w.is_empty());
            ws.sort_by(|a, b| a.begin.total_cmp(&b.begin));
            let mut merged: Vec<Window> = Vec::with_capacity(ws.len());
            for w in ws.drain(..) {
                match merged.last_mut() {
                    Some(last) if w.begin <= last.end => last.end = last.end.max(w.end),
                    _ => merged.push(w),
                }
            }
            *ws = merged;
        }
        Ok(Self { planes, sats_per_plane, t_start: 0.0, t_end, windows })
    }

    fn index(&self, sat: SatelliteId) -> usize {
        (sat.plane - 1) * self.sats_per_plane + (sat.slot - 1)
    }

    pub fn windows_of(&self, sat: SatelliteId) -> &[Window] {
        &self.windows[self.index(sat)]
    }

    /// Fraction of `[t0, t1]` in which at least one satellite of `plane` sees the PS.
    pub fn plane_coverage(&self, plane: usize, t0: f64, t1: f64) -> f64 {
        let mut all: Vec<Window> = (1..=self.sats_per_plane)
            .flat_map(|s| self.windows_of(SatelliteId::new(plane, s)).iter().copied())
            .filter_map(|w| {
                let w = Window::new(w.begin.max(t0), w.end.min(t1));
                (!w.is_empty()).then_some(w)
            })
            .collect();
        all.sort_by(|a, b| a.begin.total_cmp(&b.begin));
        let mut covered = 0.0;
        let mut cur: Option<Window> = None;
        for w in all {
            match cur.as_mut() {
                Some(c) if w.begin <= c.end => c.end = c.end.max(w.end),
                _ => {
                    if let Some(c) = cur {
                        covered += c.len();
                    }
                    cur = Some(w);
                }
            }
        }
        if let Some(c) = cur {
            covered += c.len();
        }
        covered / (t1 - t0)
    }
}

impl ContactOracle for ContactPlan {
    fn visible(&self, sat: SatelliteId, t: f64) -> bool {
        let ws = self.windows_of(sat);
        let i = ws.partition_point(|w| w.end < t);
        ws.get(i).is_some_and(|w| w.begin <= t)
    }

    fn next_window(&self, sat: SatelliteId, t: f64, horizon: f64) -> Option<Window> {
        let ws = self.windows_of(sat);
        let i = ws.partition_point(|w| w.end <= t);
        let w = ws.get(i)?;
        if w.begin > t + horizon {
            return None;
        }
        Some(Window::new(w.begin.max(t), w.end))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::orbital::{GroundStationConfig, WalkerPattern};

    #[test]
    fn plan_matches_geometry() {
        let cfg = ConstellationConfig::walker(WalkerPattern::Delta, 60.0, 2000.0, 8, 1, 0);
        let ps = PsLocation::Ground(GroundStationConfig::bremen());
        let plan = ContactPlan::from_geometry(&cfg, &ps, 0.0, 20_000.0).unwrap();
        let geo = Geometric { cfg: &cfg, ps: &ps };
        for slot in 1..=8 {
            let id = SatelliteId::new(1, slot);
            for t in [0.0, 3000.0, 7000.0, 15000.0] {
                let a = plan.next_window(id, t, 4000.0);
                let b = geo.next_window(id, t, 4000.0);
                match (a, b) {
                    (Some(a), Some(b)) => {
                        assert!((a.begin - b.begin).abs() < 0.01);
                        // the geometric search clips at its horizon, the plan does not
                        assert!((a.end - b.end).abs() < 0.01 || b.end >= t + 4000.0 - 1e-9);
                    }
                    (None, None) => {}
                    other => panic!("{other:?}"),
                }
                assert_eq!(plan.visible(id, t + 1.0), geo.visible(id, t + 1.0));
            }
        }
    }

    #[test]
    fn scripted_plan_queries() {
        let plan = ContactPlan::from_windows(1, 2, 1000.0, vec![vec![Window::new(100.0, 130.0), Window::new(120.0, 200.0), Window::new(500.0, 510.0)], vec![]])
            .unwrap();
        let a = SatelliteId::new(1, 1);
        assert_eq!(plan.windows_of(a).len(), 2);
        assert!(plan.visible(a, 150.0));
        assert!(!plan.visible(a, 300.0));
        assert_eq!(plan.next_window(a, 150.0, 10.0), Some(Window::new(150.0, 200.0)));
        assert_eq!(plan.next_window(a, 200.0, 1000.0), Some(Window::new(500.0, 510.0)));
        assert_eq!(plan.next_window(a, 210.0, 100.0), None);
        assert_eq!(plan.next_fitting_window(a, 0.0, 1000.0, 50.0), Some(Window::new(100.0, 200.0)));
        assert_eq!(plan.next_fitting_window(a, 180.0, 1000.0, 50.0), None);
        assert_eq!(plan.next_window(SatelliteId::new(1, 2), 0.0, 1000.0), None);
        assert!((plan.plane_coverage(1, 0.0, 1000.0) - 0.11).abs() < 1e-12);
        assert!(ContactPlan::from_windows(1, 2, 10.0, vec![vec![]]).is_err());
    }
}

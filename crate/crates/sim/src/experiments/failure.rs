//! Monte Carlo comparison of the sink-failure recovery schemes on a single
//! orbital plane with random learning and hop delays.

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use orbitfl_core::contacts::{ContactOracle, ContactPlan};
use orbitfl_core::orbital::{SatelliteId, WalkerPattern};
use orbitfl_core::orchestration::FailureScheme;
use orbitfl_core::rng::{purpose, stream, StreamRng};
use orbitfl_core::routing::{build_aggregation_tree, determine_new_sink, flood_params, pass_to_neighbor, select_sink, Handoff, RingDirection};
use orbitfl_core::{Constellation, Error, GroundStation, PsSite, Result};

use crate::delay::{DelayConfig, StochasticDelayModel};

/// Draws per plane size of the reference study; fewer give noticeably noisier means.
pub const MIN_DRAWS: usize = 2000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FailureConfig {
    pub inclination_deg: f64,
    pub altitude_km: f64,
    pub ps: PsSite,
    pub k_values: Vec<usize>,
    /// Nominal local training time.
    pub t_l_s: f64,
    /// Nominal time of one ISL hop.
    pub t_c_s: f64,
    /// Time to hand the aggregate to the PS once in contact.
    pub t_g_s: f64,
    /// Random additions; `None` runs the nominal times.
    pub delays: Option<DelayConfig>,
    /// Draws per plane size, split evenly over `starts` iteration start times.
    pub draws: usize,
    pub starts: usize,
    pub schemes: Vec<FailureScheme>,
    pub search_horizon_s: f64,
    pub seed: u64,
}

impl Default for FailureConfig {
    fn default() -> Self {
        Self {
            inclination_deg: 85.0,
            altitude_km: 2000.0,
            ps: PsSite::Ground(GroundStation::bremen()),
            k_values: vec![10, 20, 30, 40, 50, 60],
            t_l_s: 480.0,
            t_c_s: 50.0,
            t_g_s: 0.0,
            delays: Some(DelayConfig::failure_study()),
            draws: 2000,
            starts: 20,
            schemes: vec![FailureScheme::PassToNeighbor { direction: RingDirection::Descending }, FailureScheme::DetermineNewSink],
            search_horizon_s: 2.0 * 86_400.0,
            seed: 1,
        }
    }
}

impl FailureConfig {
    pub fn validate(&self) -> Result<()> {
        if self.k_values.is_empty() || self.k_values.contains(&0) {
            return Err(Error::Config("plane sizes must be positive".into()));
        }
        if self.draws == 0 || self.starts == 0 {
            return Err(Error::Config("draws and starts must be positive".into()));
        }
        if self.schemes.is_empty() {
            return Err(Error::Config("no failure schemes selected".into()));
        }
        if [self.t_l_s, self.t_c_s, self.t_g_s].iter().any(|t| !(*t >= 0.0)) {
            return Err(Error::Config("nominal times must be non-negative".into()));
        }
        if let Some(d) = &self.delays {
            d.validate()?;
        }
        self.plane(1).validate()
    }

    fn plane(&self, k_p: usize) -> Constellation {
        Constellation::walker(WalkerPattern::Star, self.inclination_deg, self.altitude_km, k_p, 1, 0)
    }
}

pub fn scheme_name(s: &FailureScheme) -> String {
    match s {
        FailureScheme::Wait => "wait".into(),
        FailureScheme::DetermineNewSink => "determine-new-sink".into(),
        FailureScheme::PassToNeighbor { direction: RingDirection::Descending } => "pass-to-neighbor".into(),
        FailureScheme::PassToNeighbor { direction: RingDirection::Ascending } => "pass-to-neighbor-ascending".into(),
    }
}

pub fn parse_scheme(name: &str) -> Result<FailureScheme> {
    Ok(match name {
        "wait" => FailureScheme::Wait,
        "determine-new-sink" => FailureScheme::DetermineNewSink,
        "pass-to-neighbor" | "pass-to-neighbor-descending" => FailureScheme::PassToNeighbor { direction: RingDirection::Descending },
        "pass-to-neighbor-ascending" => FailureScheme::PassToNeighbor { direction: RingDirection::Ascending },
        other => return Err(Error::Config(format!("unknown failure scheme `{other}`"))),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureRow {
    pub scheme: String,
    pub k_p: usize,
    /// Mean time from failure detection to the start of the upload.
    pub mean_s: f64,
    pub stderr_s: f64,
    pub failures: usize,
    pub draws: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FailureReport {
    pub rows: Vec<FailureRow>,
    pub warnings: Vec<String>,
}

impl FailureReport {
    pub fn mean(&self, scheme: &FailureScheme, k_p: usize) -> Option<f64> {
        let name = scheme_name(scheme);
        self.rows.iter().find(|r| r.scheme == name && r.k_p == k_p).map(|r| r.mean_s)
    }
}

/// One iteration of a plane: when the sink holds the aggregate and whether
/// it missed the planned window.
struct Iteration {
    sink: usize,
    ready: f64,
    failed: bool,
}

struct Plane<'a> {
    cfg: &'a FailureConfig,
    plan: ContactPlan,
    ring: Vec<SatelliteId>,
    delays: Option<StochasticDelayModel>,
}

impl Plane<'_> {
    fn k_p(&self) -> usize {
        self.ring.len()
    }

    fn hop(&self, rng: &mut StreamRng) -> f64 {
        self.cfg.t_c_s + self.delays.map_or(0.0, |d| d.comm_jitter(rng))
    }

    fn iteration(&self, t0: f64, learn: &mut StreamRng, comm: &mut StreamRng) -> Result<Option<Iteration>> {
        let cfg = self.cfg;
        let k_p = self.k_p();
        // the first member to see the PS receives the model
        let Some((custodian, t_start)) = self
            .ring
            .iter()
            .enumerate()
            .filter_map(|(i, &id)| self.plan.next_window(id, t0, cfg.search_horizon_s).map(|w| (i + 1, w.begin)))
            .min_by(|a, b| a.1.total_cmp(&b.1))
        else {
            return Ok(None);
        };
        let h = k_p.div_ceil(2) as f64;
        let t_hat = cfg.t_l_s + 2.0 * h * cfg.t_c_s;
        let plan = select_sink(&self.plan, &self.ring, t_start, t_hat, cfg.t_g_s, cfg.search_horizon_s)?;

        let mut arrival = vec![f64::INFINITY; k_p];
        arrival[custodian - 1] = t_start;
        for tx in flood_params(k_p, custodian)?.transmissions {
            let t = arrival[tx.from - 1] + self.hop(comm);
            arrival[tx.to - 1] = arrival[tx.to - 1].min(t);
        }
        let tree = build_aggregation_tree(k_p, plan.sink)?;
        let mut ready: Vec<f64> = arrival.iter().map(|a| a + cfg.t_l_s + self.delays.map_or(0.0, |d| d.learn_jitter(learn))).collect();
        let mut order: Vec<usize> = (1..=k_p).collect();
        order.sort_by_key(|&s| std::cmp::Reverse(tree.depth(s)));
        for slot in order {
            if let Some(parent) = tree.parent(slot) {
                let t = ready[slot - 1] + self.hop(comm);
                ready[parent - 1] = ready[parent - 1].max(t);
            }
        }
        let ready = ready[plan.sink - 1];
        Ok(Some(Iteration { sink: plan.sink, ready, failed: ready > plan.window.end - cfg.t_g_s }))
    }

    /// Time from detection to the start of the upload.
    fn handle(&self, scheme: &FailureScheme, it: &Iteration, comm: &mut StreamRng) -> Result<f64> {
        let cfg = self.cfg;
        let own_window = |slot: usize, t: f64| -> Result<f64> {
            self.plan
                .next_fitting_window(self.ring[slot - 1], t, cfg.search_horizon_s, cfg.t_g_s)
                .map(|w| w.begin.max(t))
                .ok_or_else(|| Error::Planning(format!("{} has no PS contact within the search horizon", self.ring[slot - 1])))
        };
        let delivery = match scheme {
            FailureScheme::Wait => own_window(it.sink, it.ready)?,
            FailureScheme::DetermineNewSink => {
                // hop time t_c expressed as bits / rate with unit rate; t_g is the guard
                let handoff = Handoff { aggregate_bits: cfg.t_c_s, rho: 1.0, d_m: 0.0, t_g: cfg.t_g_s, upload_time: 0.0, search_horizon: cfg.search_horizon_s };
                determine_new_sink(&self.plan, &self.ring, it.sink, it.ready, &handoff)?.delivery
            }
            FailureScheme::PassToNeighbor { direction } => {
                pass_to_neighbor(&self.plan, &self.ring, it.sink, *direction, it.ready, cfg.t_g_s, cfg.search_horizon_s, || self.hop(comm))?.delivery
            }
        };
        Ok(delivery - it.ready)
    }
}

fn mean_stderr(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (0.0, 0.0);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

fn run_plane(cfg: &FailureConfig, k_p: usize) -> Result<Vec<FailureRow>> {
    let constellation = cfg.plane(k_p);
    let period = constellation.period();
    let plan = ContactPlan::from_geometry(&constellation, &cfg.ps, 0.0, period + 2.0 * cfg.search_horizon_s)?;
    let plane = Plane { cfg, ring: constellation.ids().collect(), plan, delays: cfg.delays.as_ref().map(StochasticDelayModel::new).transpose()? };
    let mut start_rng = stream(cfg.seed, purpose::START_TIME, k_p as u64, 0);
    let per_start = cfg.draws.div_ceil(cfg.starts);
    let mut samples: Vec<Vec<f64>> = vec![Vec::new(); cfg.schemes.len()];
    let mut draws = 0;
    'outer: for s in 0..cfg.starts {
        let t0 = start_rng.random_range(0.0..period);
        for d in 0..per_start {
            if draws == cfg.draws {
                break 'outer;
            }
            let id = (s * per_start + d) as u64;
            let mut learn = stream(cfg.seed, purpose::LEARN_JITTER, k_p as u64, id);
            let mut comm = stream(cfg.seed, purpose::COMM_JITTER, k_p as u64, id);
            draws += 1;
            let Some(it) = plane.iteration(t0, &mut learn, &mut comm)? else {
                continue;
            };
            if !it.failed {
                continue;
            }
            for (i, scheme) in cfg.schemes.iter().enumerate() {
                // same failure, independent handling delays per scheme
                let mut rng = stream(cfg.seed, purpose::COMM_JITTER, k_p as u64 | (i as u64 + 1) << 32, id);
                samples[i].push(plane.handle(scheme, &it, &mut rng)?);
            }
        }
    }
    Ok(cfg
        .schemes
        .iter()
        .zip(&samples)
        .map(|(scheme, xs)| {
            let (mean_s, stderr_s) = mean_stderr(xs);
            FailureRow { scheme: scheme_name(scheme), k_p, mean_s, stderr_s, failures: xs.len(), draws }
        })
        .collect())
}

/// Mean failure-handling time per scheme and plane size.
pub fn run_failure_experiment(cfg: &FailureConfig) -> Result<FailureReport> {
    cfg.validate()?;
    let mut warnings = Vec::new();
    if cfg.draws < MIN_DRAWS {
        let w = format!("only {} draws per plane size; means are noisy below {MIN_DRAWS}", cfg.draws);
        log::warn!("{w}");
        warnings.push(w);
    }
    let rows: Vec<Vec<FailureRow>> = cfg.k_values.par_iter().map(|&k| run_plane(cfg, k)).collect::<Result<_>>()?;
    Ok(FailureReport { rows: rows.into_iter().flatten().collect(), warnings })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nominal_times_never_fail() {
        let cfg = FailureConfig { k_values: vec![12], delays: None, draws: 40, starts: 4, ..FailureConfig::default() };
        let report = run_failure_experiment(&cfg).unwrap();
        for r in &report.rows {
            assert_eq!((r.failures, r.mean_s), (0, 0.0), "{r:?}");
        }
        assert_eq!(report.warnings.len(), 1);
    }

    #[test]
    fn scheme_names_round_trip() {
        for s in FailureConfig::default().schemes.iter().chain([&FailureScheme::Wait]) {
            assert_eq!(&parse_scheme(&scheme_name(s)).unwrap(), s);
        }
        assert!(parse_scheme("teleport").is_err());
    }
}

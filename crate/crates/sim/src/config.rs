//! Scenario files: schema, built-in presets and `preset` inheritance.

use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use orbitfl_core::flcore::{PartitionMode, SyntheticSpec};
use orbitfl_core::orbital::{max_slant_range, CircularOrbit, GroundStationConfig, PsLocation, WalkerPattern};
use orbitfl_core::orchestration::{FailureScheme, Termination};
use orbitfl_core::{Constellation, CostModel, Error, LinkBudget, PsSite, Result, Training};

use crate::delay::DelayConfig;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "lowercase", deny_unknown_fields)]
pub enum Orchestration {
    #[default]
    Sync,
    Async {
        /// Minimum time between two uploads of one cluster, seconds.
        t_u_s: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum DataSource {
    Synthetic {
        #[serde(default)]
        spec: SyntheticSpec,
        /// Extra samples drawn from the same classes for testing.
        test_samples: usize,
    },
    /// MNIST-style IDX files.
    Idx { train_images: PathBuf, train_labels: PathBuf, test_images: PathBuf, test_labels: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    pub source: DataSource,
    pub partition: PartitionMode,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self { source: DataSource::Synthetic { spec: SyntheticSpec::default(), test_samples: 1000 }, partition: PartitionMode::Dirichlet { beta: 0.5 } }
    }
}

fn yes() -> bool {
    true
}

fn default_elem_bits() -> u32 {
    32
}

fn default_compute() -> CostModel {
    CostModel::fixed(60.0)
}

fn one() -> f64 {
    1.0
}

fn default_retry() -> f64 {
    60.0
}

fn default_search() -> f64 {
    86_400.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default)]
    pub name: String,
    pub constellation: Constellation,
    pub ps: PsSite,
    /// Intra-plane links; without them every satellite is its own cluster.
    #[serde(default = "yes")]
    pub isl: bool,
    #[serde(default)]
    pub orchestration: Orchestration,
    #[serde(default)]
    pub data: DataConfig,
    #[serde(default)]
    pub train: Training,
    /// Top-q ratio; absent means dense updates.
    #[serde(default)]
    pub sparsify_q: Option<f64>,
    #[serde(default = "default_elem_bits")]
    pub elem_bits: u32,
    #[serde(default)]
    pub link: LinkBudget,
    #[serde(default = "default_compute")]
    pub compute: CostModel,
    /// Random learning and ISL delays; absent means deterministic.
    #[serde(default)]
    pub delays: Option<DelayConfig>,
    #[serde(default)]
    pub failure: FailureScheme,
    #[serde(default)]
    pub termination: Termination,
    /// Simulated time limit, seconds.
    pub horizon_s: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub server_lr: f64,
    /// Poll interval of idle satellites in contact with the PS.
    #[serde(default = "default_retry")]
    pub retry_s: f64,
    /// How far ahead contact searches look.
    #[serde(default = "default_search")]
    pub search_horizon_s: f64,
}

impl ScenarioConfig {
    pub fn validate(&self) -> Result<()> {
        let c = &self.constellation;
        // an empty constellation is a valid, trivially finished scenario
        if c.num_planes > 0 {
            c.validate()?;
        }
        match &self.ps {
            PsLocation::Ground(gs) => gs.validate()?,
            PsLocation::Satellite(o) => {
                o.period()?;
            }
        }
        self.link.validate()?;
        if self.isl && c.sats_per_plane > 1 {
            let limit = max_slant_range(c.altitude_km, c.altitude_km)?;
            let chord = c.neighbor_distance_km();
            if chord > limit {
                return Err(Error::Config(format!("neighbouring satellites are {chord:.0} km apart, beyond the {limit:.0} km line-of-sight limit")));
            }
        }
        if let Some(q) = self.sparsify_q {
            if !(q > 0.0 && q <= 1.0) {
                return Err(Error::Config(format!("sparsify_q {q} outside (0, 1]")));
            }
        }
        if ![16, 32, 64].contains(&self.elem_bits) {
            return Err(Error::Config(format!("elem_bits {} must be 16, 32 or 64", self.elem_bits)));
        }
        if !(self.horizon_s >= 0.0) || !self.horizon_s.is_finite() {
            return Err(Error::Config(format!("horizon_s {} must be finite and nonnegative", self.horizon_s)));
        }
        if !(self.retry_s > 0.0) || !(self.search_horizon_s > 0.0) {
            return Err(Error::Config("retry_s and search_horizon_s must be positive".into()));
        }
        if let Orchestration::Async { t_u_s } = self.orchestration {
            if !(t_u_s >= 0.0) {
                return Err(Error::Config(format!("t_u_s {t_u_s} must be nonnegative")));
            }
        }
        if let Some(d) = &self.delays {
            d.validate()?;
        }
        if self.train.batch_size == 0 || !(self.train.lr > 0.0) {
            return Err(Error::Config("train.batch_size and train.lr must be positive".into()));
        }
        if let Some(t) = self.compute.fixed_override {
            if !(t >= 0.0) {
                return Err(Error::Config(format!("compute.fixed_override {t} must be nonnegative")));
            }
        } else if !(self.compute.cpu_hz > 0.0) {
            return Err(Error::Config("compute.cpu_hz must be positive".into()));
        }
        Ok(())
    }
}

/// Names of the built-in presets.
pub fn preset_names() -> Vec<String> {
    let mut out = Vec::new();
    for c in ["wdelta", "wstar"] {
        for p in ["gs", "leo"] {
            for m in ["sync", "async"] {
                for l in ["isl", "noisl"] {
                    out.push(format!("{c}-{p}-{m}-{l}"));
                }
            }
        }
    }
    out
}

/// Equatorial PS satellite at 500 km.
pub fn leo_ps() -> PsSite {
    PsLocation::Satellite(CircularOrbit { altitude_km: 500.0, inclination_deg: 0.0, raan_deg: 0.0, phase_deg: 0.0 })
}

/// Built-in scenario `{wdelta|wstar}-{gs|leo}-{sync|async}-{isl|noisl}`.
pub fn preset(name: &str) -> Option<ScenarioConfig> {
    let parts: Vec<&str> = name.split('-').collect();
    let [c, p, m, l] = parts[..] else {
        return None;
    };
    let constellation = match c {
        "wdelta" => Constellation::walker(WalkerPattern::Delta, 60.0, 2000.0, 40, 5, 1),
        "wstar" => Constellation::walker(WalkerPattern::Star, 85.0, 2000.0, 40, 5, 1),
        _ => return None,
    };
    let ps = match p {
        "gs" => PsLocation::Ground(GroundStationConfig::bremen()),
        "leo" => leo_ps(),
        _ => return None,
    };
    let orchestration = match m {
        "sync" => Orchestration::Sync,
        "async" => Orchestration::Async { t_u_s: 147.0 * 60.0 },
        _ => return None,
    };
    let isl = match l {
        "isl" => true,
        "noisl" => false,
        _ => return None,
    };
    Some(ScenarioConfig {
        name: name.to_string(),
        constellation,
        ps,
        isl,
        orchestration,
        data: DataConfig::default(),
        train: Training { epochs: 1, batch_size: 10, lr: 0.1 },
        sparsify_q: None,
        elem_bits: 32,
        link: LinkBudget::default(),
        compute: CostModel::fixed(60.0),
        delays: None,
        failure: FailureScheme::DetermineNewSink,
        termination: Termination::default(),
        horizon_s: 12.0 * 3600.0,
        seed: 0,
        server_lr: 1.0,
        retry_s: 60.0,
        search_horizon_s: 86_400.0,
    })
}

/// Two satellites 40 degrees apart on an equatorial 550 km orbit over an
/// equatorial ground station, each needing 15 minutes to train.
///
/// The trailing satellite reaches the station about 11 minutes after the
/// leading one, so with ISLs it can upload the joint update during the same
/// pass; without them each satellite waits for its next pass.
pub fn two_satellite_pass(isl: bool) -> ScenarioConfig {
    let mut constellation = Constellation::walker(WalkerPattern::Delta, 0.0, 550.0, 2, 1, 0);
    constellation.slot_spacing_deg = Some(40.0);
    ScenarioConfig {
        name: format!("two-satellite-{}", if isl { "isl" } else { "noisl" }),
        constellation,
        ps: PsLocation::Ground(GroundStationConfig { latitude_deg: 0.0, longitude_deg: 0.0, altitude_km: 0.0, min_elevation_deg: 10.0 }),
        isl,
        orchestration: Orchestration::Sync,
        data: DataConfig {
            source: DataSource::Synthetic { spec: SyntheticSpec { samples: 400, ..SyntheticSpec::default() }, test_samples: 200 },
            partition: PartitionMode::Iid,
        },
        train: Training { epochs: 1, batch_size: 10, lr: 0.1 },
        sparsify_q: None,
        elem_bits: 32,
        link: LinkBudget::default(),
        compute: CostModel::fixed(900.0),
        delays: None,
        failure: FailureScheme::DetermineNewSink,
        termination: Termination { max_updates: Some(1), ..Termination::default() },
        horizon_s: 6.0 * 3600.0,
        seed: 0,
        server_lr: 1.0,
        retry_s: 60.0,
        search_horizon_s: 86_400.0,
    }
}

fn merge(base: &mut Value, over: Value) {
    match (base, over) {
        (Value::Object(b), Value::Object(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    // tagged enums switch variant wholesale
                    Some(slot) if slot.is_object() && v.is_object() && !switches_variant(slot, &v) => merge(slot, v),
                    _ => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (b, o) => *b = o,
    }
}

fn switches_variant(base: &Value, over: &Value) -> bool {
    ["kind", "mode", "scheme"].iter().any(|tag| over.get(tag).is_some_and(|t| base.get(tag) != Some(t)))
}

/// Resolves `preset` inheritance and deserializes, reporting the offending field.
pub fn from_value(mut v: Value) -> Result<ScenarioConfig> {
    if let Some(Value::String(name)) = v.as_object_mut().and_then(|o| o.remove("preset")) {
        let base = preset(&name).ok_or_else(|| Error::Config(format!("unknown preset `{name}`; known: {}", preset_names().join(", "))))?;
        let mut resolved = serde_json::to_value(base).map_err(|e| Error::Config(e.to_string()))?;
        merge(&mut resolved, v);
        v = resolved;
    }
    let cfg: ScenarioConfig = serde_path_to_error::deserialize(v).map_err(|e| Error::Config(format!("field `{}`: {}", e.path(), e.inner())))?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn parse_str(text: &str) -> Result<ScenarioConfig> {
    let v: Value = serde_json::from_str(text).map_err(|e| Error::Config(format!("line {} column {}: {e}", e.line(), e.column())))?;
    if !v.is_object() {
        return Err(Error::Config("scenario must be a JSON object".into()));
    }
    from_value(v)
}

pub fn load(path: &Path) -> Result<ScenarioConfig> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    parse_str(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

/// Any JSON document, reporting the offending field on schema errors.
pub fn load_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
    let de = &mut serde_json::Deserializer::from_str(&text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let inner = e.inner();
        Error::Config(format!("{}: line {} column {}, field `{}`: {inner}", path.display(), inner.line(), inner.column(), e.path()))
    })
}

/// A scenario naming just a preset.
pub fn from_preset(name: &str) -> Result<ScenarioConfig> {
    let mut m = Map::new();
    m.insert("preset".into(), Value::String(name.into()));
    from_value(Value::Object(m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn every_preset_validates_and_round_trips() {
        for name in preset_names() {
            let cfg = from_preset(&name).unwrap();
            let text = serde_json::to_string(&cfg).unwrap();
            assert_eq!(parse_str(&text).unwrap(), cfg, "{name}");
        }
        assert!(from_preset("wdelta-mars-sync-isl").is_err());
    }

    #[test]
    fn inheritance_overrides_fields() {
        let cfg = parse_str(
            r#"{"preset": "wdelta-gs-sync-isl", "seed": 7, "constellation": {"altitude_km": 1500.0},
            "orchestration": {"mode": "async", "t_u_s": 600.0}}"#,
        )
        .unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.constellation.altitude_km, 1500.0);
        assert_eq!(cfg.constellation.num_planes, 5);
        assert_eq!(cfg.orchestration, Orchestration::Async { t_u_s: 600.0 });
    }

    #[test]
    fn diagnostics_name_the_problem() {
        let err = parse_str(r#"{"preset": "wdelta-gs-sync-isl", "bogus": 1}"#).unwrap_err().to_string();
        assert!(err.contains("bogus"), "{err}");
        let err = parse_str(r#"{"preset": "wdelta-gs-sync-isl", "train": {"epochs": "x"}}"#).unwrap_err().to_string();
        assert!(err.contains("train.epochs"), "{err}");
        let err = parse_str("{\n  \"seed\": ,\n}").unwrap_err().to_string();
        assert!(err.contains("line 2"), "{err}");
        let err = parse_str(r#"{"preset": "wdelta-gs-sync-isl", "sparsify_q": 1.5}"#).unwrap_err().to_string();
        assert!(err.contains("sparsify_q"), "{err}");
    }

    #[test]
    fn line_of_sight_is_enforced() {
        let err = parse_str(
            r#"{"preset": "wdelta-gs-sync-isl", "constellation": {"altitude_km": 550.0, "num_planes": 1, "sats_per_plane": 2, "slot_spacing_deg": 45.0}}"#,
        )
        .unwrap_err()
        .to_string();
        assert!(err.contains("line-of-sight"), "{err}");
    }
}

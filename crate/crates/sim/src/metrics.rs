//! Run measurements and their CSV/JSON files.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::Serialize;

use orbitfl_core::{Error, Result};

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize)]
pub struct Traffic {
    pub isl_bits: u64,
    pub ps_bits: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct FailureRecord {
    pub cluster: usize,
    pub iteration: u64,
    pub detected_at: f64,
    /// Upload acknowledged by the PS.
    pub delivered_at: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct Metrics {
    /// `(t, top-1 accuracy)` after every global update.
    pub accuracy: Vec<(f64, f64)>,
    /// Bits per iteration tag.
    pub traffic: BTreeMap<u64, Traffic>,
    /// Time of every global model update.
    pub update_times: Vec<f64>,
    pub failures: Vec<FailureRecord>,
    /// PS connections that ended without a transfer.
    pub rejected_requests: u64,
    pub rejected_aggregates: u64,
    pub dropped_messages: u64,
    pub finished: bool,
    pub end_time: f64,
}

impl Metrics {
    pub fn total_bits(&self) -> Traffic {
        self.traffic.values().fold(Traffic::default(), |a, t| Traffic { isl_bits: a.isl_bits + t.isl_bits, ps_bits: a.ps_bits + t.ps_bits })
    }

    pub fn final_accuracy(&self) -> Option<f64> {
        self.accuracy.last().map(|&(_, a)| a)
    }

    /// First time the accuracy reaches `frac` of its final value.
    pub fn time_to_fraction(&self, frac: f64) -> Option<f64> {
        let target = frac * self.final_accuracy()?;
        self.accuracy.iter().find(|&&(_, a)| a >= target).map(|&(t, _)| t)
    }

    pub fn updates_before(&self, t: f64) -> usize {
        self.update_times.iter().filter(|&&u| u <= t).count()
    }

    pub fn write_accuracy_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["t_seconds", "accuracy"]).map_err(io)?;
        for (t, a) in &self.accuracy {
            w.write_record([format!("{t:.3}"), format!("{a:.6}")]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }

    pub fn write_traffic_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        w.write_record(["iteration", "isl_bits", "ps_bits"]).map_err(io)?;
        for (n, t) in &self.traffic {
            w.write_record([n.to_string(), t.isl_bits.to_string(), t.ps_bits.to_string()]).map_err(io)?;
        }
        w.flush().map_err(|e| Error::Io(e.to_string()))
    }
}

pub(crate) fn io(e: csv::Error) -> Error {
    Error::Io(e.to_string())
}

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<fs::File>> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    csv::Writer::from_path(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

/// One CSV record per row, headed by the field names.
pub fn write_rows<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut w = csv_writer(path)?;
    for r in rows {
        w.serialize(r).map_err(io)?;
    }
    w.flush().map_err(|e| Error::Io(e.to_string()))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::Io(format!("{}: {e}", dir.display())))?;
    }
    let text = serde_json::to_string_pretty(value).map_err(|e| Error::Io(e.to_string()))?;
    fs::write(path, text + "\n").map_err(|e| Error::Io(format!("{}: {e}", path.display())))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fractions_and_files() {
        let mut m = Metrics { accuracy: vec![(10.0, 0.2), (20.0, 0.7), (30.0, 0.8)], ..Metrics::default() };
        m.update_times = vec![10.0, 20.0, 30.0];
        m.traffic.insert(1, Traffic { isl_bits: 5, ps_bits: 7 });
        m.traffic.insert(2, Traffic { isl_bits: 1, ps_bits: 1 });
        assert_eq!(m.time_to_fraction(0.85), Some(20.0));
        assert_eq!(m.updates_before(25.0), 2);
        assert_eq!(m.total_bits(), Traffic { isl_bits: 6, ps_bits: 8 });
        let dir = tempfile::tempdir().unwrap();
        m.write_accuracy_csv(&dir.path().join("a/acc.csv")).unwrap();
        m.write_traffic_csv(&dir.path().join("traffic.csv")).unwrap();
        let text = std::fs::read_to_string(dir.path().join("traffic.csv")).unwrap();
        assert_eq!(text, "iteration,isl_bits,ps_bits\n1,5,7\n2,1,1\n");
    }
}

//! Per-run result rows and their CSV form.

use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

/// One row per `(axis value, seed)`; columns a runner does not measure are
/// left empty.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub experiment: String,
    pub axis: String,
    pub axis_value: String,
    pub seed: u64,
    /// Mean squared error of the learned routing values against `Q*_lat`.
    pub error: Option<f64>,
    /// Same error measure for the exact AIS fixed point (the floor a
    /// perfectly trained learner would reach).
    pub floor: Option<f64>,
    pub eval_return: Option<f64>,
    pub eval_se: Option<f64>,
    pub gap_v: Option<f64>,
    /// AIS gap term from occupancy-weighted gap estimates.
    pub alpha_hat: Option<f64>,
    /// AIS gap term from worst-cell gap estimates.
    pub alpha_hat_sup: Option<f64>,
    pub t_mix: Option<f64>,
    pub t_mix_steps: Option<f64>,
    /// Held-out accuracy for CPU, delivery rate for routing.
    pub accuracy: Option<f64>,
    pub accuracy_in_range: Option<f64>,
    pub shortest_fraction: Option<f64>,
    pub episodes: u64,
    pub epochs: u64,
    pub updates: u64,
    pub diverged: bool,
    pub wall_clock_s: f64,
    pub config_hash: String,
}

impl RunRecord {
    pub fn new(experiment: &str, axis: &str, axis_value: &str, seed: u64, config_hash: &str) -> Self {
        Self {
            experiment: experiment.to_string(),
            axis: axis.to_string(),
            axis_value: axis_value.to_string(),
            seed,
            config_hash: config_hash.to_string(),
            ..Default::default()
        }
    }

    /// Copy with the timing column zeroed, for reproducibility comparisons.
    pub fn without_timing(&self) -> Self {
        Self { wall_clock_s: 0.0, ..self.clone() }
    }
}

pub fn write_csv(path: &Path, rows: &[RunRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).with_context(|| format!("creating {}", path.display()))?;
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: &Path) -> Result<Vec<RunRecord>> {
    let mut r = csv::Reader::from_path(path).with_context(|| format!("opening {}", path.display()))?;
    let mut rows = Vec::new();
    for rec in r.deserialize() {
        rows.push(rec.with_context(|| format!("parsing {}", path.display()))?);
    }
    Ok(rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn csv_round_trip_keeps_missing_columns_empty() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("runs.csv");
        let mut a = RunRecord::new("t1-ais-gap", "rho", "0.5", 3, "abc");
        a.error = Some(0.25);
        a.gap_v = Some(-1e-3);
        a.diverged = true;
        let b = RunRecord::new("t1-ais-gap", "rho", "1", 4, "abc");
        write_csv(&path, &[a.clone(), b.clone()]).unwrap();
        assert_eq!(read_csv(&path).unwrap(), vec![a, b]);
        let text = std::fs::read_to_string(&path).unwrap();
        assert!(text.lines().nth(2).unwrap().contains(",,"));
    }
}

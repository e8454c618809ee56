//! Experiment runner for interface-constrained Q-learning: configs, sweeps
//! over a worker pool, CSV/JSON outputs and plot data.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};

pub mod config;
pub mod experiments;
pub mod formats;
pub mod pool;
pub mod record;
pub mod summary;

use config::{ExperimentConfig, ExperimentId};
use record::RunRecord;
use summary::Summary;

pub const CONFIG_FILE: &str = "config.toml";

pub fn csv_path(dir: &Path, id: ExperimentId) -> PathBuf {
    dir.join(format!("{}.csv", id.name()))
}

pub fn summary_path(dir: &Path, id: ExperimentId) -> PathBuf {
    dir.join(format!("{}.summary.json", id.name()))
}

pub struct RunOutput {
    pub rows: Vec<RunRecord>,
    pub summary: Summary,
}

/// Run `cfg` and write the CSV, the JSON summary and a copy of the config
/// into its output directory.
pub fn run_to_dir(cfg: &ExperimentConfig, workers: usize) -> Result<RunOutput> {
    let rows = experiments::run(cfg, workers)?;
    let summary = summary::summarize(&rows, cfg.protocol.oracle_tolerance)?;
    let dir = &cfg.output_dir;
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    fs::write(dir.join(CONFIG_FILE), cfg.to_toml()?)?;
    record::write_csv(&csv_path(dir, cfg.experiment), &rows)?;
    fs::write(summary_path(dir, cfg.experiment), serde_json::to_string_pretty(&summary)?)?;
    Ok(RunOutput { rows, summary })
}

/// Recompute the summaries of every experiment CSV in `dir`. The config
/// copy, when present, must match the rows' hash.
pub fn summarize_dir(dir: &Path) -> Result<Vec<Summary>> {
    let cfg = match fs::read_to_string(dir.join(CONFIG_FILE)) {
        Ok(text) => Some(ExperimentConfig::from_toml(&text)?),
        Err(_) => None,
    };
    let tolerance = cfg.as_ref().map_or(config::Protocol::default().oracle_tolerance, |c| c.protocol.oracle_tolerance);
    let mut out = Vec::new();
    for id in ExperimentId::ALL {
        let path = csv_path(dir, id);
        if !path.exists() {
            continue;
        }
        let rows = record::read_csv(&path)?;
        let s = summary::summarize(&rows, tolerance).with_context(|| format!("summarizing {}", path.display()))?;
        if let Some(c) = &cfg {
            if c.experiment == id && c.hash() != s.config_hash {
                bail!("{} was produced by config {}, but {} hashes to {}", path.display(), s.config_hash, CONFIG_FILE, c.hash());
            }
        }
        fs::write(summary_path(dir, id), serde_json::to_string_pretty(&s)?)?;
        out.push(s);
    }
    if out.is_empty() {
        bail!("no experiment CSV in {}", dir.display());
    }
    Ok(out)
}

/// `(x, y, y_se)` rows for one figure.
pub fn plot_rows(s: &Summary) -> Result<Vec<(String, f64, f64)>> {
    let id = ExperimentId::parse(&s.experiment)?;
    let (x_metric, y_metric) = match id {
        ExperimentId::T1AisGap => (Some("alpha_hat"), "gap_v"),
        ExperimentId::T2SampleBudget => (None, "excess"),
        ExperimentId::T2Mixing => (Some("t_mix_steps"), "error"),
        ExperimentId::T2Retention => (None, "error"),
        ExperimentId::Routing | ExperimentId::Cpu => (None, "accuracy"),
        ExperimentId::OracleCheck => (None, "error"),
    };
    Ok(s.points
        .iter()
        .filter_map(|p| {
            let y = p.metrics.get(y_metric)?;
            let x = match x_metric {
                Some(m) => p.mean(m)?.to_string(),
                None => p.axis_value.clone(),
            };
            Some((x, y.mean, y.se))
        })
        .collect())
}

/// Write `plot-<figure>.csv` into `dir` from that experiment's CSV.
pub fn plotdata(dir: &Path, figure: &str) -> Result<PathBuf> {
    let id = ExperimentId::parse(figure)?;
    let rows = record::read_csv(&csv_path(dir, id))?;
    let s = summary::summarize(&rows, config::Protocol::default().oracle_tolerance)?;
    let path = dir.join(format!("plot-{}.csv", figure));
    let mut w = csv::Writer::from_path(&path)?;
    w.write_record(["x", "y", "y_se"])?;
    for (x, y, se) in plot_rows(&s)? {
        w.write_record([x, y.to_string(), se.to_string()])?;
    }
    w.flush()?;
    Ok(path)
}

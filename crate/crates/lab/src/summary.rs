//! Seed-averaged points, per-experiment statistics and pass/fail checks,
//! recomputed from run records alone.

use std::collections::BTreeMap;

use anyhow::{bail, ensure, Result};
use icq_core::diagnostics::{pearson, spearman};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentId;
use crate::record::RunRecord;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Stat {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

impl Stat {
    pub fn of(xs: &[f64]) -> Option<Stat> {
        if xs.is_empty() {
            return None;
        }
        let n = xs.len();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let se = if n > 1 {
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Some(Stat { mean, se, n })
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub axis_value: String,
    pub runs: usize,
    pub diverged: usize,
    pub metrics: BTreeMap<String, Stat>,
}

impl Point {
    pub fn mean(&self, metric: &str) -> Option<f64> {
        self.metrics.get(metric).map(|s| s.mean)
    }

    pub fn x(&self) -> Option<f64> {
        self.axis_value.parse().ok()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub threshold: String,
    pub pass: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub experiment: String,
    pub axis: String,
    pub config_hash: String,
    pub runs: usize,
    pub diverged: usize,
    pub points: Vec<Point>,
    pub stats: BTreeMap<String, f64>,
    pub checks: Vec<Check>,
}

impl Summary {
    pub fn passed(&self) -> bool {
        self.diverged == 0 && self.checks.iter().all(|c| c.pass)
    }

    pub fn check(&self, name: &str) -> Option<&Check> {
        self.checks.iter().find(|c| c.name == name)
    }

    pub fn point(&self, axis_value: &str) -> Option<&Point> {
        self.points.iter().find(|p| p.axis_value == axis_value)
    }

    /// `(x, metric)` over points where both exist.
    fn series(&self, x: impl Fn(&Point) -> Option<f64>, y: &str) -> (Vec<f64>, Vec<f64>) {
        self.points.iter().filter_map(|p| Some((x(p)?, p.mean(y)?))).unzip()
    }
}

pub const METRICS: [&str; 13] = [
    "error",
    "floor",
    "excess",
    "eval_return",
    "gap_v",
    "alpha_hat",
    "alpha_hat_sup",
    "t_mix",
    "t_mix_steps",
    "accuracy",
    "accuracy_in_range",
    "shortest_fraction",
    "updates",
];

fn metric(r: &RunRecord, name: &str) -> Option<f64> {
    match name {
        "error" => r.error,
        "floor" => r.floor,
        "excess" => Some(r.error? - r.floor?),
        "eval_return" => r.eval_return,
        "gap_v" => r.gap_v,
        "alpha_hat" => r.alpha_hat,
        "alpha_hat_sup" => r.alpha_hat_sup,
        "t_mix" => r.t_mix,
        "t_mix_steps" => r.t_mix_steps,
        "accuracy" => r.accuracy,
        "accuracy_in_range" => r.accuracy_in_range,
        "shortest_fraction" => r.shortest_fraction,
        "updates" => Some(r.updates as f64),
        _ => None,
    }
}

/// Least-squares slope of `ln y` on `ln x` over points with positive
/// coordinates.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64> {
    let (lx, ly): (Vec<f64>, Vec<f64>) =
        xs.iter().zip(ys).filter(|(x, y)| **x > 0.0 && **y > 0.0).map(|(x, y)| (x.ln(), y.ln())).unzip();
    ensure!(lx.len() >= 2, "log-log slope needs two positive points, got {}", lx.len());
    let mx = lx.iter().sum::<f64>() / lx.len() as f64;
    let my = ly.iter().sum::<f64>() / ly.len() as f64;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    ensure!(sxx > 0.0, "log-log slope needs two distinct x values");
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

fn check(name: &str, value: f64, threshold: &str, pass: bool) -> Check {
    Check { name: name.to_string(), value, threshold: threshold.to_string(), pass: pass && !value.is_nan() }
}

/// Points in first-appearance order of the axis values; diverged rows are
/// counted but excluded from the metrics.
pub fn points(rows: &[RunRecord]) -> Vec<Point> {
    let mut order: Vec<String> = Vec::new();
    for r in rows {
        if !order.contains(&r.axis_value) {
            order.push(r.axis_value.clone());
        }
    }
    order
        .into_iter()
        .map(|v| {
            let here: Vec<&RunRecord> = rows.iter().filter(|r| r.axis_value == v).collect();
            let ok: Vec<&&RunRecord> = here.iter().filter(|r| !r.diverged).collect();
            let metrics = METRICS
                .iter()
                .filter_map(|m| {
                    let xs: Vec<f64> = ok.iter().filter_map(|r| metric(r, m)).collect();
                    Some((m.to_string(), Stat::of(&xs)?))
                })
                .collect();
            Point { axis_value: v, runs: here.len(), diverged: here.len() - ok.len(), metrics }
        })
        .collect()
}

/// Summarize one experiment's rows. `tolerance` is the oracle-check bound.
pub fn summarize(rows: &[RunRecord], tolerance: f64) -> Result<Summary> {
    ensure!(!rows.is_empty(), "no run records");
    let first = &rows[0];
    for r in rows {
        if r.config_hash != first.config_hash {
            bail!("mixed config hashes {} and {}: rows come from different configs", first.config_hash, r.config_hash);
        }
        if r.experiment != first.experiment {
            bail!("mixed experiments {} and {}", first.experiment, r.experiment);
        }
    }
    let id = ExperimentId::parse(&first.experiment)?;
    let mut s = Summary {
        experiment: first.experiment.clone(),
        axis: first.axis.clone(),
        config_hash: first.config_hash.clone(),
        runs: rows.len(),
        diverged: rows.iter().filter(|r| r.diverged).count(),
        points: points(rows),
        stats: BTreeMap::new(),
        checks: Vec::new(),
    };
    let by_x = |p: &Point| p.x();
    match id {
        ExperimentId::T1AisGap => {
            let (g, a) = s.series(|p| p.mean("gap_v"), "alpha_hat");
            let (g2, a2) = s.series(|p| p.mean("gap_v"), "alpha_hat_sup");
            if let Ok(r) = pearson(&g, &a) {
                s.stats.insert("pearson_gap_alpha".into(), r);
                s.checks.push(check("pearson_gap_alpha", r, ">= 0.8", r >= 0.8));
            }
            if let Ok(r) = pearson(&g2, &a2) {
                s.stats.insert("pearson_gap_alpha_sup".into(), r);
            }
        }
        ExperimentId::T2SampleBudget => {
            let (t, e) = s.series(by_x, "error");
            let (t2, ex) = s.series(by_x, "excess");
            let lo = t.iter().cloned().enumerate().min_by(|a, b| a.1.total_cmp(&b.1));
            let hi = t.iter().cloned().enumerate().max_by(|a, b| a.1.total_cmp(&b.1));
            if let (Some((i, _)), Some((j, _))) = (lo, hi) {
                s.stats.insert("error_at_min_budget".into(), e[i]);
                s.stats.insert("error_at_max_budget".into(), e[j]);
                s.checks.push(check("error_decreases", e[j] - e[i], "< 0", e[j] < e[i]));
            }
            if let Ok(slope) = log_log_slope(&t2, &ex) {
                s.stats.insert("log_log_slope".into(), slope);
                s.checks.push(check("log_log_slope", slope, "<= -0.6", slope <= -0.6));
            }
        }
        ExperimentId::T2Retention => {
            let lo = s.points.iter().filter(|p| p.x().is_some()).min_by(|a, b| a.x().unwrap().total_cmp(&b.x().unwrap()));
            let hi = s.points.iter().filter(|p| p.x().is_some()).max_by(|a, b| a.x().unwrap().total_cmp(&b.x().unwrap()));
            if let (Some(lo), Some(hi)) = (lo.and_then(|p| p.mean("error")), hi.and_then(|p| p.mean("error"))) {
                s.stats.insert("floor_at_min_rho".into(), lo);
                s.stats.insert("floor_at_max_rho".into(), hi);
                s.checks.push(check("floor_rises", lo - hi, "> 0", lo > hi));
            }
            let (f, a) = s.series(|p| p.mean("error"), "alpha_hat");
            if let Ok(r) = spearman(&f, &a) {
                s.stats.insert("spearman_floor_alpha".into(), r);
                s.checks.push(check("spearman_floor_alpha", r, ">= 0.7", r >= 0.7));
            }
            let (f, a) = s.series(|p| p.mean("error"), "alpha_hat_sup");
            if let Ok(r) = spearman(&f, &a) {
                s.stats.insert("spearman_floor_alpha_sup".into(), r);
            }
        }
        ExperimentId::T2Mixing => {
            let (p, tm) = s.series(by_x, "t_mix_steps");
            match spearman(&p, &tm) {
                Ok(r) => {
                    s.stats.insert("spearman_p_tmix".into(), r);
                    s.checks.push(check("spearman_p_tmix", r, "<= -0.7", r <= -0.7));
                }
                Err(_) => s.checks.push(check("spearman_p_tmix", f64::NAN, "<= -0.7", false)),
            }
            let (tm, e) = s.series(|p| p.mean("t_mix_steps"), "error");
            match spearman(&tm, &e) {
                Ok(r) => {
                    s.stats.insert("spearman_tmix_error".into(), r);
                    s.checks.push(check("spearman_tmix_error", r, "> 0", r > 0.0));
                }
                Err(_) => s.checks.push(check("spearman_tmix_error", f64::NAN, "> 0", false)),
            }
        }
        ExperimentId::Routing => {
            let acc = rows.iter().filter_map(|r| r.accuracy).fold(f64::INFINITY, f64::min);
            let short = rows.iter().filter_map(|r| r.shortest_fraction).fold(f64::INFINITY, f64::min);
            s.stats.insert("min_accuracy".into(), acc);
            s.stats.insert("min_shortest_fraction".into(), short);
            s.checks.push(check("min_accuracy", acc, "== 1", acc >= 1.0));
            s.checks.push(check("min_shortest_fraction", short, ">= 0.95", short >= 0.95));
        }
        ExperimentId::Cpu => {
            for p in &s.points {
                if let Some(a) = p.mean("accuracy") {
                    s.stats.insert(format!("held_out_accuracy@{}", p.axis_value), a);
                }
            }
            let xs: Vec<f64> = rows.iter().filter_map(|r| r.accuracy).collect();
            if let Some(st) = Stat::of(&xs) {
                s.stats.insert("held_out_accuracy".into(), st.mean);
                s.checks.push(check("held_out_accuracy", st.mean, ">= 0.7", st.mean >= 0.7));
            }
        }
        ExperimentId::OracleCheck => {
            let worst = rows.iter().map(|r| r.error.unwrap_or(f64::INFINITY)).fold(0.0, f64::max);
            s.stats.insert("max_sup_error".into(), worst);
            s.checks.push(check("max_sup_error", worst, &format!("<= {}", tolerance), worst <= tolerance));
        }
    }
    Ok(s)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(exp: &str, x: &str, seed: u64) -> RunRecord {
        RunRecord::new(exp, "axis", x, seed, "h")
    }

    #[test]
    fn slope_of_a_power_law() {
        let xs: Vec<f64> = (1..10).map(|k| k as f64 * 10.0).collect();
        let ys: Vec<f64> = xs.iter().map(|x| 3.0 * x.powf(-0.8)).collect();
        assert!((log_log_slope(&xs, &ys).unwrap() + 0.8).abs() < 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
    }

    #[test]
    fn mixed_hashes_are_rejected() {
        let a = row("routing", "chain", 0);
        let mut b = row("routing", "chain", 1);
        b.config_hash = "other".into();
        assert!(summarize(&[a, b], 0.01).is_err());
    }

    #[test]
    fn diverged_rows_are_excluded_from_points() {
        let mut a = row("oracle-check", "0", 0);
        a.error = Some(0.001);
        let mut b = row("oracle-check", "0", 1);
        b.diverged = true;
        let s = summarize(&[a, b], 0.01).unwrap();
        assert_eq!(s.points[0].metrics["error"].n, 1);
        assert_eq!(s.diverged, 1);
        assert!(!s.passed());
        assert!(!s.check("max_sup_error").unwrap().pass);
    }

    #[test]
    fn t1_pearson_uses_seed_means() {
        let mut rows = Vec::new();
        for (k, x) in ["1", "0.5", "0.1"].iter().enumerate() {
            for seed in 0..2 {
                let mut r = row("t1-ais-gap", x, seed);
                r.gap_v = Some(k as f64 + 0.1 * seed as f64);
                r.alpha_hat = Some(2.0 * k as f64);
                rows.push(r);
            }
        }
        let s = summarize(&rows, 0.01).unwrap();
        assert!((s.stats["pearson_gap_alpha"] - 1.0).abs() < 1e-12);
        assert!(s.passed());
        let st = s.point("0.5").unwrap().metrics["gap_v"];
        assert!((st.mean - 1.05).abs() < 1e-12 && st.n == 2);
    }
}

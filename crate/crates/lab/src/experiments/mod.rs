//! Experiment runners. Each sweep is split into `(axis value, seed)` cells
//! that run on the worker pool; rows come back in grid order, then seed
//! order.

use anyhow::Result;

use crate::config::{ExperimentConfig, ExperimentId};
use crate::record::RunRecord;

pub mod cpu;
pub mod oracle_check;
pub mod routing;
pub mod synthetic;

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Cell {
    pub axis_index: usize,
    pub label: String,
    pub seed: u64,
}

pub trait Runner {
    /// One record per cell, in the order of `cells`.
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>>;
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<Cell> {
    let mut out = Vec::new();
    for (k, v) in cfg.sweep.grid.iter().enumerate() {
        for &seed in &cfg.seeds {
            out.push(Cell { axis_index: k, label: v.to_string(), seed });
        }
    }
    out
}

pub fn runner(id: ExperimentId) -> Box<dyn Runner> {
    match id {
        ExperimentId::T1AisGap => Box::new(synthetic::T1),
        ExperimentId::T2SampleBudget => Box::new(synthetic::Budget),
        ExperimentId::T2Mixing => Box::new(synthetic::Mixing),
        ExperimentId::T2Retention => Box::new(synthetic::Retention),
        ExperimentId::Routing => Box::new(routing::Routing),
        ExperimentId::Cpu => Box::new(cpu::Cpu),
        ExperimentId::OracleCheck => Box::new(oracle_check::OracleCheck),
    }
}

/// Run every cell of `cfg` on `workers` threads.
pub fn run(cfg: &ExperimentConfig, workers: usize) -> Result<Vec<RunRecord>> {
    cfg.validate()?;
    let cells = cells(cfg);
    let rows = runner(cfg.experiment).run(cfg, &cells, &cfg.hash(), workers)?;
    debug_assert_eq!(rows.len(), cells.len());
    Ok(rows)
}

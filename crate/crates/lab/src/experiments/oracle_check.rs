//! Tabular learner against the exact latent fixed point on small instances.

use std::time::Instant;

use anyhow::Result;
use icq_core::ais::identity_maps;
use icq_core::envs::table::{TableEnv, TableSpec};
use icq_core::learner::{IcqLearner, LearnerConfig};

use super::{Cell, Runner};
use crate::config::{EnvSpec, ExperimentConfig};
use crate::pool::run_ordered;
use crate::record::RunRecord;

/// Instance `k` of the grid is the table spec reseeded with `seed + k`.
pub fn instance_spec(cfg: &ExperimentConfig, cell: &Cell) -> Result<TableSpec> {
    let EnvSpec::Table(base) = &cfg.env else { unreachable!("validated") };
    let k = cfg.sweep.grid[cell.axis_index].num()? as u64;
    Ok(TableSpec { seed: base.seed.wrapping_add(k), ..base.clone() })
}

/// `max |Q - Q*_lat|` over admissible latent cells after training.
pub fn sup_error(l: &IcqLearner, env: &TableEnv) -> Result<f64> {
    let lat = env.exact_latent();
    let sol = lat.solve()?;
    let mut err = 0.0f64;
    for i in 0..lat.n_agents {
        for m in 0..lat.card_interface {
            let s = lat.state(i, m);
            for &a in &lat.smdp.admissible[s] {
                err = err.max((l.q(i, m, a) - sol.q[lat.smdp.idx(s, a)]).abs());
            }
        }
    }
    Ok(err)
}

pub struct OracleCheck;

impl Runner for OracleCheck {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        run_ordered(cells.to_vec(), workers, |cell| {
            let t0 = Instant::now();
            let spec = instance_spec(cfg, &cell)?;
            let env = TableEnv::random(&spec)?;
            let maps = identity_maps(spec.n_agents, spec.card_interface);
            let seed = spec.seed.wrapping_add(cell.seed);
            let mut l = IcqLearner::new(&env, &maps, LearnerConfig { seed, ..cfg.learner })?;
            l.train_updates(&env, &maps, cfg.protocol.oracle_updates, seed)?;
            let mut rec = RunRecord::new(cfg.experiment.name(), &cfg.sweep.axis, &cell.label, cell.seed, hash);
            rec.episodes = l.episodes;
            rec.epochs = l.epochs;
            rec.updates = l.audit.beta_updates;
            rec.diverged = !l.is_finite();
            if !rec.diverged {
                rec.error = Some(sup_error(&l, &env)?);
            }
            rec.wall_clock_s = t0.elapsed().as_secs_f64();
            Ok(rec)
        })
    }
}

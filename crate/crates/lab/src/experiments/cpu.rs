//! Register-machine composition with learned local actions.

use std::time::Instant;

use anyhow::Result;
use icq_core::envs::cpu::{CpuEnv, CpuSpec, Phase};
use icq_core::learner::{EpisodeRngs, IcqLearner, LearnerConfig, Mode};
use icq_core::rng::{substream, Stream};
use icq_core::Environment;

use super::{Cell, Runner};
use crate::config::{EnvSpec, ExperimentConfig};
use crate::pool::run_ordered;
use crate::record::RunRecord;

pub fn cell_spec(cfg: &ExperimentConfig, cell: &Cell) -> Result<CpuSpec> {
    let EnvSpec::Cpu(base) = &cfg.env else { unreachable!("validated") };
    Ok(CpuSpec {
        train_fraction: cfg.sweep.grid[cell.axis_index].num()?,
        seed: base.seed.wrapping_add(cell.seed),
        ..base.clone()
    })
}

/// Fraction of `n_eval` greedy episodes drawn from `phase` that stop with
/// the target in the output cell (the only way to earn the completion
/// reward).
pub fn accuracy(l: &IcqLearner, env: &CpuEnv, phase: Phase, n_eval: usize, seed: u64) -> Result<f64> {
    let env = env.with_phase(phase);
    let maps = env.observation_maps();
    let mut probe = l.clone();
    let mut ok = 0usize;
    for k in 0..n_eval as u64 {
        let mut r_env = substream(seed, Stream::Evaluation, k);
        let mut r_exp = substream(seed, Stream::Exploration, k);
        let start = env.reset(&mut r_env)?;
        let res = probe.run_episode_from(
            &env,
            &maps,
            start,
            Mode::Evaluate,
            EpisodeRngs { env: &mut r_env, explore: &mut r_exp },
            false,
        )?;
        if res.stopped && res.undiscounted_return > 0.5 {
            ok += 1;
        }
    }
    Ok(ok as f64 / n_eval.max(1) as f64)
}

pub struct Cpu;

impl Runner for Cpu {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        run_ordered(cells.to_vec(), workers, |cell| {
            let t0 = Instant::now();
            let env = CpuEnv::new(&cell_spec(cfg, &cell)?)?;
            let maps = env.observation_maps();
            let mut l = IcqLearner::new(&env, &maps, LearnerConfig { seed: cell.seed, ..cfg.learner })?;
            l.train(&env, &maps, cfg.protocol.train_episodes, cell.seed)?;
            let mut rec = RunRecord::new(cfg.experiment.name(), &cfg.sweep.axis, &cell.label, cell.seed, hash);
            rec.episodes = l.episodes;
            rec.epochs = l.epochs;
            rec.updates = l.audit.beta_updates;
            rec.diverged = !l.is_finite();
            if !rec.diverged {
                rec.accuracy = Some(accuracy(&l, &env, Phase::HeldOut, cfg.eval_episodes, cell.seed)?);
                rec.accuracy_in_range = Some(accuracy(&l, &env, Phase::Train, cfg.eval_episodes, cell.seed)?);
            }
            rec.wall_clock_s = t0.elapsed().as_secs_f64();
            Ok(rec)
        })
    }
}

//! Packet routing on generated graphs.

use std::time::Instant;

use anyhow::Result;
use icq_core::envs::routing::{RoutingEnv, RoutingSpec};
use icq_core::learner::{EpisodeRngs, IcqLearner, LearnerConfig, Mode};
use icq_core::rng::{substream, Stream};
use icq_core::Environment;

use super::{Cell, Runner};
use crate::config::{EnvSpec, ExperimentConfig};
use crate::pool::run_ordered;
use crate::record::RunRecord;

/// The environment of one cell: the configured spec with the family from
/// the grid and the graph seed offset by the run seed.
pub fn cell_spec(cfg: &ExperimentConfig, cell: &Cell) -> Result<RoutingSpec> {
    let EnvSpec::Routing(base) = &cfg.env else { unreachable!("validated") };
    Ok(RoutingSpec {
        family: cfg.sweep.grid[cell.axis_index].family()?,
        seed: base.seed.wrapping_add(cell.seed),
        ..base.clone()
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RoutingEval {
    pub delivered: f64,
    pub shortest: f64,
    pub mean_return: f64,
}

/// Greedy delivery over every `(source, destination)` pair. A delivered
/// path is shortest when it took BFS distance hops plus the STOP step.
pub fn evaluate_pairs(l: &IcqLearner, env: &RoutingEnv, seed: u64) -> Result<RoutingEval> {
    let maps = env.observation_maps();
    let dist = env.graph.distances();
    let mut probe = l.clone();
    let (mut delivered, mut shortest, mut ret, mut total) = (0usize, 0usize, 0.0, 0usize);
    for (k, (s, d)) in env.pairs().into_iter().enumerate() {
        let mut r_env = substream(seed, Stream::Evaluation, k as u64);
        let mut r_exp = substream(seed, Stream::Exploration, k as u64);
        let res = probe.run_episode_from(
            env,
            &maps,
            env.start_state(s, d),
            Mode::Evaluate,
            EpisodeRngs { env: &mut r_env, explore: &mut r_exp },
            false,
        )?;
        total += 1;
        ret += res.undiscounted_return;
        if res.stopped {
            delivered += 1;
            if res.steps == dist[s][d] + 1 {
                shortest += 1;
            }
        }
    }
    Ok(RoutingEval {
        delivered: delivered as f64 / total.max(1) as f64,
        shortest: shortest as f64 / delivered.max(1) as f64,
        mean_return: ret / total.max(1) as f64,
    })
}

pub struct Routing;

impl Runner for Routing {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        run_ordered(cells.to_vec(), workers, |cell| {
            let t0 = Instant::now();
            let env = RoutingEnv::new(&cell_spec(cfg, &cell)?)?;
            let maps = env.observation_maps();
            let mut l = IcqLearner::new(&env, &maps, LearnerConfig { seed: cell.seed, ..cfg.learner })?;
            l.train(&env, &maps, cfg.protocol.train_episodes, cell.seed)?;
            let mut rec = RunRecord::new(cfg.experiment.name(), &cfg.sweep.axis, &cell.label, cell.seed, hash);
            rec.episodes = l.episodes;
            rec.epochs = l.epochs;
            rec.updates = l.audit.beta_updates;
            rec.diverged = !l.is_finite();
            if !rec.diverged {
                let ev = evaluate_pairs(&l, &env, cell.seed)?;
                rec.accuracy = Some(ev.delivered);
                rec.shortest_fraction = Some(ev.shortest);
                rec.eval_return = Some(ev.mean_return);
            }
            rec.wall_clock_s = t0.elapsed().as_secs_f64();
            Ok(rec)
        })
    }
}

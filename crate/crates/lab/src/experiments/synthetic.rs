//! Sweeps on the synthetic environment: AIS gap vs value gap, and the three
//! finite-sample axes.

use std::time::Instant;

use anyhow::{Context, Result};
use icq_core::ais::{estimate_ais_gap, GapOptions, ObservationMap};
use icq_core::diagnostics::{estimate_chain_stats, MixingOptions};
use icq_core::envs::synthetic::{SyntheticEnv, SyntheticSpec};
use icq_core::epochs::uniform_successor;
use icq_core::learner::{evaluate_greedy, IcqLearner};
use icq_core::oracle::{lipschitz_constant, AisSmdp};
use icq_core::rng::{substream, Stream, Streams};

use super::{Cell, Runner};
use crate::config::{EnvSpec, ExperimentConfig, ExperimentId};
use crate::pool::run_ordered;
use crate::record::RunRecord;

/// Environment, maps and exact tables for one axis value.
pub struct Prepared {
    pub env: SyntheticEnv,
    pub maps: Vec<ObservationMap>,
    /// `Q*_lat` indexed `(i * |M| + m) * (N + 1) + slot`.
    pub qstar: Vec<f64>,
    /// Exact AIS fixed point, same indexing (constant over each class).
    pub qais: Vec<f64>,
    /// Oscillation of the AIS optimal value (the value-gap Lipschitz constant).
    pub lipschitz: f64,
}

impl Prepared {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        let env = SyntheticEnv::new(spec)?;
        let maps = env.retention_maps()?;
        let model = env.exact_model();
        let qstar = model.solve(1e-10)?.q;
        let lat = model.to_latent();
        let ais = AisSmdp::from_latent(&lat, &maps, &|_, _| 1.0)?;
        let sol = ais.solve()?;
        let (n, card) = (spec.n_agents, spec.card_interface);
        let mut qais = vec![f64::NAN; qstar.len()];
        for i in 0..n {
            for m in 0..card {
                let s = ais.state(i, maps[i].observe(m, 0));
                for slot in 0..=n {
                    qais[(i * card + m) * (n + 1) + slot] = sol.q[ais.smdp.idx(s, slot)];
                }
            }
        }
        Ok(Self { lipschitz: lipschitz_constant(&ais, &sol), env, maps, qstar, qais })
    }

    /// Tabular cells `(agent, observation, successor)`.
    pub fn cells(&self) -> u64 {
        let n = self.env.spec.n_agents;
        (self.maps.iter().map(|m| m.card_obs).sum::<usize>() * (n + 1)) as u64
    }

    /// Mean over latent cells with finite `Q*` of `(q(i, m, slot) - Q*)^2`.
    pub fn mse(&self, q: impl Fn(usize, usize, usize) -> f64) -> f64 {
        let n = self.env.spec.n_agents;
        let card = self.env.spec.card_interface;
        let (mut sum, mut count) = (0.0, 0usize);
        for i in 0..n {
            for m in 0..card {
                for slot in 0..=n {
                    let target = self.qstar[(i * card + m) * (n + 1) + slot];
                    if target.is_finite() {
                        sum += (q(i, m, slot) - target).powi(2);
                        count += 1;
                    }
                }
            }
        }
        sum / count.max(1) as f64
    }

    pub fn learner_error(&self, l: &IcqLearner) -> f64 {
        self.mse(|i, m, slot| l.q(i, self.maps[i].observe(m, 0), slot))
    }

    pub fn floor(&self) -> f64 {
        let n = self.env.spec.n_agents;
        let card = self.env.spec.card_interface;
        self.mse(|i, m, slot| self.qais[(i * card + m) * (n + 1) + slot])
    }
}

fn base_spec(cfg: &ExperimentConfig) -> SyntheticSpec {
    match &cfg.env {
        EnvSpec::Synthetic(s) => s.clone(),
        _ => unreachable!("validated"),
    }
}

fn spec_at(cfg: &ExperimentConfig, x: f64) -> SyntheticSpec {
    let mut spec = base_spec(cfg);
    match cfg.experiment {
        ExperimentId::T1AisGap | ExperimentId::T2Retention => spec.rho = x,
        ExperimentId::T2Mixing => spec.p_handoff = x,
        _ => {}
    }
    spec
}

fn record(cfg: &ExperimentConfig, cell: &Cell, hash: &str) -> RunRecord {
    RunRecord::new(cfg.experiment.name(), &cfg.sweep.axis, &cell.label, cell.seed, hash)
}

fn learner(cfg: &ExperimentConfig, p: &Prepared, seed: u64) -> Result<IcqLearner> {
    let lc = icq_core::learner::LearnerConfig { seed, ..cfg.learner };
    Ok(IcqLearner::new(&p.env, &p.maps, lc)?)
}

fn fill_training(rec: &mut RunRecord, l: &IcqLearner, p: &Prepared) {
    rec.episodes = l.episodes;
    rec.epochs = l.epochs;
    rec.updates = l.audit.beta_updates;
    rec.diverged = !l.is_finite();
    if !rec.diverged {
        rec.error = Some(p.learner_error(l));
    }
}

fn prepare_all(values: &[f64], cfg: &ExperimentConfig, workers: usize) -> Result<Vec<Prepared>> {
    run_ordered(values.to_vec(), workers, |x| Prepared::new(&spec_at(cfg, x)).with_context(|| format!("preparing {}", x)))
}

/// Gap estimate with `lipschitz` from the full-retention instance.
fn gaps(rec: &mut RunRecord, cfg: &ExperimentConfig, p: &Prepared, seed: u64, lipschitz: f64) -> Result<()> {
    let opts = GapOptions {
        n_epochs: cfg.protocol.gap_epochs,
        min_visits: cfg.protocol.gap_min_visits,
        lipschitz: Some(lipschitz),
    };
    let g = estimate_ais_gap(&p.env, &p.maps, &uniform_successor, &opts, &mut substream(seed, Stream::Estimation, 0))?;
    rec.alpha_hat = Some(g.alpha_mean);
    rec.alpha_hat_sup = Some(g.alpha_hat);
    Ok(())
}

/// Value gap vs AIS gap over the retention grid. The value gap is measured
/// against the greedy policy trained at `rho = 1` with the same seed, which
/// runs even if the grid omits it.
pub struct T1;

impl Runner for T1 {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        let grid: Vec<f64> = cfg.sweep.grid.iter().map(|v| v.num()).collect::<Result<_>>()?;
        let mut values = grid.clone();
        let has_baseline = grid.contains(&1.0);
        if !has_baseline {
            values.push(1.0);
        }
        let prepared = prepare_all(&values, cfg, workers)?;
        let base = grid.iter().position(|&x| x == 1.0).unwrap_or(values.len() - 1);
        let lipschitz = prepared[base].lipschitz;
        let total = cfg.protocol.budget_per_cell * prepared[base].cells() as f64;
        let mut jobs: Vec<(usize, Cell)> = cells.iter().map(|c| (c.axis_index, c.clone())).collect();
        if !has_baseline {
            for &seed in &cfg.seeds {
                jobs.push((base, Cell { axis_index: base, label: "1".into(), seed }));
            }
        }
        let job_axis: Vec<usize> = jobs.iter().map(|j| j.0).collect();
        let rows = run_ordered(jobs, workers, |(k, cell)| {
            let t0 = Instant::now();
            let p = &prepared[k];
            let budget = if cfg.protocol.fixed_total_budget { total } else { cfg.protocol.budget_per_cell * p.cells() as f64 };
            let mut rec = record(cfg, &cell, hash);
            let mut l = learner(cfg, p, cell.seed)?;
            l.train_updates(&p.env, &p.maps, budget.ceil() as u64, cell.seed)?;
            fill_training(&mut rec, &l, p);
            if !rec.diverged {
                let ev = evaluate_greedy(&l, &p.env, &p.maps, cfg.eval_episodes, cell.seed)?;
                rec.eval_return = Some(ev.mean);
                rec.eval_se = Some(ev.se);
            }
            rec.floor = Some(p.floor());
            gaps(&mut rec, cfg, p, cell.seed, lipschitz)?;
            rec.wall_clock_s = t0.elapsed().as_secs_f64();
            Ok(rec)
        })?;
        let baseline: Vec<RunRecord> =
            rows.iter().zip(&job_axis).filter(|(_, &k)| k == base).map(|(r, _)| r.clone()).collect();
        let mut out: Vec<RunRecord> = rows[..cells.len()].to_vec();
        for r in &mut out {
            let b = baseline.iter().find(|b| b.seed == r.seed).and_then(|b| b.eval_return);
            r.gap_v = match (b, r.eval_return) {
                (Some(b), Some(x)) => Some(b - x),
                _ => None,
            };
        }
        Ok(out)
    }
}

/// Converged error floor over the retention grid.
pub struct Retention;

impl Runner for Retention {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        let grid: Vec<f64> = cfg.sweep.grid.iter().map(|v| v.num()).collect::<Result<_>>()?;
        let prepared = prepare_all(&grid, cfg, workers)?;
        let full = Prepared::new(&SyntheticSpec { rho: 1.0, ..base_spec(cfg) })?;
        let lipschitz = full.lipschitz;
        let full_cells = full.cells() as f64;
        drop(full);
        run_ordered(cells.to_vec(), workers, |cell| {
            let t0 = Instant::now();
            let p = &prepared[cell.axis_index];
            let cells_here = if cfg.protocol.fixed_total_budget { full_cells } else { p.cells() as f64 };
            let mut rec = record(cfg, &cell, hash);
            let mut l = learner(cfg, p, cell.seed)?;
            l.train_updates(&p.env, &p.maps, (cfg.protocol.budget_per_cell * cells_here).ceil() as u64, cell.seed)?;
            fill_training(&mut rec, &l, p);
            rec.floor = Some(p.floor());
            gaps(&mut rec, cfg, p, cell.seed, lipschitz)?;
            rec.wall_clock_s = t0.elapsed().as_secs_f64();
            Ok(rec)
        })
    }
}

/// Error against the training budget. Each seed is one run checkpointed at
/// every grid point.
pub struct Budget;

impl Runner for Budget {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        let grid: Vec<f64> = cfg.sweep.grid.iter().map(|v| v.num()).collect::<Result<_>>()?;
        let mut order: Vec<usize> = (0..grid.len()).collect();
        order.sort_by(|&a, &b| grid[a].total_cmp(&grid[b]));
        let p = Prepared::new(&base_spec(cfg))?;
        let floor = p.floor();
        let per_seed = run_ordered(cfg.seeds.clone(), workers, |seed| {
            let t0 = Instant::now();
            let mut l = learner(cfg, &p, seed)?;
            let mut streams = Streams::new(seed);
            let mut rows = vec![None; grid.len()];
            for &k in &order {
                let total = (grid[k] * p.cells() as f64).ceil() as u64;
                l.train_until(&p.env, &p.maps, total, &mut streams)?;
                let cell = cells.iter().find(|c| c.axis_index == k && c.seed == seed).expect("cell grid");
                let mut rec = record(cfg, cell, hash);
                fill_training(&mut rec, &l, &p);
                rec.floor = Some(floor);
                rec.wall_clock_s = t0.elapsed().as_secs_f64();
                rows[k] = Some(rec);
            }
            Ok(rows)
        })?;
        Ok(cells
            .iter()
            .map(|c| {
                let s = cfg.seeds.iter().position(|&x| x == c.seed).unwrap();
                per_seed[s][c.axis_index].clone().expect("every grid point visited")
            })
            .collect())
    }
}

/// Error at a fixed budget and the chain's mixing time over the handoff
/// probability grid.
pub struct Mixing;

impl Runner for Mixing {
    fn run(&self, cfg: &ExperimentConfig, cells: &[Cell], hash: &str, workers: usize) -> Result<Vec<RunRecord>> {
        let grid: Vec<f64> = cfg.sweep.grid.iter().map(|v| v.num()).collect::<Result<_>>()?;
        let prepared = prepare_all(&grid, cfg, workers)?;
        run_ordered(cells.to_vec(), workers, |cell| {
            let t0 = Instant::now();
            let p = &prepared[cell.axis_index];
            let mut rec = record(cfg, &cell, hash);
            let mut l = learner(cfg, p, cell.seed)?;
            l.train_updates(&p.env, &p.maps, (cfg.protocol.budget_per_cell * p.cells() as f64).ceil() as u64, cell.seed)?;
            fill_training(&mut rec, &l, p);
            rec.floor = Some(p.floor());
            let opts = MixingOptions { eps: cfg.protocol.mixing_eps, ..Default::default() };
            let cs = estimate_chain_stats(
                &p.env,
                &p.maps,
                &uniform_successor,
                cfg.protocol.chain_epochs,
                &opts,
                &mut substream(cell.seed, Stream::Estimation, 0),
            )?;
            rec.t_mix = Some(cs.t_mix as f64);
            rec.t_mix_steps = Some(cs.t_mix_steps as f64);
            rec.wall_clock_s = t0.elapsed().as_secs_f64();
            Ok(rec)
        })
    }
}

//! Decision-epoch sampling with full state access.
//!
//! This is oracle-side machinery: it reads latent and interface state
//! directly in order to tabulate the latent decision-epoch process. Learner
//! code never goes through here; it uses [`crate::smdp::Episode`].
//!
//! The sampler runs in stationary mode: the step counter is rewound at the
//! start of every epoch so that the episode horizon only cuts options that
//! are themselves longer than the horizon, and choosing STOP restarts from
//! the initial distribution. Long runs therefore sample the epoch chain
//! under its restart-at-STOP stationary law.

use alloc::collections::BTreeMap;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::ais::ObservationMap;
use crate::error::{bail, Result};
use crate::smdp::{AgentId, Environment, JointAction, JointState, Successor, SuccessorSet};

/// Successor-selection policy used while sampling epochs:
/// `(agent, observation, admissible set, rng) -> successor`.
pub type Behavior<'a> = &'a (dyn Fn(AgentId, usize, &SuccessorSet, &mut dyn RngCore) -> Successor + Sync);

/// Uniform choice over the admissible set.
pub fn uniform_successor(_agent: AgentId, _obs: usize, adm: &SuccessorSet, rng: &mut dyn RngCore) -> Successor {
    adm.as_slice()[rng.gen_range(0..adm.len())]
}

/// What follows an epoch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum NextKey {
    Interface(usize),
    Stop,
    /// The option ran into the horizon without ending.
    Truncated,
}

/// One decision epoch with its latent context.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentEpoch {
    pub agent: AgentId,
    pub interface: usize,
    pub private: usize,
    pub obs: usize,
    pub successor: Successor,
    pub reward: f64,
    pub tau: usize,
    pub next: NextKey,
}

pub struct EpochSampler<'a> {
    env: &'a dyn Environment,
    maps: &'a [ObservationMap],
    state: JointState,
    gamma: f64,
}

impl<'a> EpochSampler<'a> {
    pub fn new(env: &'a dyn Environment, maps: &'a [ObservationMap], rng: &mut dyn RngCore) -> Result<Self> {
        let n = env.config().n_agents;
        if maps.len() != n {
            bail!(Config, "expected {} observation maps, got {}", n, maps.len());
        }
        let state = env.reset(rng)?;
        Ok(Self { env, maps, state, gamma: env.config().discount })
    }

    /// Joint state at the start of the next epoch.
    pub fn state(&self) -> &JointState {
        &self.state
    }

    pub fn set_state(&mut self, state: JointState) {
        self.state = state;
    }

    pub fn next_epoch(&mut self, behavior: Behavior<'_>, rng: &mut dyn RngCore) -> Result<LatentEpoch> {
        if self.state.terminated {
            self.state = self.env.reset(rng)?;
        }
        self.state.step = 0;
        let agent = self.state.active;
        let interface = self.state.interface;
        let private = self.state.privates[agent];
        let obs = self.maps[agent].observe(interface, private);
        let adm = self.env.admissible_successors(interface);
        let successor = behavior(agent, obs, &adm, rng);
        if !adm.contains(successor) {
            bail!(Domain, "behavior chose inadmissible successor {:?}", successor);
        }
        let mut reward = 0.0;
        let mut disc = 1.0;
        let mut tau = 0;
        loop {
            let local = self.env.internal_action(&self.state, rng);
            let ends = self.env.ends_option(&self.state, local);
            let succ = if ends { successor } else { Successor::Agent(agent) };
            let out = self.env.step(&self.state, &JointAction { local, successor: succ }, rng)?;
            reward += disc * out.reward;
            disc *= self.gamma;
            tau += 1;
            self.state = out.next;
            if out.option_end {
                let next = match successor {
                    Successor::Stop => NextKey::Stop,
                    Successor::Agent(_) => {
                        // horizon hits are artefacts of the rewound counter
                        self.state.terminated = false;
                        NextKey::Interface(self.state.interface)
                    }
                };
                return Ok(LatentEpoch { agent, interface, private, obs, successor, reward, tau, next });
            }
            if out.terminated {
                return Ok(LatentEpoch {
                    agent,
                    interface,
                    private,
                    obs,
                    successor,
                    reward,
                    tau,
                    next: NextKey::Truncated,
                });
            }
        }
    }

    pub fn sample(&mut self, n: usize, behavior: Behavior<'_>, rng: &mut dyn RngCore) -> Result<Vec<LatentEpoch>> {
        (0..n).map(|_| self.next_epoch(behavior, rng)).collect()
    }
}

/// Running statistics of one latent cell `(agent, interface, successor)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct CellStats {
    pub n: u64,
    pub sum_r: f64,
    pub sum_r2: f64,
    pub sum_disc: f64,
    pub outcomes: BTreeMap<(NextKey, usize), u64>,
}

impl CellStats {
    pub fn mean(&self) -> f64 {
        self.sum_r / self.n as f64
    }

    /// Standard error of the mean option reward.
    pub fn se(&self) -> f64 {
        if self.n < 2 {
            return f64::INFINITY;
        }
        let n = self.n as f64;
        let var = (self.sum_r2 - self.sum_r * self.sum_r / n).max(0.0) / (n - 1.0);
        libm::sqrt(var / n)
    }

    pub fn mean_discount(&self) -> f64 {
        self.sum_disc / self.n as f64
    }

    pub fn prob(&self, key: &(NextKey, usize)) -> f64 {
        self.outcomes.get(key).map_or(0.0, |c| *c as f64 / self.n as f64)
    }

    pub fn merge(&mut self, other: &CellStats) {
        self.n += other.n;
        self.sum_r += other.sum_r;
        self.sum_r2 += other.sum_r2;
        self.sum_disc += other.sum_disc;
        for (k, c) in &other.outcomes {
            *self.outcomes.entry(*k).or_insert(0) += c;
        }
    }
}

/// Empirical latent decision-epoch process keyed by `(agent, interface, successor slot)`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LatentTally {
    pub n_agents: usize,
    pub gamma: f64,
    pub cells: BTreeMap<(AgentId, usize, usize), CellStats>,
    pub n_samples: u64,
}

impl LatentTally {
    pub fn new(n_agents: usize, gamma: f64) -> Self {
        Self { n_agents, gamma, cells: BTreeMap::new(), n_samples: 0 }
    }

    pub fn record(&mut self, e: &LatentEpoch) {
        let s = e.successor.slot(self.n_agents);
        let cell = self.cells.entry((e.agent, e.interface, s)).or_default();
        cell.n += 1;
        cell.sum_r += e.reward;
        cell.sum_r2 += e.reward * e.reward;
        cell.sum_disc += libm::pow(self.gamma, e.tau as f64);
        *cell.outcomes.entry((e.next, e.tau)).or_insert(0) += 1;
        self.n_samples += 1;
    }

    pub fn merge(&mut self, other: &LatentTally) {
        for (k, c) in &other.cells {
            self.cells.entry(*k).or_default().merge(c);
        }
        self.n_samples += other.n_samples;
    }
}

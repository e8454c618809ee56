//! Small tabular IC-SMDPs with a closed-form latent decision-epoch process.
//!
//! The latent state is the remaining duration of the running option. When
//! agent `i` takes over at interface `m`, a duration is drawn from
//! `dur(i, m)`; every step pays `r(i, m)`, and the closing step adds
//! `bonus(i, m, c')` and moves the interface to `m' ~ next(i, m, c')`.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{sample_weighted, simplex};
use crate::ais::{identity_maps, ObservationMap};
use crate::error::{bail, Result};
use crate::oracle::{LatentSmdp, Outcome};
use crate::rng::{substream, Stream};
use crate::smdp::{settle, validate_action, EnvConfig, Environment, JointAction, JointState, StepOutcome, Successor, SuccessorSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TableSpec {
    pub n_agents: usize,
    pub card_interface: usize,
    pub tau_max: usize,
    pub discount: f64,
    pub horizon: usize,
    pub seed: u64,
    /// Probability that STOP is admissible at a given interface state.
    pub stop_prob: f64,
    /// Probability that a given agent is an admissible successor.
    pub agent_prob: f64,
    /// Number of interface states each `next` row may reach.
    pub next_support: usize,
}

impl Default for TableSpec {
    fn default() -> Self {
        Self {
            n_agents: 2,
            card_interface: 4,
            tau_max: 3,
            discount: 0.8,
            horizon: 200,
            seed: 0,
            stop_prob: 0.5,
            agent_prob: 0.8,
            next_support: 3,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TableEnv {
    config: EnvConfig,
    pub tau_max: usize,
    /// Per interface state.
    pub admissible: Vec<SuccessorSet>,
    /// `dur[i * card + m][tau - 1]`.
    pub durations: Vec<Vec<f64>>,
    /// `step_reward[i * card + m]`.
    pub step_reward: Vec<f64>,
    /// `bonus[(i * card + m) * (n + 1) + slot]`.
    pub bonus: Vec<f64>,
    /// `next[(i * card + m) * (n + 1) + slot]` over interface states.
    pub next: Vec<Vec<f64>>,
}

impl TableEnv {
    pub fn random(spec: &TableSpec) -> Result<Self> {
        if spec.tau_max == 0 || spec.tau_max > spec.horizon {
            bail!(Config, "tau_max must lie in [1, horizon]");
        }
        if spec.next_support == 0 {
            bail!(Config, "next_support must be at least 1");
        }
        let (n, card) = (spec.n_agents, spec.card_interface);
        let mut rng = substream(spec.seed, Stream::Construction, 0);
        let admissible = (0..card)
            .map(|_| {
                let mut items: Vec<Successor> =
                    (0..n).filter(|_| rng.gen::<f64>() < spec.agent_prob).map(Successor::Agent).collect();
                if rng.gen::<f64>() < spec.stop_prob {
                    items.push(Successor::Stop);
                }
                if items.is_empty() {
                    items.push(Successor::Agent(rng.gen_range(0..n)));
                }
                SuccessorSet::new(items)
            })
            .collect();
        let durations = (0..n * card).map(|_| simplex(spec.tau_max, &mut rng)).collect();
        let step_reward = (0..n * card).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let bonus = (0..n * card * (n + 1)).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let support = spec.next_support.min(card);
        let next = (0..n * card * (n + 1))
            .map(|_| {
                let mut row = vec![0.0; card];
                let w = simplex(support, &mut rng);
                for wk in w {
                    row[rng.gen_range(0..card)] += wk;
                }
                row
            })
            .collect();
        let mut params = BTreeMap::new();
        params.insert("family".to_string(), "table".to_string());
        params.insert("tau_max".to_string(), spec.tau_max.to_string());
        let config = EnvConfig {
            n_agents: n,
            card_latent: spec.tau_max + 1,
            card_interface: card,
            horizon: spec.horizon,
            discount: spec.discount,
            seed: spec.seed,
            params,
        };
        Self::from_parts(config, spec.tau_max, admissible, durations, step_reward, bonus, next)
    }

    /// Build from explicit tables, validating shapes and stochasticity.
    pub fn from_parts(
        config: EnvConfig,
        tau_max: usize,
        admissible: Vec<SuccessorSet>,
        durations: Vec<Vec<f64>>,
        step_reward: Vec<f64>,
        bonus: Vec<f64>,
        next: Vec<Vec<f64>>,
    ) -> Result<Self> {
        config.validate()?;
        let (n, card) = (config.n_agents, config.card_interface);
        let cells = n * card;
        if admissible.len() != card || durations.len() != cells || step_reward.len() != cells {
            bail!(Config, "table sizes do not match {} agents x {} interface states", n, card);
        }
        if bonus.len() != cells * (n + 1) || next.len() != cells * (n + 1) {
            bail!(Config, "successor tables need {} rows", cells * (n + 1));
        }
        if admissible.iter().any(|a| a.iter().any(|s| matches!(s, Successor::Agent(j) if j >= n))) {
            bail!(Config, "admissible set names an unknown agent");
        }
        let stochastic = |row: &Vec<f64>, len: usize| {
            row.len() == len && row.iter().all(|p| *p >= 0.0) && libm::fabs(row.iter().sum::<f64>() - 1.0) < 1e-9
        };
        if !durations.iter().all(|d| stochastic(d, tau_max)) || !next.iter().all(|r| stochastic(r, card)) {
            bail!(Config, "duration and next-state rows must be distributions");
        }
        if config.card_latent <= tau_max {
            bail!(Config, "card_latent must exceed tau_max");
        }
        Ok(Self { config, tau_max, admissible, durations, step_reward, bonus, next })
    }

    fn cell(&self, i: usize, m: usize) -> usize {
        i * self.config.card_interface + m
    }

    fn draw_duration(&self, i: usize, m: usize, rng: &mut dyn RngCore) -> usize {
        sample_weighted(&self.durations[self.cell(i, m)], rng) + 1
    }

    /// Latent decision-epoch SMDP in closed form: the option reward is
    /// `sum_tau dur(tau) (sum_{s < tau} gamma^s r + gamma^{tau-1} bonus)`.
    pub fn exact_latent(&self) -> LatentSmdp {
        let (n, card, g) = (self.config.n_agents, self.config.card_interface, self.config.discount);
        let mut lat = LatentSmdp::empty(n, card, g, self.tau_max);
        for i in 0..n {
            for m in 0..card {
                let s = lat.state(i, m);
                let c = self.cell(i, m);
                lat.smdp.admissible[s] = self.admissible[m].slots(n).collect();
                for slot in self.admissible[m].slots(n) {
                    let k = lat.smdp.idx(s, slot);
                    let row = c * (n + 1) + slot;
                    let mut reward = 0.0;
                    let mut outcomes = Vec::new();
                    for (t, pd) in self.durations[c].iter().enumerate() {
                        if *pd == 0.0 {
                            continue;
                        }
                        let tau = t + 1;
                        let steps: f64 = (0..tau).map(|s| libm::pow(g, s as f64)).sum();
                        reward += pd * (steps * self.step_reward[c] + libm::pow(g, t as f64) * self.bonus[row]);
                        if slot == n {
                            outcomes.push(Outcome { next: None, tau, prob: *pd });
                        } else {
                            for (m2, pm) in self.next[row].iter().enumerate() {
                                if *pm > 0.0 {
                                    outcomes.push(Outcome { next: Some(slot * card + m2), tau, prob: pd * pm });
                                }
                            }
                        }
                    }
                    lat.smdp.reward[k] = reward;
                    lat.smdp.kernel[k] = outcomes;
                }
            }
        }
        lat
    }
}

impl Environment for TableEnv {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn r_max(&self) -> f64 {
        let r = self.step_reward.iter().fold(0.0f64, |a, x| a.max(libm::fabs(*x)));
        let b = self.bonus.iter().fold(0.0f64, |a, x| a.max(libm::fabs(*x)));
        r + b
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Result<JointState> {
        let i = rng.gen_range(0..self.config.n_agents);
        let m = rng.gen_range(0..self.config.card_interface);
        Ok(JointState {
            latent: self.draw_duration(i, m, rng),
            interface: m,
            privates: vec![0; self.config.n_agents],
            active: i,
            step: 0,
            terminated: false,
        })
    }

    fn admissible_successors(&self, interface: usize) -> SuccessorSet {
        self.admissible[interface].clone()
    }

    fn ends_option(&self, state: &JointState, _local: usize) -> bool {
        state.latent <= 1
    }

    fn step(&self, state: &JointState, action: &JointAction, rng: &mut dyn RngCore) -> Result<StepOutcome> {
        let ends = validate_action(self, state, action)?;
        let n = self.config.n_agents;
        let (i, m) = (state.active, state.interface);
        let c = self.cell(i, m);
        let mut next = state.clone();
        let mut reward = self.step_reward[c];
        if ends {
            let row = c * (n + 1) + action.successor.slot(n);
            reward += self.bonus[row];
            if let Successor::Agent(j) = action.successor {
                let m2 = sample_weighted(&self.next[row], rng);
                next.interface = m2;
                next.latent = self.draw_duration(j, m2, rng);
            } else {
                next.latent = 0;
            }
        } else {
            next.latent -= 1;
        }
        Ok(settle(&self.config, state, action, ends, next, reward))
    }

    fn observation_maps(&self) -> Vec<ObservationMap> {
        identity_maps(self.config.n_agents, self.config.card_interface)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::StreamRng;
    use rand::SeedableRng;

    #[test]
    fn exact_latent_is_valid_and_deterministic() {
        for seed in 0..10 {
            let spec = TableSpec { seed, ..Default::default() };
            let a = TableEnv::random(&spec).unwrap();
            let b = TableEnv::random(&spec).unwrap();
            assert_eq!(a, b);
            let lat = a.exact_latent();
            lat.smdp.validate().unwrap();
            assert!(a.admissible.iter().all(|s| !s.is_empty()));
        }
    }

    #[test]
    fn non_ending_steps_keep_control() {
        let env = TableEnv::random(&TableSpec { tau_max: 4, ..Default::default() }).unwrap();
        let mut rng = StreamRng::seed_from_u64(9);
        let mut s = env.reset(&mut rng).unwrap();
        s.latent = 3;
        let bad = JointAction { local: 0, successor: Successor::Stop };
        assert!(env.step(&s, &bad, &mut rng).is_err());
        let ok = JointAction { local: 0, successor: Successor::Agent(s.active) };
        let out = env.step(&s, &ok, &mut rng).unwrap();
        assert!(!out.option_end && out.next.latent == 2 && out.next.active == s.active);
    }
}

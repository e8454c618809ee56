//! Centralized ground truth on small instances.
//!
//! [`Smdp`] is a finite semi-Markov decision process with sparse
//! `(next state, duration)` outcomes; a `None` next state is terminal with
//! value zero. [`LatentSmdp`] is the decision-epoch process over
//! `(active agent, interface state)` with successor choices as actions, and
//! [`AisSmdp`] is the same process seen through observation maps, over the
//! disjoint union of the agents' observation spaces.

use alloc::collections::BTreeMap;
use alloc::vec;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::ais::{identity_maps, ObservationMap};
use crate::epochs::{Behavior, EpochSampler, LatentTally, NextKey};
use crate::error::{bail, Result};
use crate::smdp::{AgentId, Environment, Successor};

pub const DEFAULT_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Outcome {
    /// Next state; `None` is terminal.
    pub next: Option<usize>,
    pub tau: usize,
    pub prob: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Smdp {
    pub n_states: usize,
    pub n_actions: usize,
    pub gamma: f64,
    pub tau_max: usize,
    /// Sorted admissible actions per state; an empty list makes the state
    /// absorbing with value zero.
    pub admissible: Vec<Vec<usize>>,
    /// `reward[s * n_actions + a]`.
    pub reward: Vec<f64>,
    /// `kernel[s * n_actions + a]`.
    pub kernel: Vec<Vec<Outcome>>,
}

/// Optimal values of an [`Smdp`]. Inadmissible entries of `q` are `-inf`.
#[derive(Clone, Debug, PartialEq)]
pub struct Solution {
    pub q: Vec<f64>,
    pub v: Vec<f64>,
    pub iterations: usize,
    pub residual: f64,
}

impl Solution {
    pub fn q(&self, n_actions: usize, s: usize, a: usize) -> f64 {
        self.q[s * n_actions + a]
    }
}

impl Smdp {
    pub fn new(n_states: usize, n_actions: usize, gamma: f64, tau_max: usize) -> Self {
        Self {
            n_states,
            n_actions,
            gamma,
            tau_max,
            admissible: vec![Vec::new(); n_states],
            reward: vec![0.0; n_states * n_actions],
            kernel: vec![Vec::new(); n_states * n_actions],
        }
    }

    #[inline]
    pub fn idx(&self, s: usize, a: usize) -> usize {
        s * self.n_actions + a
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma < 1.0) {
            bail!(Config, "discount must lie in (0, 1)");
        }
        for s in 0..self.n_states {
            for &a in &self.admissible[s] {
                if a >= self.n_actions {
                    bail!(Domain, "action {} out of range in state {}", a, s);
                }
                let row = &self.kernel[self.idx(s, a)];
                let total: f64 = row.iter().map(|o| o.prob).sum();
                if libm::fabs(total - 1.0) > 1e-9 {
                    bail!(Domain, "kernel row ({}, {}) sums to {}", s, a, total);
                }
                for o in row {
                    if o.tau == 0 || o.tau > self.tau_max {
                        bail!(Domain, "duration {} outside [1, {}]", o.tau, self.tau_max);
                    }
                    if o.prob < 0.0 {
                        bail!(Domain, "negative probability in row ({}, {})", s, a);
                    }
                    if matches!(o.next, Some(n) if n >= self.n_states) {
                        bail!(Domain, "next state out of range in row ({}, {})", s, a);
                    }
                }
            }
        }
        Ok(())
    }

    /// Rows with durations folded in: `(next, sum of prob * gamma^tau)`.
    fn discounted_rows(&self) -> Vec<Vec<(usize, f64)>> {
        self.kernel
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for o in row {
                    if let Some(n) = o.next {
                        *acc.entry(n).or_insert(0.0) += o.prob * libm::pow(self.gamma, o.tau as f64);
                    }
                }
                acc.into_iter().collect()
            })
            .collect()
    }

    /// `max_{s,a} E[gamma^tau | s, a]` over admissible pairs.
    pub fn gamma_bar(&self) -> f64 {
        let mut g = 0.0f64;
        for s in 0..self.n_states {
            for &a in &self.admissible[s] {
                let d: f64 = self.kernel[self.idx(s, a)]
                    .iter()
                    .map(|o| o.prob * libm::pow(self.gamma, o.tau as f64))
                    .sum();
                g = g.max(d);
            }
        }
        g
    }

    pub fn values_of(&self, q: &[f64]) -> Vec<f64> {
        (0..self.n_states)
            .map(|s| {
                self.admissible[s]
                    .iter()
                    .map(|&a| q[self.idx(s, a)])
                    .fold(None, |m: Option<f64>, x| Some(m.map_or(x, |m| m.max(x))))
                    .unwrap_or(0.0)
            })
            .collect()
    }

    /// One application of the optimal SMDP Bellman operator.
    pub fn bellman(&self, q: &[f64]) -> Vec<f64> {
        let rows = self.discounted_rows();
        self.bellman_with(&rows, q)
    }

    fn bellman_with(&self, rows: &[Vec<(usize, f64)>], q: &[f64]) -> Vec<f64> {
        let v = self.values_of(q);
        let mut out = vec![f64::NEG_INFINITY; q.len()];
        for s in 0..self.n_states {
            for &a in &self.admissible[s] {
                let k = self.idx(s, a);
                let cont: f64 = rows[k].iter().map(|(n, w)| w * v[*n]).sum();
                out[k] = self.reward[k] + cont;
            }
        }
        out
    }

    /// Value iteration to `||T(Q) - Q||_inf <= tol`.
    pub fn value_iteration(&self, tol: f64) -> Result<Solution> {
        if tol <= 0.0 {
            bail!(Usage, "tolerance must be positive");
        }
        let rows = self.discounted_rows();
        let mut q = vec![f64::NEG_INFINITY; self.n_states * self.n_actions];
        for s in 0..self.n_states {
            for &a in &self.admissible[s] {
                q[self.idx(s, a)] = 0.0;
            }
        }
        let mut iterations = 0;
        loop {
            let next = self.bellman_with(&rows, &q);
            iterations += 1;
            let residual = sup_diff(&next, &q);
            q = next;
            if residual <= tol {
                // the residual of the returned iterate is at most gamma * residual
                let residual = sup_diff(&self.bellman_with(&rows, &q), &q);
                let v = self.values_of(&q);
                return Ok(Solution { q, v, iterations, residual });
            }
            if iterations > 1_000_000 {
                bail!(Estimation, "value iteration did not converge");
            }
        }
    }

    /// Greedy action per state, ties to the lowest index.
    pub fn greedy(&self, q: &[f64]) -> Vec<Option<usize>> {
        (0..self.n_states)
            .map(|s| {
                let mut best: Option<(usize, f64)> = None;
                for &a in &self.admissible[s] {
                    let x = q[self.idx(s, a)];
                    if best.map_or(true, |(_, b)| x > b) {
                        best = Some((a, x));
                    }
                }
                best.map(|b| b.0)
            })
            .collect()
    }
}

/// `max |a_k - b_k|` over finite entries.
pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .filter(|(x, y)| x.is_finite() && y.is_finite())
        .map(|(x, y)| libm::fabs(x - y))
        .fold(0.0, f64::max)
}

/// Decision-epoch SMDP over `(active agent, interface state)`; actions are
/// successor slots with STOP last. State index is `agent * card_interface + m`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentSmdp {
    pub n_agents: usize,
    pub card_interface: usize,
    pub smdp: Smdp,
    /// Admissible cells that had no samples (Monte-Carlo extraction only).
    pub unvisited: Vec<(AgentId, usize, usize)>,
}

impl LatentSmdp {
    pub fn state(&self, agent: AgentId, interface: usize) -> usize {
        agent * self.card_interface + interface
    }

    pub fn empty(n_agents: usize, card_interface: usize, gamma: f64, tau_max: usize) -> Self {
        Self {
            n_agents,
            card_interface,
            smdp: Smdp::new(n_agents * card_interface, n_agents + 1, gamma, tau_max),
            unvisited: Vec::new(),
        }
    }

    /// Monte-Carlo estimate from tabulated epochs. Admissible cells without
    /// samples are dropped from the admissible lists and reported in
    /// `unvisited`; truncated epochs count as terminal.
    pub fn from_tally(
        env: &dyn Environment,
        tally: &LatentTally,
        min_visits: u64,
    ) -> Result<Self> {
        let cfg = env.config();
        let (n, card) = (cfg.n_agents, cfg.card_interface);
        let mut tau_max = 1;
        for c in tally.cells.values() {
            for (_, tau) in c.outcomes.keys() {
                tau_max = tau_max.max(*tau);
            }
        }
        let mut out = Self::empty(n, card, cfg.discount, tau_max);
        for i in 0..n {
            for m in 0..card {
                let s = out.state(i, m);
                for slot in env.admissible_successors(m).slots(n) {
                    let Some(c) = tally.cells.get(&(i, m, slot)).filter(|c| c.n >= min_visits.max(1)) else {
                        out.unvisited.push((i, m, slot));
                        continue;
                    };
                    out.smdp.admissible[s].push(slot);
                    let k = out.smdp.idx(s, slot);
                    out.smdp.reward[k] = c.mean();
                    out.smdp.kernel[k] = c
                        .outcomes
                        .iter()
                        .map(|((next, tau), cnt)| Outcome {
                            next: match next {
                                NextKey::Interface(m2) if slot < n => Some(slot * card + m2),
                                _ => None,
                            },
                            tau: *tau,
                            prob: *cnt as f64 / c.n as f64,
                        })
                        .collect();
                }
            }
        }
        Ok(out)
    }

    pub fn solve(&self) -> Result<Solution> {
        self.smdp.value_iteration(DEFAULT_TOL)
    }
}

/// Monte-Carlo extraction of the latent SMDP under `behavior`.
pub fn extract_latent_mc(
    env: &dyn Environment,
    behavior: Behavior<'_>,
    n_epochs: usize,
    min_visits: u64,
    rng: &mut dyn RngCore,
) -> Result<LatentSmdp> {
    let cfg = env.config();
    let maps = identity_maps(cfg.n_agents, cfg.card_interface);
    let mut sampler = EpochSampler::new(env, &maps, rng)?;
    let mut tally = LatentTally::new(cfg.n_agents, cfg.discount);
    for _ in 0..n_epochs {
        tally.record(&sampler.next_epoch(behavior, rng)?);
    }
    LatentSmdp::from_tally(env, &tally, min_visits)
}

/// The AIS-induced SMDP over the disjoint union of observation spaces.
///
/// Besides the pushed-forward kernel over AIS states, it keeps the lifted
/// kernel over latent next states, which is what the evolution-sufficiency
/// gap compares against.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisSmdp {
    pub n_agents: usize,
    /// First AIS state of each agent.
    pub offsets: Vec<usize>,
    pub smdp: Smdp,
    /// Conditioning weights `w(m | i, o)` per AIS state.
    pub weights: Vec<Vec<(usize, f64)>>,
    /// Blend of latent kernels per `(AIS state, action)`, over latent states.
    pub lifted: Vec<Vec<Outcome>>,
}

impl AisSmdp {
    pub fn state(&self, agent: AgentId, obs: usize) -> usize {
        self.offsets[agent] + obs
    }

    /// Build from a latent SMDP and private-state-free maps; `weight(i, m)`
    /// gives the (unnormalized) conditioning weight of `m` within its
    /// observation class. Classes with zero total weight fall back to
    /// uniform weights.
    pub fn from_latent(
        latent: &LatentSmdp,
        maps: &[ObservationMap],
        weight: &dyn Fn(AgentId, usize) -> f64,
    ) -> Result<Self> {
        let (n, card) = (latent.n_agents, latent.card_interface);
        if maps.len() != n {
            bail!(Config, "expected {} maps, got {}", n, maps.len());
        }
        if maps.iter().any(|m| !m.ignores_private()) {
            bail!(Usage, "table oracle needs observation maps that ignore the private state");
        }
        let mut offsets = Vec::with_capacity(n + 1);
        let mut total = 0;
        for m in maps {
            offsets.push(total);
            total += m.card_obs;
        }
        let lat = &latent.smdp;
        let mut smdp = Smdp::new(total, lat.n_actions, lat.gamma, lat.tau_max);
        let mut weights = vec![Vec::new(); total];
        let mut lifted = vec![Vec::new(); total * lat.n_actions];
        for i in 0..n {
            let mut classes: BTreeMap<usize, Vec<(usize, f64)>> = BTreeMap::new();
            for m in 0..card {
                if lat.admissible[latent.state(i, m)].is_empty() {
                    continue;
                }
                classes.entry(maps[i].observe(m, 0)).or_default().push((m, weight(i, m).max(0.0)));
            }
            for (o, mut members) in classes {
                let sum: f64 = members.iter().map(|x| x.1).sum();
                if sum > 0.0 {
                    members.iter_mut().for_each(|x| x.1 /= sum);
                } else {
                    let k = members.len() as f64;
                    members.iter_mut().for_each(|x| x.1 = 1.0 / k);
                }
                let sa = offsets[i] + o;
                let adm = lat.admissible[latent.state(i, members[0].0)].clone();
                for (m, _) in &members {
                    if lat.admissible[latent.state(i, *m)] != adm {
                        bail!(Domain, "admissible sets differ inside observation class {} of agent {}", o, i);
                    }
                }
                for &a in &adm {
                    let k = smdp.idx(sa, a);
                    let mut lift: BTreeMap<(Option<usize>, usize), f64> = BTreeMap::new();
                    let mut push: BTreeMap<(Option<usize>, usize), f64> = BTreeMap::new();
                    let mut r = 0.0;
                    for &(m, w) in &members {
                        let kl = lat.idx(latent.state(i, m), a);
                        r += w * lat.reward[kl];
                        for out in &lat.kernel[kl] {
                            *lift.entry((out.next, out.tau)).or_insert(0.0) += w * out.prob;
                            let ais_next = out.next.map(|s2| {
                                let (j, m2) = (s2 / card, s2 % card);
                                offsets[j] + maps[j].observe(m2, 0)
                            });
                            *push.entry((ais_next, out.tau)).or_insert(0.0) += w * out.prob;
                        }
                    }
                    smdp.reward[k] = r;
                    smdp.kernel[k] = push
                        .into_iter()
                        .map(|((next, tau), prob)| Outcome { next, tau, prob })
                        .collect();
                    lifted[k] = lift
                        .into_iter()
                        .map(|((next, tau), prob)| Outcome { next, tau, prob })
                        .collect();
                }
                smdp.admissible[sa] = adm;
                weights[sa] = members;
            }
        }
        Ok(Self { n_agents: n, offsets, smdp, weights, lifted })
    }

    pub fn solve(&self) -> Result<Solution> {
        self.smdp.value_iteration(DEFAULT_TOL)
    }
}

/// Total-variation distance between two sparse outcome lists.
pub fn tv_distance(p: &[Outcome], q: &[Outcome]) -> f64 {
    let mut acc: BTreeMap<(Option<usize>, usize), f64> = BTreeMap::new();
    for o in p {
        *acc.entry((o.next, o.tau)).or_insert(0.0) += o.prob;
    }
    for o in q {
        *acc.entry((o.next, o.tau)).or_insert(0.0) -= o.prob;
    }
    0.5 * acc.values().map(|x| libm::fabs(*x)).sum::<f64>()
}

/// TV-Lipschitz constant of the AIS-induced optimal value function.
///
/// A bounded `f` satisfies `|E_P f - E_Q f| <= osc(f) * TV(P, Q)` with
/// `TV = sup_A |P(A) - Q(A)|`, and the oscillation is the smallest such
/// constant. The oscillation is taken over the optimal values of all
/// non-absorbing AIS states together with the terminal value zero.
pub fn lipschitz_constant(ais: &AisSmdp, solution: &Solution) -> f64 {
    oscillation(&ais.smdp, &solution.v)
}

/// Analogue of [`lipschitz_constant`] for the optimal Q-function.
pub fn lipschitz_constant_q(solution: &Solution) -> f64 {
    let finite = solution.q.iter().copied().filter(|x| x.is_finite());
    let (lo, hi) = finite.fold((0.0f64, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

fn oscillation(smdp: &Smdp, v: &[f64]) -> f64 {
    let (lo, hi) = (0..smdp.n_states)
        .filter(|&s| !smdp.admissible[s].is_empty())
        .map(|s| v[s])
        .fold((0.0f64, 0.0f64), |(lo, hi), x| (lo.min(x), hi.max(x)));
    hi - lo
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapCheck {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
    pub eps_phi: f64,
    pub delta_phi: f64,
    pub gamma_bar: f64,
    pub lipschitz: f64,
}

/// Compare `sup |V*_lat(i, m) - V_hat*(i, phi_i(m))|` with
/// `(eps + gamma_bar * L_V * delta) / (1 - gamma_bar)`, where the gaps and
/// `gamma_bar` are computed exactly from the two tables.
pub fn ais_value_gap_check(
    latent: &LatentSmdp,
    ais: &AisSmdp,
    maps: &[ObservationMap],
    l_v: f64,
) -> Result<GapCheck> {
    let sol_lat = latent.solve()?;
    let sol_ais = ais.solve()?;
    let lat = &latent.smdp;
    let card = latent.card_interface;
    let mut eps = 0.0f64;
    let mut delta = 0.0f64;
    let mut lhs = 0.0f64;
    for i in 0..latent.n_agents {
        for m in 0..card {
            let s = latent.state(i, m);
            if lat.admissible[s].is_empty() {
                continue;
            }
            let sa = ais.state(i, maps[i].observe(m, 0));
            lhs = lhs.max(libm::fabs(sol_lat.v[s] - sol_ais.v[sa]));
            for &a in &lat.admissible[s] {
                let kl = lat.idx(s, a);
                let ka = ais.smdp.idx(sa, a);
                eps = eps.max(libm::fabs(lat.reward[kl] - ais.smdp.reward[ka]));
                delta = delta.max(tv_distance(&lat.kernel[kl], &ais.lifted[ka]));
            }
        }
    }
    let gamma_bar = lat.gamma_bar();
    let rhs = (eps + gamma_bar * l_v * delta) / (1.0 - gamma_bar);
    Ok(GapCheck {
        lhs,
        rhs,
        holds: lhs <= rhs + 1e-9,
        eps_phi: eps,
        delta_phi: delta,
        gamma_bar,
        lipschitz: l_v,
    })
}

/// The successor encoded by an action slot.
pub fn action_successor(slot: usize, n_agents: usize) -> Successor {
    Successor::from_slot(slot, n_agents)
}

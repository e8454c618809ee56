//! Parameterized synthetic IC-SMDP with a retention knob and a handoff knob.
//!
//! Construction:
//!
//! * latent `x` in `0..card_latent`, moved every step by a sparse kernel
//!   `K(x' | x, i, op)` with `out_degree` successors per row; the union graph
//!   is strongly connected (regenerated on a new sub-seed otherwise);
//! * interface `m` on a ring of `card_interface` states, held fixed during an
//!   invocation and shifted by `d(x, i)` (one of four seeded shifts in
//!   `[-shift_width, shift_width]`) when the invocation closes;
//! * pre-configured agents: the local action is `op + 2 * finish` with
//!   `op ~ Bernoulli(q_i)` and `finish ~ Bernoulli(p_handoff)`; a set finish
//!   bit closes the invocation, so durations are geometric;
//! * reward `w g(m, i) + (1 - w) u(x, m)` per step with
//!   `g(m, i) = cos(2 pi (m / |M| - i / N))` and `u(x, m)` drawn once per cell
//!   from `uniform[-1, 1]`, minus `handoff_cost` when control leaves the agent
//!   (STOP included).
//!
//! Each agent is competent on an arc of the ring, so the value of a successor
//! choice depends on where the interface sits; coarser observations blur that
//! position.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::{sample_weighted, simplex};
use crate::ais::{retention_maps, ObservationMap};
use crate::error::{bail, Result};
use crate::oracle::{LatentSmdp, Outcome, Solution};
use crate::rng::{substream, Stream};
use crate::smdp::{settle, validate_action, EnvConfig, Environment, JointAction, JointState, StepOutcome, Successor, SuccessorSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_agents: usize,
    pub card_latent: usize,
    pub card_interface: usize,
    pub horizon: usize,
    pub discount: f64,
    pub rho: f64,
    pub p_handoff: f64,
    pub kernel_seed: u64,
    pub reward_seed: u64,
    pub out_degree: usize,
    pub shift_width: usize,
    /// Weight of the structured term `g` in the step reward.
    pub structure_weight: f64,
    pub handoff_cost: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_agents: 10,
            card_latent: 120,
            card_interface: 50,
            horizon: 60,
            discount: 0.9,
            rho: 1.0,
            p_handoff: 0.3,
            kernel_seed: 0,
            reward_seed: 0,
            out_degree: 4,
            shift_width: 6,
            structure_weight: 0.75,
            handoff_cost: 0.01,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 || self.card_latent == 0 || self.card_interface == 0 || self.horizon == 0 {
            bail!(Config, "synthetic dimensions must be positive");
        }
        if !(self.rho > 0.0 && self.rho <= 1.0) {
            bail!(Config, "rho must lie in (0, 1], got {}", self.rho);
        }
        if !(self.p_handoff > 0.0 && self.p_handoff <= 1.0) {
            bail!(Config, "p_handoff must lie in (0, 1], got {}", self.p_handoff);
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            bail!(Config, "discount must lie in (0, 1)");
        }
        if self.out_degree == 0 || self.out_degree > self.card_latent {
            bail!(Config, "out_degree must lie in [1, card_latent]");
        }
        if 2 * self.shift_width + 1 > self.card_interface {
            bail!(Config, "shift window wider than the interface ring");
        }
        if !(0.0..=1.0).contains(&self.structure_weight) || self.handoff_cost < 0.0 {
            bail!(Config, "invalid reward parameters");
        }
        Ok(())
    }
}

const SHIFTS: usize = 4;
const MAX_REGENERATIONS: u64 = 64;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticEnv {
    config: EnvConfig,
    pub spec: SyntheticSpec,
    /// `(targets, probabilities)` per `((x * N + i) * 2 + op)`.
    kernel: Vec<(Vec<usize>, Vec<f64>)>,
    /// Signed shifts per `x * N + i`.
    shifts: Vec<[i64; SHIFTS]>,
    /// `u[x * |M| + m]`.
    noise: Vec<f64>,
    /// `P(op = 1)` per agent.
    pub op_prob: Vec<f64>,
    /// Sub-seed increments spent on regeneration.
    pub regenerations: u64,
}

impl SyntheticEnv {
    pub fn new(spec: &SyntheticSpec) -> Result<Self> {
        spec.validate()?;
        let (nx, n) = (spec.card_latent, spec.n_agents);
        let mut attempt = 0;
        let kernel = loop {
            let mut rng = substream(spec.kernel_seed, Stream::Construction, attempt);
            let kernel: Vec<(Vec<usize>, Vec<f64>)> = (0..nx * n * 2)
                .map(|_| {
                    let mut targets = Vec::with_capacity(spec.out_degree);
                    while targets.len() < spec.out_degree {
                        let t = rng.gen_range(0..nx);
                        if !targets.contains(&t) {
                            targets.push(t);
                        }
                    }
                    (targets, simplex(spec.out_degree, &mut rng))
                })
                .collect();
            if strongly_connected(nx, &kernel) {
                break kernel;
            }
            attempt += 1;
            if attempt >= MAX_REGENERATIONS {
                bail!(Config, "no strongly connected latent kernel after {} attempts", attempt);
            }
        };
        let mut rng = substream(spec.kernel_seed, Stream::Construction, 1 << 32);
        let w = spec.shift_width as i64;
        let shifts = (0..nx * n)
            .map(|_| core::array::from_fn(|_| rng.gen_range(-w..=w)))
            .collect();
        let op_prob = (0..n).map(|_| rng.gen_range(0.2..0.8)).collect();
        let mut rng = substream(spec.reward_seed, Stream::Construction, 2 << 32);
        let noise = (0..nx * spec.card_interface).map(|_| rng.gen_range(-1.0..=1.0)).collect();
        let mut params = BTreeMap::new();
        params.insert("family".to_string(), "synthetic".to_string());
        params.insert("rho".to_string(), spec.rho.to_string());
        params.insert("p_handoff".to_string(), spec.p_handoff.to_string());
        params.insert("reward_seed".to_string(), spec.reward_seed.to_string());
        let config = EnvConfig {
            n_agents: n,
            card_latent: nx,
            card_interface: spec.card_interface,
            horizon: spec.horizon,
            discount: spec.discount,
            seed: spec.kernel_seed,
            params,
        };
        Ok(Self { config, spec: spec.clone(), kernel, shifts, noise, op_prob, regenerations: attempt })
    }

    /// Structured reward component `cos(2 pi (m / |M| - i / N))`.
    pub fn competence(&self, m: usize, i: usize) -> f64 {
        let phase = m as f64 / self.spec.card_interface as f64 - i as f64 / self.spec.n_agents as f64;
        libm::cos(2.0 * core::f64::consts::PI * phase)
    }

    pub fn step_reward(&self, x: usize, m: usize, i: usize) -> f64 {
        let w = self.spec.structure_weight;
        w * self.competence(m, i) + (1.0 - w) * self.noise[x * self.spec.card_interface + m]
    }

    fn row(&self, x: usize, i: usize, op: usize) -> &(Vec<usize>, Vec<f64>) {
        &self.kernel[(x * self.spec.n_agents + i) * 2 + op]
    }

    fn shift(&self, m: usize, d: i64) -> usize {
        let card = self.spec.card_interface as i64;
        ((m as i64 + d).rem_euclid(card)) as usize
    }

    /// Observation maps at the configured retention.
    pub fn retention_maps(&self) -> Result<Vec<ObservationMap>> {
        retention_maps(self.spec.n_agents, self.spec.card_interface, self.spec.rho)
    }

    /// Per-agent one-step latent kernel mixed over `op`, as dense rows.
    fn mixed_kernel(&self, i: usize) -> Vec<Vec<(usize, f64)>> {
        let q = self.op_prob[i];
        (0..self.spec.card_latent)
            .map(|x| {
                let mut acc: BTreeMap<usize, f64> = BTreeMap::new();
                for (op, w) in [(0, 1.0 - q), (1, q)] {
                    let (t, p) = self.row(x, i, op);
                    for (x2, px) in t.iter().zip(p) {
                        *acc.entry(*x2).or_insert(0.0) += w * px;
                    }
                }
                acc.into_iter().collect()
            })
            .collect()
    }

    /// Exact latent decision-epoch model under uniform successor selection.
    ///
    /// With uniform selection the next agent is independent of the latent
    /// state, and a uniform start on the interface ring stays uniform and
    /// independent of `x` because shifts do not depend on `m`. The latent
    /// law at epoch starts is therefore a single distribution `nu_x`, found
    /// by power iteration on the epoch-to-epoch chain with restarts at STOP
    /// and at horizon truncation, and every `(i, m)` cell conditions on it.
    pub fn exact_model(&self) -> SyntheticModel {
        let (n, nx, card, h) = (self.spec.n_agents, self.spec.card_latent, self.spec.card_interface, self.spec.horizon);
        let p = self.spec.p_handoff;
        let g = self.spec.discount;
        let kernels: Vec<_> = (0..n).map(|i| self.mixed_kernel(i)).collect();
        let uniform = vec![1.0 / nx as f64; nx];
        let advance = |i: usize, a: &[f64]| {
            let mut out = vec![0.0; nx];
            for (x, ax) in a.iter().enumerate() {
                if *ax == 0.0 {
                    continue;
                }
                for (x2, px) in &kernels[i][x] {
                    out[*x2] += ax * px;
                }
            }
            out
        };
        // epoch-start law
        let mut nu = uniform.clone();
        for _ in 0..2000 {
            let mut next = vec![0.0; nx];
            for i in 0..n {
                let mut a = nu.clone();
                let mut ended = vec![0.0; nx];
                for _ in 0..h {
                    let moved = advance(i, &a);
                    for x in 0..nx {
                        ended[x] += p * moved[x];
                        a[x] = (1.0 - p) * moved[x];
                    }
                }
                let trunc: f64 = a.iter().sum();
                let end_mass: f64 = ended.iter().sum();
                let restart = end_mass / (n as f64 + 1.0) + trunc;
                for x in 0..nx {
                    next[x] += (ended[x] * n as f64 / (n as f64 + 1.0) + restart / nx as f64) / n as f64;
                }
            }
            let diff: f64 = next.iter().zip(&nu).map(|(a, b)| libm::fabs(a - b)).sum();
            nu = next;
            if diff < 1e-14 {
                break;
            }
        }

        let w = self.spec.structure_weight;
        let mut base = vec![0.0; n * card];
        let mut leave_cost = vec![0.0; n];
        let mut shift_tau = Vec::with_capacity(n);
        let mut truncated = vec![0.0; n];
        for i in 0..n {
            let mut occupancy = vec![0.0; nx];
            let mut dist: BTreeMap<(i64, usize), f64> = BTreeMap::new();
            let mut a = nu.clone();
            let mut disc = 1.0;
            for t in 0..h {
                for x in 0..nx {
                    occupancy[x] += disc * a[x];
                    if a[x] == 0.0 {
                        continue;
                    }
                    for d in &self.shifts[x * n + i] {
                        *dist.entry((*d, t + 1)).or_insert(0.0) += p * a[x] / SHIFTS as f64;
                    }
                }
                leave_cost[i] += disc * p * a.iter().sum::<f64>();
                let moved = advance(i, &a);
                a = moved.into_iter().map(|v| (1.0 - p) * v).collect();
                disc *= g;
            }
            truncated[i] = a.iter().sum();
            let occ_total: f64 = occupancy.iter().sum();
            for m in 0..card {
                let noise: f64 = (0..nx).map(|x| occupancy[x] * self.noise[x * card + m]).sum();
                base[i * card + m] = w * self.competence(m, i) * occ_total + (1.0 - w) * noise;
            }
            shift_tau.push(dist.into_iter().map(|((d, tau), pr)| (d, tau, pr)).collect());
        }
        SyntheticModel {
            n_agents: n,
            card_interface: card,
            horizon: h,
            gamma: g,
            handoff_cost: self.spec.handoff_cost,
            nu_x: nu,
            base,
            leave_cost,
            shift_tau,
            truncated,
        }
    }
}

fn strongly_connected(nx: usize, kernel: &[(Vec<usize>, Vec<f64>)]) -> bool {
    let per_x = kernel.len() / nx;
    let mut fwd = vec![Vec::new(); nx];
    let mut bwd = vec![Vec::new(); nx];
    for (k, (targets, probs)) in kernel.iter().enumerate() {
        let x = k / per_x;
        for (t, p) in targets.iter().zip(probs) {
            if *p > 0.0 {
                fwd[x].push(*t);
                bwd[*t].push(x);
            }
        }
    }
    let reach_all = |adj: &[Vec<usize>]| {
        let mut seen = vec![false; nx];
        let mut stack = vec![0];
        seen[0] = true;
        while let Some(v) = stack.pop() {
            for &w in &adj[v] {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        seen.iter().all(|s| *s)
    };
    reach_all(&fwd) && reach_all(&bwd)
}

impl Environment for SyntheticEnv {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn r_max(&self) -> f64 {
        1.0 + self.spec.handoff_cost
    }

    fn n_local_actions(&self, _agent: usize) -> usize {
        4
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Result<JointState> {
        Ok(JointState {
            latent: rng.gen_range(0..self.spec.card_latent),
            interface: rng.gen_range(0..self.spec.card_interface),
            privates: vec![0; self.spec.n_agents],
            active: rng.gen_range(0..self.spec.n_agents),
            step: 0,
            terminated: false,
        })
    }

    fn admissible_successors(&self, _interface: usize) -> SuccessorSet {
        SuccessorSet::full(self.spec.n_agents)
    }

    fn internal_action(&self, state: &JointState, rng: &mut dyn RngCore) -> usize {
        let op = (rng.gen::<f64>() < self.op_prob[state.active]) as usize;
        let finish = (rng.gen::<f64>() < self.spec.p_handoff) as usize;
        op + 2 * finish
    }

    fn ends_option(&self, _state: &JointState, local: usize) -> bool {
        local >= 2
    }

    fn step(&self, state: &JointState, action: &JointAction, rng: &mut dyn RngCore) -> Result<StepOutcome> {
        let ends = validate_action(self, state, action)?;
        let (x, m, i) = (state.latent, state.interface, state.active);
        let mut reward = self.step_reward(x, m, i);
        let mut next = state.clone();
        if ends {
            if action.successor != Successor::Agent(i) {
                reward -= self.spec.handoff_cost;
            }
            let d = self.shifts[x * self.spec.n_agents + i][rng.gen_range(0..SHIFTS)];
            next.interface = self.shift(m, d);
        }
        let (targets, probs) = self.row(x, i, action.local & 1);
        next.latent = targets[sample_weighted(probs, rng)];
        Ok(settle(&self.config, state, action, ends, next, reward))
    }

    fn observation_maps(&self) -> Vec<ObservationMap> {
        self.retention_maps().expect("spec validated at construction")
    }
}

/// Exact latent decision-epoch model of a [`SyntheticEnv`].
///
/// Kernel rows are shared across interface states: agent `i` produces a
/// shift `d` after `tau` steps with probability `shift_tau[i]`, independent
/// of `m`, and the next interface state is `m + d` on the ring.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SyntheticModel {
    pub n_agents: usize,
    pub card_interface: usize,
    pub horizon: usize,
    pub gamma: f64,
    pub handoff_cost: f64,
    pub nu_x: Vec<f64>,
    /// Expected discounted option reward before the handoff cost, per `(i, m)`.
    pub base: Vec<f64>,
    /// `E[gamma^(tau - 1)]` of the closing step, per agent.
    pub leave_cost: Vec<f64>,
    /// `(shift, tau, prob)` per agent.
    pub shift_tau: Vec<Vec<(i64, usize, f64)>>,
    /// Probability that the horizon cuts the option, per agent.
    pub truncated: Vec<f64>,
}

impl SyntheticModel {
    fn next_state(&self, j: usize, m: usize, d: i64) -> usize {
        j * self.card_interface + (m as i64 + d).rem_euclid(self.card_interface as i64) as usize
    }

    pub fn reward(&self, i: usize, m: usize, slot: usize) -> f64 {
        let leave = if slot == i { 0.0 } else { self.handoff_cost * self.leave_cost[i] };
        self.base[i * self.card_interface + m] - leave
    }

    /// `max E[gamma^tau]`, which is the same for every successor.
    pub fn gamma_bar(&self) -> f64 {
        self.shift_tau
            .iter()
            .zip(&self.truncated)
            .map(|(row, tr)| {
                row.iter().map(|(_, t, p)| p * libm::pow(self.gamma, *t as f64)).sum::<f64>()
                    + tr * libm::pow(self.gamma, self.horizon as f64)
            })
            .fold(0.0, f64::max)
    }

    /// Value iteration exploiting the shared rows; `q` is laid out as for
    /// [`LatentSmdp`]: `(i * |M| + m) * (N + 1) + slot`.
    pub fn solve(&self, tol: f64) -> Result<Solution> {
        let (n, card) = (self.n_agents, self.card_interface);
        let na = n + 1;
        let disc: Vec<Vec<(i64, f64)>> = self
            .shift_tau
            .iter()
            .map(|row| {
                let mut acc: BTreeMap<i64, f64> = BTreeMap::new();
                for (d, t, p) in row {
                    *acc.entry(*d).or_insert(0.0) += p * libm::pow(self.gamma, *t as f64);
                }
                acc.into_iter().collect()
            })
            .collect();
        let mut v = vec![0.0; n * card];
        let mut q = vec![0.0; n * card * na];
        let mut iterations = 0;
        let mut residual = f64::INFINITY;
        while residual > tol {
            iterations += 1;
            if iterations > 100_000 {
                bail!(Estimation, "value iteration did not converge (residual {})", residual);
            }
            for i in 0..n {
                for m in 0..card {
                    for slot in 0..na {
                        let mut val = self.reward(i, m, slot);
                        if slot < n {
                            val += disc[i].iter().map(|(d, w)| w * v[self.next_state(slot, m, *d)]).sum::<f64>();
                        }
                        q[(i * card + m) * na + slot] = val;
                    }
                }
            }
            residual = 0.0;
            for s in 0..n * card {
                let best = q[s * na..(s + 1) * na].iter().copied().fold(f64::NEG_INFINITY, f64::max);
                residual = residual.max(libm::fabs(best - v[s]));
                v[s] = best;
            }
        }
        Ok(Solution { q, v, iterations, residual })
    }

    /// The full sparse latent SMDP; only sensible for small instances.
    pub fn to_latent(&self) -> LatentSmdp {
        let (n, card) = (self.n_agents, self.card_interface);
        let mut lat = LatentSmdp::empty(n, card, self.gamma, self.horizon);
        for i in 0..n {
            for m in 0..card {
                let s = lat.state(i, m);
                lat.smdp.admissible[s] = (0..=n).collect();
                for slot in 0..=n {
                    let k = lat.smdp.idx(s, slot);
                    lat.smdp.reward[k] = self.reward(i, m, slot);
                    let mut row: Vec<Outcome> = self.shift_tau[i]
                        .iter()
                        .map(|(d, tau, p)| Outcome {
                            next: (slot < n).then(|| self.next_state(slot, m, *d)),
                            tau: *tau,
                            prob: *p,
                        })
                        .collect();
                    if self.truncated[i] > 0.0 {
                        row.push(Outcome { next: None, tau: self.horizon, prob: self.truncated[i] });
                    }
                    lat.smdp.kernel[k] = row;
                }
            }
        }
        lat
    }
}

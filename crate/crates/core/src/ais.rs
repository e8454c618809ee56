//! Observation maps and Monte-Carlo estimates of the AIS gap.
//!
//! An observation map `phi_i(m, l)` is the only input an agent's decisions
//! may depend on. The gap estimators compare the latent decision-epoch
//! quantities, conditioned on the interface state, with the same quantities
//! conditioned on the observation only:
//!
//! * `eps_phi`: reward sufficiency, the largest gap between the option reward
//!   given `m` and given `phi(m)`;
//! * `delta_phi`: evolution sufficiency, the largest total-variation distance
//!   between next-`(m', tau)` distributions given `m` and given `phi(m)`;
//! * `gamma_bar`: the largest expected per-epoch discount `E[gamma^tau]`.

use alloc::collections::BTreeMap;
use alloc::format;
use alloc::string::String;
use alloc::sync::Arc;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::epochs::{Behavior, CellStats, EpochSampler, LatentEpoch, LatentTally, NextKey};
use crate::error::{bail, Result};
use crate::smdp::{AgentId, Environment};

type ObsFn = Arc<dyn Fn(usize, usize) -> usize + Send + Sync>;

#[derive(Clone)]
enum ObsRule {
    Identity,
    Modulo { bins: usize },
    Table { card_private: usize, table: Vec<usize> },
    Custom(ObsFn),
}

/// Deterministic map `(interface, private) -> observation` for one agent.
#[derive(Clone)]
pub struct ObservationMap {
    pub agent: AgentId,
    pub card_obs: usize,
    rule: ObsRule,
    label: String,
}

impl core::fmt::Debug for ObservationMap {
    fn fmt(&self, f: &mut core::fmt::Formatter<'_>) -> core::fmt::Result {
        f.debug_struct("ObservationMap")
            .field("agent", &self.agent)
            .field("card_obs", &self.card_obs)
            .field("rule", &self.label)
            .finish()
    }
}

impl ObservationMap {
    pub fn identity(agent: AgentId, card_interface: usize) -> Self {
        Self { agent, card_obs: card_interface, rule: ObsRule::Identity, label: "identity".into() }
    }

    /// `m mod bins`, ignoring the private state.
    pub fn modulo(agent: AgentId, bins: usize) -> Result<Self> {
        if bins == 0 {
            bail!(Domain, "modulo map needs at least one bin");
        }
        Ok(Self { agent, card_obs: bins, rule: ObsRule::Modulo { bins }, label: format!("mod {}", bins) })
    }

    /// Explicit table indexed by `m * card_private + l`.
    pub fn from_table(
        agent: AgentId,
        card_interface: usize,
        card_private: usize,
        table: Vec<usize>,
    ) -> Result<Self> {
        if table.len() != card_interface * card_private {
            bail!(Config, "table has {} entries, expected {}", table.len(), card_interface * card_private);
        }
        let card_obs = table.iter().copied().max().map_or(1, |v| v + 1);
        Ok(Self {
            agent,
            card_obs,
            rule: ObsRule::Table { card_private, table },
            label: "table".into(),
        })
    }

    pub fn custom(
        agent: AgentId,
        card_obs: usize,
        label: impl Into<String>,
        f: impl Fn(usize, usize) -> usize + Send + Sync + 'static,
    ) -> Self {
        Self { agent, card_obs, rule: ObsRule::Custom(Arc::new(f)), label: label.into() }
    }

    /// The same rule assigned to another agent.
    pub fn for_agent(&self, agent: AgentId) -> Self {
        Self { agent, ..self.clone() }
    }

    pub fn set_label(&mut self, label: impl Into<String>) {
        self.label = label.into();
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn is_identity(&self) -> bool {
        matches!(self.rule, ObsRule::Identity)
    }

    /// Whether the rule ignores the private state.
    pub fn ignores_private(&self) -> bool {
        match &self.rule {
            ObsRule::Identity | ObsRule::Modulo { .. } => true,
            ObsRule::Table { card_private, .. } => *card_private == 1,
            ObsRule::Custom(_) => false,
        }
    }

    pub fn observe(&self, interface: usize, private: usize) -> usize {
        let o = match &self.rule {
            ObsRule::Identity => interface,
            ObsRule::Modulo { bins } => interface % bins,
            ObsRule::Table { card_private, table } => table[interface * card_private + private],
            ObsRule::Custom(f) => f(interface, private),
        };
        debug_assert!(o < self.card_obs, "observation {} out of range {}", o, self.card_obs);
        o
    }
}

/// Number of bins kept at retention `rho`: `ceil(rho * card)`.
pub fn retention_bins(card_interface: usize, rho: f64) -> Result<usize> {
    if !(rho > 0.0 && rho <= 1.0) {
        bail!(Domain, "retention ratio must lie in (0, 1], got {}", rho);
    }
    // products such as 0.9 * 50 land a hair above the integer
    let bins = libm::ceil(rho * card_interface as f64 - 1e-9) as usize;
    Ok(bins.clamp(1, card_interface))
}

/// Retention map `m -> m mod ceil(rho * card_interface)` for agent 0.
pub fn make_retention_map(card_interface: usize, rho: f64) -> Result<ObservationMap> {
    let bins = retention_bins(card_interface, rho)?;
    let mut map = ObservationMap::modulo(0, bins)?;
    map.label = format!("retention {} ({} bins)", rho, bins);
    Ok(map)
}

pub fn retention_maps(n_agents: usize, card_interface: usize, rho: f64) -> Result<Vec<ObservationMap>> {
    let map = make_retention_map(card_interface, rho)?;
    Ok((0..n_agents).map(|i| map.for_agent(i)).collect())
}

pub fn identity_maps(n_agents: usize, card_interface: usize) -> Vec<ObservationMap> {
    (0..n_agents).map(|i| ObservationMap::identity(i, card_interface)).collect()
}

/// `(eps + gamma_bar * lipschitz * delta) / (1 - gamma_bar)`.
pub fn alpha_from_gaps(eps: f64, delta: f64, gamma_bar: f64, lipschitz: f64) -> Result<f64> {
    if !(0.0..1.0).contains(&gamma_bar) {
        bail!(Domain, "gamma_bar must lie in [0, 1), got {}", gamma_bar);
    }
    if eps < 0.0 || delta < 0.0 || lipschitz < 0.0 {
        bail!(Domain, "gaps and Lipschitz constant must be non-negative");
    }
    Ok((eps + gamma_bar * lipschitz * delta) / (1.0 - gamma_bar))
}

/// `r_max (1 - gamma^tau_max) / (1 - gamma)`, the bound on an option reward.
pub fn option_reward_bound(r_max: f64, gamma: f64, tau_max: usize) -> f64 {
    r_max * (1.0 - libm::pow(gamma, tau_max as f64)) / (1.0 - gamma)
}

/// Per `(agent, interface, observation, successor)` breakdown.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellGap {
    pub agent: AgentId,
    pub interface: usize,
    pub obs: usize,
    pub successor: usize,
    pub visits: u64,
    pub reward_gap: f64,
    pub tv: f64,
    pub reward_se: f64,
    pub tv_noise: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AisGapEstimate {
    pub eps_phi_hat: f64,
    pub delta_phi_hat: f64,
    pub alpha_hat: f64,
    pub gamma_bar_hat: f64,
    pub lipschitz: f64,
    /// Visit-weighted means of the per-cell reward gap and TV, i.e. the
    /// gaps averaged under the behavior occupancy instead of maximized.
    pub eps_phi_mean: f64,
    pub delta_phi_mean: f64,
    /// [`alpha_from_gaps`] on the weighted means.
    pub alpha_mean: f64,
    pub n_samples: u64,
    /// Largest standard error among the cells entering `eps_phi_hat`.
    pub eps_se: f64,
    /// Largest expected sampling-noise TV among the cells entering
    /// `delta_phi_hat`, `0.5 * sqrt(support / visits)`.
    pub delta_noise: f64,
    pub min_visits: u64,
    pub cells_used: usize,
    pub cells_excluded: usize,
    /// Both gap estimates are maxima over visited cells, hence lower bounds
    /// on the suprema.
    pub lower_bound: bool,
    pub cells: Vec<CellGap>,
}

/// Mergeable tabulation of latent epochs.
#[derive(Clone, Debug, Default)]
pub struct AisTally {
    latent: LatentTally,
    /// `(agent, obs, successor) -> interface -> count`
    blend: BTreeMap<(AgentId, usize, usize), BTreeMap<usize, u64>>,
}

impl AisTally {
    pub fn new(n_agents: usize, gamma: f64) -> Self {
        Self { latent: LatentTally::new(n_agents, gamma), blend: BTreeMap::new() }
    }

    pub fn record(&mut self, e: &LatentEpoch) {
        self.latent.record(e);
        let s = e.successor.slot(self.latent.n_agents);
        *self.blend.entry((e.agent, e.obs, s)).or_default().entry(e.interface).or_insert(0) += 1;
    }

    pub fn merge(&mut self, other: &AisTally) {
        self.latent.merge(&other.latent);
        for (k, m) in &other.blend {
            let dst = self.blend.entry(*k).or_default();
            for (mi, c) in m {
                *dst.entry(*mi).or_insert(0) += c;
            }
        }
    }

    pub fn latent(&self) -> &LatentTally {
        &self.latent
    }

    pub fn n_samples(&self) -> u64 {
        self.latent.n_samples
    }

    /// Reduce to gap estimates. `lipschitz = None` uses the coarse bound
    /// `R_max / (1 - gamma_bar)`.
    pub fn finish(
        &self,
        min_visits: u64,
        lipschitz: Option<f64>,
        r_max: f64,
        tau_max: usize,
    ) -> Result<AisGapEstimate> {
        let mut eps = 0.0f64;
        let mut delta = 0.0f64;
        let mut gamma_bar = 0.0f64;
        let mut eps_se = 0.0f64;
        let mut delta_noise = 0.0f64;
        let mut cells = Vec::new();
        let mut excluded = 0usize;
        let mut used = 0usize;

        for c in self.latent.cells.values() {
            if c.n >= min_visits {
                gamma_bar = gamma_bar.max(c.mean_discount());
            }
        }

        for (&(agent, obs, succ), members) in &self.blend {
            let kept: Vec<(usize, u64, &CellStats)> = members
                .iter()
                .filter_map(|(&m, &w)| {
                    let c = &self.latent.cells[&(agent, m, succ)];
                    (c.n >= min_visits).then_some((m, w, c))
                })
                .collect();
            excluded += members.len() - kept.len();
            if kept.is_empty() {
                continue;
            }
            let total: f64 = kept.iter().map(|k| k.1 as f64).sum();
            let r_hat: f64 = kept.iter().map(|(_, w, c)| *w as f64 / total * c.mean()).sum();
            let mut p_hat: BTreeMap<(NextKey, usize), f64> = BTreeMap::new();
            for (_, w, c) in &kept {
                let wn = *w as f64 / total;
                for (k, cnt) in &c.outcomes {
                    *p_hat.entry(*k).or_insert(0.0) += wn * *cnt as f64 / c.n as f64;
                }
            }
            for (m, w, c) in &kept {
                let reward_gap = libm::fabs(c.mean() - r_hat);
                let mut l1 = 0.0;
                for (k, ph) in &p_hat {
                    l1 += libm::fabs(c.prob(k) - ph);
                }
                let tv = (0.5 * l1).min(1.0);
                let reward_se = if kept.len() == 1 { 0.0 } else { c.se() };
                let tv_noise = if kept.len() == 1 {
                    0.0
                } else {
                    0.5 * libm::sqrt(c.outcomes.len() as f64 / c.n as f64)
                };
                eps = eps.max(reward_gap);
                delta = delta.max(tv);
                eps_se = eps_se.max(reward_se);
                delta_noise = delta_noise.max(tv_noise);
                used += 1;
                cells.push(CellGap {
                    agent,
                    interface: *m,
                    obs,
                    successor: succ,
                    visits: *w,
                    reward_gap,
                    tv,
                    reward_se,
                    tv_noise,
                });
            }
        }
        if used == 0 {
            bail!(Estimation, "no cell reached {} visits out of {} samples", min_visits, self.n_samples());
        }
        let gamma_bar = gamma_bar.min(1.0 - 1e-12);
        let lipschitz = lipschitz.unwrap_or_else(|| {
            option_reward_bound(r_max, self.latent.gamma, tau_max) / (1.0 - gamma_bar)
        });
        let alpha_hat = alpha_from_gaps(eps, delta, gamma_bar, lipschitz)?;
        let visits: f64 = cells.iter().map(|c| c.visits as f64).sum();
        let mean_of = |f: &dyn Fn(&CellGap) -> f64| cells.iter().map(|c| c.visits as f64 * f(c)).sum::<f64>() / visits;
        let eps_mean = mean_of(&|c| c.reward_gap);
        let delta_mean = mean_of(&|c| c.tv);
        Ok(AisGapEstimate {
            eps_phi_hat: eps,
            delta_phi_hat: delta,
            alpha_hat,
            gamma_bar_hat: gamma_bar,
            lipschitz,
            eps_phi_mean: eps_mean,
            delta_phi_mean: delta_mean,
            alpha_mean: alpha_from_gaps(eps_mean, delta_mean, gamma_bar, lipschitz)?,
            n_samples: self.n_samples(),
            eps_se,
            delta_noise,
            min_visits,
            cells_used: used,
            cells_excluded: excluded,
            lower_bound: true,
            cells,
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapOptions {
    pub n_epochs: usize,
    pub min_visits: u64,
    pub lipschitz: Option<f64>,
}

impl Default for GapOptions {
    fn default() -> Self {
        Self { n_epochs: 100_000, min_visits: 20, lipschitz: None }
    }
}

/// Monte-Carlo AIS gap of `maps` on `env` under `behavior`.
pub fn estimate_ais_gap(
    env: &dyn Environment,
    maps: &[ObservationMap],
    behavior: Behavior<'_>,
    opts: &GapOptions,
    rng: &mut dyn RngCore,
) -> Result<AisGapEstimate> {
    if opts.n_epochs == 0 {
        bail!(Usage, "n_epochs must be at least 1");
    }
    let tally = tally_epochs(env, maps, behavior, opts.n_epochs, rng)?;
    let cfg = env.config();
    tally.finish(opts.min_visits, opts.lipschitz, env.r_max(), cfg.horizon)
}

pub fn tally_epochs(
    env: &dyn Environment,
    maps: &[ObservationMap],
    behavior: Behavior<'_>,
    n_epochs: usize,
    rng: &mut dyn RngCore,
) -> Result<AisTally> {
    let cfg = env.config();
    let mut sampler = EpochSampler::new(env, maps, rng)?;
    let mut tally = AisTally::new(cfg.n_agents, cfg.discount);
    for _ in 0..n_epochs {
        let e = sampler.next_epoch(behavior, rng)?;
        tally.record(&e);
    }
    Ok(tally)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn retention_bins_match_ceiling() {
        assert_eq!(retention_bins(50, 1.0).unwrap(), 50);
        assert_eq!(retention_bins(50, 0.9).unwrap(), 45);
        assert_eq!(retention_bins(50, 0.05).unwrap(), 3);
        assert_eq!(retention_bins(50, 0.1).unwrap(), 5);
        assert_eq!(retention_bins(50, 0.3).unwrap(), 15);
        assert!(retention_bins(50, 0.0).is_err());
        assert!(retention_bins(50, 1.5).is_err());
        assert!(retention_bins(50, -0.2).is_err());
    }

    #[test]
    fn retention_map_at_full_rho_is_identity() {
        let map = make_retention_map(50, 1.0).unwrap();
        assert_eq!(map.card_obs, 50);
        for m in 0..50 {
            assert_eq!(map.observe(m, 0), m);
        }
        let map = make_retention_map(50, 0.9).unwrap();
        assert_eq!(map.observe(47, 0), 2);
        assert_eq!(map.observe(47, 3), 2);
    }

    #[test]
    fn alpha_formula() {
        assert_eq!(alpha_from_gaps(0.0, 0.0, 0.5, 3.0).unwrap(), 0.0);
        assert!((alpha_from_gaps(0.1, 0.0, 0.5, 3.0).unwrap() - 0.2).abs() < 1e-15);
        assert!((alpha_from_gaps(0.1, 0.2, 0.5, 1.0).unwrap() - 0.4).abs() < 1e-15);
        assert!(alpha_from_gaps(0.1, 0.2, 1.0, 1.0).is_err());
        assert!(alpha_from_gaps(-0.1, 0.2, 0.5, 1.0).is_err());
    }

    #[test]
    fn table_map_validates_size() {
        assert!(ObservationMap::from_table(0, 3, 2, alloc::vec![0; 5]).is_err());
        let m = ObservationMap::from_table(0, 2, 2, alloc::vec![0, 1, 1, 2]).unwrap();
        assert_eq!(m.card_obs, 3);
        assert_eq!(m.observe(1, 1), 2);
    }
}

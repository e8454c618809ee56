//! Joint-state types and the environment contract.
//!
//! A joint state has three layers: a latent state no agent observes, the
//! interface state passed between agents, and one private state per agent.
//! Exactly one agent is active at a time. Environments implement
//! [`Environment`]; learners only ever touch a running episode through
//! [`Episode`], which exposes the active agent's own observation and nothing
//! else.

use alloc::collections::BTreeMap;
use alloc::string::String;
use alloc::vec::Vec;

use rand::RngCore;
use serde::{Deserialize, Serialize};

use crate::ais::ObservationMap;
use crate::error::{bail, Result};

pub type AgentId = usize;

/// A successor choice: another agent (or the active agent itself) or STOP.
///
/// The derived order puts every agent before `Stop`, which is the tie-break
/// order used by all argmaxes.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Successor {
    Agent(AgentId),
    Stop,
}

impl Successor {
    /// Dense index in `0..=n_agents`; STOP takes the last slot.
    pub fn slot(self, n_agents: usize) -> usize {
        match self {
            Successor::Agent(i) => i,
            Successor::Stop => n_agents,
        }
    }

    pub fn from_slot(slot: usize, n_agents: usize) -> Self {
        if slot >= n_agents {
            Successor::Stop
        } else {
            Successor::Agent(slot)
        }
    }

    pub fn agent(self) -> Option<AgentId> {
        match self {
            Successor::Agent(i) => Some(i),
            Successor::Stop => None,
        }
    }
}

/// Sorted, duplicate-free, non-empty set of successors.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SuccessorSet(Vec<Successor>);

impl SuccessorSet {
    pub fn new(items: impl IntoIterator<Item = Successor>) -> Self {
        let mut v: Vec<Successor> = items.into_iter().collect();
        v.sort();
        v.dedup();
        assert!(!v.is_empty(), "admissible successor set must be non-empty");
        Self(v)
    }

    /// Every agent plus STOP.
    pub fn full(n_agents: usize) -> Self {
        Self::new((0..n_agents).map(Successor::Agent).chain(core::iter::once(Successor::Stop)))
    }

    pub fn contains(&self, s: Successor) -> bool {
        self.0.binary_search(&s).is_ok()
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = Successor> + '_ {
        self.0.iter().copied()
    }

    pub fn as_slice(&self) -> &[Successor] {
        &self.0
    }

    pub fn slots(&self, n_agents: usize) -> impl Iterator<Item = usize> + '_ {
        self.0.iter().map(move |s| s.slot(n_agents))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnvConfig {
    pub n_agents: usize,
    pub card_latent: usize,
    pub card_interface: usize,
    /// Primitive steps per episode.
    pub horizon: usize,
    pub discount: f64,
    pub seed: u64,
    /// Environment-specific parameters, kept for provenance.
    #[serde(default)]
    pub params: BTreeMap<String, String>,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_agents == 0 {
            bail!(Config, "n_agents must be at least 1");
        }
        if self.card_latent == 0 || self.card_interface == 0 {
            bail!(Config, "state-space cardinalities must be at least 1");
        }
        if self.horizon == 0 {
            bail!(Config, "horizon must be at least 1");
        }
        if !(self.discount > 0.0 && self.discount < 1.0) {
            bail!(Config, "discount must lie in (0, 1), got {}", self.discount);
        }
        Ok(())
    }

    pub fn n_successors(&self) -> usize {
        self.n_agents + 1
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct JointState {
    pub latent: usize,
    pub interface: usize,
    pub privates: Vec<usize>,
    pub active: AgentId,
    pub step: usize,
    pub terminated: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct JointAction {
    pub local: usize,
    pub successor: Successor,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepOutcome {
    pub reward: f64,
    pub next: JointState,
    /// The successor differs from the agent that acted.
    pub handoff: bool,
    /// The active agent's invocation ended on this step, so the next step
    /// starts a new decision epoch.
    pub option_end: bool,
    pub terminated: bool,
}

/// The primitive-step dynamics of an IC-SMDP.
///
/// Invocations are options: the environment decides through
/// [`Environment::ends_option`] whether a local action closes the active
/// agent's invocation. On a closing step the action's successor takes over
/// (possibly the same agent, possibly STOP); on any other step the action
/// must name the active agent, which keeps control.
pub trait Environment: Send + Sync {
    fn config(&self) -> &EnvConfig;

    /// Declared bound on `|r_t|`.
    fn r_max(&self) -> f64;

    fn card_private(&self, _agent: AgentId) -> usize {
        1
    }

    fn n_local_actions(&self, _agent: AgentId) -> usize {
        1
    }

    /// Sample an initial joint state.
    fn reset(&self, rng: &mut dyn RngCore) -> Result<JointState>;

    /// Admissible successors; a function of the interface state alone.
    fn admissible_successors(&self, interface: usize) -> SuccessorSet;

    /// Local action of a pre-configured agent's fixed internal policy.
    fn internal_action(&self, _state: &JointState, _rng: &mut dyn RngCore) -> usize {
        0
    }

    fn ends_option(&self, _state: &JointState, _local: usize) -> bool {
        true
    }

    /// State after the local action resolves but before control moves.
    fn post_action(&self, state: &JointState, _local: usize) -> JointState {
        state.clone()
    }

    fn step(
        &self,
        state: &JointState,
        action: &JointAction,
        rng: &mut dyn RngCore,
    ) -> Result<StepOutcome>;

    /// Default per-agent observation maps.
    fn observation_maps(&self) -> Vec<ObservationMap>;
}

/// Checks shared by every environment's `step`.
pub fn validate_action<E: Environment + ?Sized>(
    env: &E,
    state: &JointState,
    action: &JointAction,
) -> Result<bool> {
    if state.terminated {
        bail!(Usage, "cannot step a terminated state");
    }
    let n = env.config().n_agents;
    if action.local >= env.n_local_actions(state.active) {
        bail!(Domain, "local action {} out of range for agent {}", action.local, state.active);
    }
    let ends = env.ends_option(state, action.local);
    if ends {
        if !env.admissible_successors(state.interface).contains(action.successor) {
            bail!(Domain, "successor {:?} not admissible at interface {}", action.successor, state.interface);
        }
        if let Successor::Agent(j) = action.successor {
            if j >= n {
                bail!(Domain, "successor agent {} out of range", j);
            }
        }
    } else if action.successor != Successor::Agent(state.active) {
        bail!(Usage, "successor {:?} given on a step that does not end the invocation", action.successor);
    }
    Ok(ends)
}

/// Fill in the bookkeeping fields of a step outcome.
///
/// `next` carries the environment-specific updates of latent, interface and
/// private state; this sets the active agent, step counter and termination.
pub fn settle(
    config: &EnvConfig,
    prev: &JointState,
    action: &JointAction,
    option_end: bool,
    mut next: JointState,
    reward: f64,
) -> StepOutcome {
    next.step = prev.step + 1;
    let stop = option_end && action.successor == Successor::Stop;
    next.active = match (option_end, action.successor) {
        (true, Successor::Agent(j)) => j,
        _ => prev.active,
    };
    let terminated = stop || next.step >= config.horizon;
    next.terminated = terminated;
    StepOutcome {
        reward,
        handoff: option_end && action.successor != Successor::Agent(prev.active),
        option_end,
        terminated,
        next,
    }
}

/// Counts of state reads made on behalf of learner code.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AccessAudit {
    pub interface_reads: u64,
    pub own_private_reads: u64,
    pub foreign_private_reads: u64,
    pub latent_reads: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepView {
    pub reward: f64,
    pub handoff: bool,
    pub option_end: bool,
    pub terminated: bool,
}

/// A running episode seen from the learner's side of the interface.
///
/// The joint state is held privately. Observations are produced by applying
/// the active agent's map to the interface state and that agent's own
/// private state; every such read is counted in [`AccessAudit`]. There is no
/// accessor for the latent state or for another agent's private state.
pub struct Episode<'a> {
    env: &'a dyn Environment,
    maps: &'a [ObservationMap],
    state: JointState,
    audit: AccessAudit,
}

impl<'a> Episode<'a> {
    pub fn begin(
        env: &'a dyn Environment,
        maps: &'a [ObservationMap],
        rng: &mut dyn RngCore,
    ) -> Result<Self> {
        if maps.len() != env.config().n_agents {
            bail!(Config, "expected {} observation maps, got {}", env.config().n_agents, maps.len());
        }
        let state = env.reset(rng)?;
        Self::begin_at(env, maps, state)
    }

    /// Start from a given joint state, e.g. an enumerated evaluation start.
    pub fn begin_at(env: &'a dyn Environment, maps: &'a [ObservationMap], state: JointState) -> Result<Self> {
        if maps.len() != env.config().n_agents {
            bail!(Config, "expected {} observation maps, got {}", env.config().n_agents, maps.len());
        }
        Ok(Self { env, maps, state, audit: AccessAudit::default() })
    }

    pub fn env(&self) -> &'a dyn Environment {
        self.env
    }

    pub fn active(&self) -> AgentId {
        self.state.active
    }

    pub fn live(&self) -> bool {
        !self.state.terminated
    }

    pub fn step_index(&self) -> usize {
        self.state.step
    }

    fn read_interface(&mut self, s: &JointState) -> usize {
        self.audit.interface_reads += 1;
        s.interface
    }

    fn read_private(&mut self, s: &JointState, agent: AgentId) -> usize {
        if agent == self.state.active {
            self.audit.own_private_reads += 1;
        } else {
            self.audit.foreign_private_reads += 1;
        }
        s.privates[agent]
    }

    fn observe_state(&mut self, s: &JointState) -> usize {
        let agent = self.state.active;
        let m = self.read_interface(s);
        let l = self.read_private(s, agent);
        self.maps[agent].observe(m, l)
    }

    /// Observation of the active agent.
    pub fn observe(&mut self) -> usize {
        let s = self.state.clone();
        self.observe_state(&s)
    }

    /// Observation of the active agent once `local` has resolved.
    pub fn observe_after(&mut self, local: usize) -> usize {
        let post = self.env.post_action(&self.state, local);
        self.observe_state(&post)
    }

    pub fn admissible(&mut self) -> SuccessorSet {
        let s = self.state.clone();
        let m = self.read_interface(&s);
        self.env.admissible_successors(m)
    }

    pub fn admissible_after(&mut self, local: usize) -> SuccessorSet {
        let post = self.env.post_action(&self.state, local);
        let m = self.read_interface(&post);
        self.env.admissible_successors(m)
    }

    /// Local action drawn by the environment-side internal policy.
    pub fn internal_action(&self, rng: &mut dyn RngCore) -> usize {
        self.env.internal_action(&self.state, rng)
    }

    pub fn ends_option(&self, local: usize) -> bool {
        self.env.ends_option(&self.state, local)
    }

    pub fn n_local_actions(&self) -> usize {
        self.env.n_local_actions(self.state.active)
    }

    pub fn step(
        &mut self,
        local: usize,
        successor: Successor,
        rng: &mut dyn RngCore,
    ) -> Result<StepView> {
        let out = self.env.step(&self.state, &JointAction { local, successor }, rng)?;
        self.state = out.next;
        Ok(StepView {
            reward: out.reward,
            handoff: out.handoff,
            option_end: out.option_end,
            terminated: out.terminated,
        })
    }

    pub fn audit(&self) -> AccessAudit {
        self.audit
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn successor_order_puts_stop_last() {
        let set = SuccessorSet::new([Successor::Stop, Successor::Agent(2), Successor::Agent(0)]);
        assert_eq!(set.as_slice(), &[Successor::Agent(0), Successor::Agent(2), Successor::Stop]);
        assert_eq!(Successor::Stop.slot(3), 3);
        assert_eq!(Successor::from_slot(3, 3), Successor::Stop);
        assert_eq!(Successor::from_slot(1, 3), Successor::Agent(1));
    }

    #[test]
    fn config_validation() {
        let mut c = EnvConfig {
            n_agents: 2,
            card_latent: 1,
            card_interface: 3,
            horizon: 10,
            discount: 0.9,
            seed: 0,
            params: BTreeMap::new(),
        };
        assert!(c.validate().is_ok());
        c.discount = 1.0;
        assert!(c.validate().is_err());
        c.discount = 0.9;
        c.card_interface = 0;
        assert!(c.validate().is_err());
        c.card_interface = 3;
        c.n_agents = 0;
        assert!(c.validate().is_err());
    }
}

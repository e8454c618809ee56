//! Packet routing with one agent per graph node.
//!
//! The interface state is `(location, destination, detain)` packed as
//! `(location * n + destination) * 2 + detain`. The node holding the packet
//! is the active agent; it forwards to a neighbour, keeps the packet (which
//! sets the detain flag), or delivers with STOP once the packet sits at its
//! destination. Each agent observes `(destination, detain)`, which together
//! with its own identity pins down the interface state.

use alloc::collections::BTreeMap;
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use super::graph::{generate, Graph, GraphFamily};
use crate::ais::ObservationMap;
use crate::error::{bail, Result};
use crate::rng::{substream, Stream};
use crate::smdp::{settle, validate_action, EnvConfig, Environment, JointAction, JointState, StepOutcome, Successor, SuccessorSet};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoutingSpec {
    pub n_agents: usize,
    pub family: GraphFamily,
    pub seed: u64,
    pub step_cost: f64,
    pub delivery_reward: f64,
    pub discount: f64,
    /// `None` uses `2 n + 10`.
    pub horizon: Option<usize>,
}

impl Default for RoutingSpec {
    fn default() -> Self {
        Self {
            n_agents: 100,
            family: GraphFamily::ErdosRenyi { p: None },
            seed: 0,
            step_cost: 0.01,
            delivery_reward: 1.0,
            discount: 0.99,
            horizon: None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RoutingEnv {
    config: EnvConfig,
    pub spec: RoutingSpec,
    pub graph: Graph,
    /// Optional fixed `(source, destination)` for every episode.
    pub fixed_pair: Option<(usize, usize)>,
}

impl RoutingEnv {
    pub fn new(spec: &RoutingSpec) -> Result<Self> {
        let mut rng = substream(spec.seed, Stream::Construction, 0);
        let graph = generate(spec.family, spec.n_agents, &mut rng)?;
        Self::with_graph(spec, graph)
    }

    pub fn with_graph(spec: &RoutingSpec, graph: Graph) -> Result<Self> {
        let n = spec.n_agents;
        if graph.n() != n {
            bail!(Config, "graph has {} nodes, spec asks for {}", graph.n(), n);
        }
        if !graph.is_connected() {
            bail!(Config, "routing graph must be connected");
        }
        if spec.step_cost < 0.0 || spec.delivery_reward <= 0.0 {
            bail!(Config, "step cost must be non-negative and delivery reward positive");
        }
        let mut params = BTreeMap::new();
        params.insert("family".to_string(), spec.family.name().to_string());
        params.insert("step_cost".to_string(), spec.step_cost.to_string());
        let config = EnvConfig {
            n_agents: n,
            card_latent: 1,
            card_interface: 2 * n * n,
            horizon: spec.horizon.unwrap_or(2 * n + 10),
            discount: spec.discount,
            seed: spec.seed,
            params,
        };
        config.validate()?;
        Ok(Self { config, spec: spec.clone(), graph, fixed_pair: None })
    }

    pub fn encode(&self, loc: usize, dest: usize, detain: bool) -> usize {
        (loc * self.spec.n_agents + dest) * 2 + detain as usize
    }

    /// `(location, destination, detain)`.
    pub fn decode(&self, m: usize) -> (usize, usize, bool) {
        let n = self.spec.n_agents;
        let (rest, detain) = (m / 2, m % 2 == 1);
        (rest / n, rest % n, detain)
    }

    pub fn start_state(&self, source: usize, dest: usize) -> JointState {
        JointState {
            latent: 0,
            interface: self.encode(source, dest, false),
            privates: vec![0; self.spec.n_agents],
            active: source,
            step: 0,
            terminated: false,
        }
    }

    /// Every ordered `(source, destination)` pair with distinct ends.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        let n = self.spec.n_agents;
        (0..n).flat_map(|s| (0..n).filter(move |&d| d != s).map(move |d| (s, d))).collect()
    }

    /// Optimal undiscounted return of a shortest delivery over `hops` hops.
    pub fn shortest_return(&self, hops: usize) -> f64 {
        self.spec.delivery_reward - hops as f64 * self.spec.step_cost
    }
}

impl Environment for RoutingEnv {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn r_max(&self) -> f64 {
        self.spec.delivery_reward.max(self.spec.step_cost)
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Result<JointState> {
        let (s, d) = match self.fixed_pair {
            Some(p) => p,
            None => {
                let n = self.spec.n_agents;
                let s = rng.gen_range(0..n);
                let d = (s + rng.gen_range(1..n)) % n;
                (s, d)
            }
        };
        Ok(self.start_state(s, d))
    }

    fn admissible_successors(&self, interface: usize) -> SuccessorSet {
        let (loc, dest, _) = self.decode(interface);
        let mut items: Vec<Successor> = self.graph.adj[loc].iter().map(|&v| Successor::Agent(v)).collect();
        items.push(Successor::Agent(loc));
        if loc == dest {
            items.push(Successor::Stop);
        }
        SuccessorSet::new(items)
    }

    fn step(&self, state: &JointState, action: &JointAction, _rng: &mut dyn RngCore) -> Result<StepOutcome> {
        validate_action(self, state, action)?;
        let (loc, dest, _) = self.decode(state.interface);
        let mut next = state.clone();
        let reward = match action.successor {
            Successor::Stop => self.spec.delivery_reward,
            Successor::Agent(j) => {
                next.interface = self.encode(j, dest, j == loc);
                -self.spec.step_cost
            }
        };
        Ok(settle(&self.config, state, action, true, next, reward))
    }

    fn observation_maps(&self) -> Vec<ObservationMap> {
        let bins = 2 * self.spec.n_agents;
        (0..self.spec.n_agents)
            .map(|i| {
                let mut m = ObservationMap::modulo(i, bins).expect("positive bin count");
                m.set_label("(destination, detain)");
                m
            })
            .collect()
    }
}

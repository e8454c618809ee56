//! IC-Q: decentralized option-level Q-learning with scalar value passing.
//!
//! Every agent owns a successor-selection estimator `Q^beta_i(o, c')` over
//! its own observations, and in the adaptable regime a local-action
//! estimator `Q^alpha_i(o, a)`. A decision epoch opens when an agent becomes
//! active: it observes, commits to a successor epsilon-greedily, and runs its
//! option until the environment closes it. The successor then computes a
//! bootstrap from its own estimator at its own observation and returns
//! `(b, tau, R)` to the predecessor, which regresses `Q^beta_i(o, c')` onto
//! `R + gamma^tau b`. Those three numbers are the only values that cross an
//! agent boundary.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::ais::ObservationMap;
use crate::error::{bail, Result};
use crate::rng::{substream, Stream, Streams};
use crate::smdp::{AccessAudit, AgentId, Environment, Episode, JointState, Successor, SuccessorSet};

/// `1 / (2 nu lambda0 (k + 1))`.
pub fn theorem_step_size(k: u64, nu: f64, lambda0: f64) -> Result<f64> {
    if !(nu > 0.0 && nu < 1.0) {
        bail!(Domain, "nu must lie in (0, 1), got {}", nu);
    }
    if lambda0 <= 0.0 {
        bail!(Domain, "lambda0 must be positive, got {}", lambda0);
    }
    Ok(1.0 / (2.0 * nu * lambda0 * (k as f64 + 1.0)))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StepSchedule {
    /// `1 / (2 nu lambda0 (k + 1))` in the agent's update count `k`.
    Theorem { nu: f64, lambda0: f64 },
    Constant { eta: f64 },
    /// `eta0 / (1 + k / k0)`.
    Decaying { eta0: f64, k0: f64 },
    /// `scale / (n + 1)^power` in the visit count `n` of the updated cell
    /// (tabular) or the agent's update count (MLP).
    VisitCount { scale: f64, power: f64 },
}

impl Default for StepSchedule {
    fn default() -> Self {
        StepSchedule::Decaying { eta0: 0.5, k0: 1000.0 }
    }
}

impl StepSchedule {
    pub fn validate(&self) -> Result<()> {
        let ok = match *self {
            StepSchedule::Theorem { nu, lambda0 } => nu > 0.0 && nu < 1.0 && lambda0 > 0.0,
            StepSchedule::Constant { eta } => eta > 0.0,
            StepSchedule::Decaying { eta0, k0 } => eta0 > 0.0 && k0 > 0.0,
            StepSchedule::VisitCount { scale, power } => scale > 0.0 && power > 0.0,
        };
        if !ok {
            bail!(Config, "invalid step-size schedule {:?}", self);
        }
        Ok(())
    }

    pub fn step(&self, agent_updates: u64, cell_visits: u64) -> f64 {
        match *self {
            StepSchedule::Theorem { nu, lambda0 } => 1.0 / (2.0 * nu * lambda0 * (agent_updates as f64 + 1.0)),
            StepSchedule::Constant { eta } => eta,
            StepSchedule::Decaying { eta0, k0 } => eta0 / (1.0 + agent_updates as f64 / k0),
            StepSchedule::VisitCount { scale, power } => scale / libm::pow(cell_visits as f64 + 1.0, power),
        }
    }
}

/// `max(floor, initial * decay^episode)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub initial: f64,
    pub floor: f64,
    pub decay: f64,
}

impl EpsilonSchedule {
    /// Reaches `floor` halfway through a budget of `episodes`.
    pub fn for_budget(initial: f64, floor: f64, episodes: u64) -> Self {
        let half = (episodes / 2).max(1) as f64;
        let decay = if floor > 0.0 && initial > floor { libm::pow(floor / initial, 1.0 / half) } else { 1.0 };
        Self { initial, floor, decay }
    }

    pub fn constant(eps: f64) -> Self {
        Self { initial: eps, floor: eps, decay: 1.0 }
    }

    pub fn at(&self, episode: u64) -> f64 {
        (self.initial * libm::pow(self.decay, episode as f64)).max(self.floor).clamp(0.0, 1.0)
    }

    pub fn validate(&self) -> Result<()> {
        let unit = |x: f64| (0.0..=1.0).contains(&x);
        if !unit(self.initial) || !unit(self.floor) || !(self.decay > 0.0 && self.decay <= 1.0) {
            bail!(Config, "invalid epsilon schedule {:?}", self);
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Backend {
    Tabular,
    /// Three linear layers with rectifiers on a one-hot observation input.
    Mlp { hidden: usize, clip: f64 },
}

/// Which successor value feeds `Q^beta` in the adaptable regime.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Coupling {
    /// `b = max_a Q^alpha_{c'}(o', a)`.
    AlphaBootstrap,
    /// `b = max_c'' Q^beta_{c'}(o', c'')`.
    BetaBootstrap,
}

/// Treatment of an option that ends on the last step of the horizon while
/// handing control to a live agent.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Truncation {
    /// Bootstrap zero, as for STOP.
    ZeroBootstrap,
    /// Drop the epoch.
    Censor,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LearnerConfig {
    pub epsilon: EpsilonSchedule,
    pub step: StepSchedule,
    pub backend: Backend,
    pub adaptable: bool,
    pub coupling: Coupling,
    pub truncation: Truncation,
    /// Initial tabular values are drawn uniformly from
    /// `[init_center - init, init_center + init]`.
    pub init: f64,
    #[serde(default)]
    pub init_center: f64,
    pub seed: u64,
}

impl Default for LearnerConfig {
    fn default() -> Self {
        Self {
            epsilon: EpsilonSchedule::for_budget(1.0, 0.05, 3300),
            step: StepSchedule::default(),
            backend: Backend::Tabular,
            adaptable: false,
            coupling: Coupling::AlphaBootstrap,
            truncation: Truncation::ZeroBootstrap,
            init: 0.0,
            init_center: 0.0,
            seed: 0,
        }
    }
}

impl LearnerConfig {
    pub fn validate(&self) -> Result<()> {
        self.epsilon.validate()?;
        self.step.validate()?;
        if let Backend::Mlp { hidden, clip } = self.backend {
            if hidden == 0 || clip <= 0.0 {
                bail!(Config, "MLP needs hidden width >= 1 and a positive clip bound");
            }
        }
        if self.init < 0.0 || !self.init.is_finite() || !self.init_center.is_finite() {
            bail!(Config, "init must be a finite non-negative half-width");
        }
        Ok(())
    }
}

/// Dense three-layer perceptron on one-hot inputs.
///
/// Parameters are stored flat as `[W1, b1, W2, b2, W3, b3]` with
/// `W1: hidden x n_in`, `W2: hidden x hidden`, `W3: n_out x hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Mlp {
    pub n_in: usize,
    pub hidden: usize,
    pub n_out: usize,
    pub clip: f64,
    pub params: Vec<f64>,
}

struct Forward {
    z1: Vec<f64>,
    a1: Vec<f64>,
    z2: Vec<f64>,
    a2: Vec<f64>,
    out: Vec<f64>,
}

impl Mlp {
    pub fn new(n_in: usize, hidden: usize, n_out: usize, clip: f64, rng: &mut dyn RngCore) -> Self {
        let len = hidden * n_in + hidden + hidden * hidden + hidden + n_out * hidden + n_out;
        let mut params = vec![0.0; len];
        let mut mlp = Self { n_in, hidden, n_out, clip, params: Vec::new() };
        let (w1, _, w2, _, w3, _) = mlp.offsets();
        let mut fill = |start: usize, count: usize, fan_in: usize| {
            let bound = 1.0 / libm::sqrt(fan_in as f64);
            for p in &mut params[start..start + count] {
                *p = rng.gen_range(-bound..bound);
            }
        };
        fill(w1, hidden * n_in, n_in);
        fill(w2, hidden * hidden, hidden);
        fill(w3, n_out * hidden, hidden);
        mlp.params = params;
        mlp
    }

    fn offsets(&self) -> (usize, usize, usize, usize, usize, usize) {
        let (h, i, o) = (self.hidden, self.n_in, self.n_out);
        let w1 = 0;
        let b1 = w1 + h * i;
        let w2 = b1 + h;
        let b2 = w2 + h * h;
        let w3 = b2 + h;
        let b3 = w3 + o * h;
        (w1, b1, w2, b2, w3, b3)
    }

    fn forward(&self, obs: usize) -> Forward {
        let (h, n_in, n_out) = (self.hidden, self.n_in, self.n_out);
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        let z1: Vec<f64> = (0..h).map(|r| p[w1 + r * n_in + obs] + p[b1 + r]).collect();
        let a1: Vec<f64> = z1.iter().map(|z| z.max(0.0)).collect();
        let z2: Vec<f64> = (0..h)
            .map(|r| {
                let row = &p[w2 + r * h..w2 + (r + 1) * h];
                row.iter().zip(&a1).map(|(w, a)| w * a).sum::<f64>() + p[b2 + r]
            })
            .collect();
        let a2: Vec<f64> = z2.iter().map(|z| z.max(0.0)).collect();
        let out = (0..n_out)
            .map(|r| {
                let row = &p[w3 + r * h..w3 + (r + 1) * h];
                row.iter().zip(&a2).map(|(w, a)| w * a).sum::<f64>() + p[b3 + r]
            })
            .collect();
        Forward { z1, a1, z2, a2, out }
    }

    pub fn outputs(&self, obs: usize) -> Vec<f64> {
        self.forward(obs).out
    }

    /// `0.5 (Q(obs, out) - target)^2`.
    pub fn loss(&self, obs: usize, out: usize, target: f64) -> f64 {
        let d = self.forward(obs).out[out] - target;
        0.5 * d * d
    }

    /// Gradient of [`Mlp::loss`] with respect to the flat parameters.
    pub fn gradient(&self, obs: usize, out: usize, target: f64) -> Vec<f64> {
        let f = self.forward(obs);
        let (h, n_in) = (self.hidden, self.n_in);
        let (w1, b1, w2, b2, w3, b3) = self.offsets();
        let p = &self.params;
        let mut g = vec![0.0; p.len()];
        let delta = f.out[out] - target;
        g[b3 + out] = delta;
        let mut d2 = vec![0.0; h];
        for k in 0..h {
            g[w3 + out * h + k] = delta * f.a2[k];
            if f.z2[k] > 0.0 {
                d2[k] = delta * p[w3 + out * h + k];
            }
        }
        let mut d1 = vec![0.0; h];
        for r in 0..h {
            if d2[r] == 0.0 {
                continue;
            }
            g[b2 + r] = d2[r];
            for k in 0..h {
                g[w2 + r * h + k] = d2[r] * f.a1[k];
                d1[k] += d2[r] * p[w2 + r * h + k];
            }
        }
        for r in 0..h {
            if f.z1[r] > 0.0 {
                g[w1 + r * n_in + obs] = d1[r];
                g[b1 + r] = d1[r];
            }
        }
        g
    }

    /// One clipped SGD step on the half-squared loss.
    pub fn sgd_step(&mut self, obs: usize, out: usize, target: f64, eta: f64) {
        let mut g = self.gradient(obs, out, target);
        let norm = libm::sqrt(g.iter().map(|x| x * x).sum::<f64>());
        if norm > self.clip {
            let s = self.clip / norm;
            g.iter_mut().for_each(|x| *x *= s);
        }
        for (p, gi) in self.params.iter_mut().zip(&g) {
            *p -= eta * gi;
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum QBackend {
    Tabular { values: Vec<f64>, visits: Vec<u64> },
    Mlp(Mlp),
}

/// Per-agent value function over `(observation, output)` pairs; outputs are
/// successor slots for `Q^beta` and local actions for `Q^alpha`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct QEstimator {
    pub agent: AgentId,
    pub n_obs: usize,
    pub n_out: usize,
    pub backend: QBackend,
    pub updates: u64,
}

impl QEstimator {
    pub fn tabular(agent: AgentId, n_obs: usize, n_out: usize, init: f64, rng: &mut dyn RngCore) -> Self {
        Self::tabular_centered(agent, n_obs, n_out, 0.0, init, rng)
    }

    pub fn tabular_centered(
        agent: AgentId,
        n_obs: usize,
        n_out: usize,
        center: f64,
        init: f64,
        rng: &mut dyn RngCore,
    ) -> Self {
        let values = (0..n_obs * n_out)
            .map(|_| center + if init > 0.0 { rng.gen_range(-init..=init) } else { 0.0 })
            .collect();
        Self {
            agent,
            n_obs,
            n_out,
            backend: QBackend::Tabular { values, visits: vec![0; n_obs * n_out] },
            updates: 0,
        }
    }

    pub fn mlp(agent: AgentId, n_obs: usize, n_out: usize, hidden: usize, clip: f64, rng: &mut dyn RngCore) -> Self {
        Self { agent, n_obs, n_out, backend: QBackend::Mlp(Mlp::new(n_obs, hidden, n_out, clip, rng)), updates: 0 }
    }

    pub fn build(agent: AgentId, n_obs: usize, n_out: usize, cfg: &LearnerConfig, rng: &mut dyn RngCore) -> Self {
        match cfg.backend {
            Backend::Tabular => Self::tabular_centered(agent, n_obs, n_out, cfg.init_center, cfg.init, rng),
            Backend::Mlp { hidden, clip } => Self::mlp(agent, n_obs, n_out, hidden, clip, rng),
        }
    }

    pub fn evaluate(&self, obs: usize, out: usize) -> f64 {
        match &self.backend {
            QBackend::Tabular { values, .. } => values[obs * self.n_out + out],
            QBackend::Mlp(m) => m.outputs(obs)[out],
        }
    }

    /// All outputs at `obs`.
    pub fn row(&self, obs: usize) -> Vec<f64> {
        match &self.backend {
            QBackend::Tabular { values, .. } => values[obs * self.n_out..(obs + 1) * self.n_out].to_vec(),
            QBackend::Mlp(m) => m.outputs(obs),
        }
    }

    /// Apply `f` to the outputs at `obs` without copying tabular rows.
    pub fn with_row<R>(&self, obs: usize, f: impl FnOnce(&[f64]) -> R) -> R {
        match &self.backend {
            QBackend::Tabular { values, .. } => f(&values[obs * self.n_out..(obs + 1) * self.n_out]),
            QBackend::Mlp(m) => f(&m.outputs(obs)),
        }
    }

    pub fn visits(&self, obs: usize, out: usize) -> u64 {
        match &self.backend {
            QBackend::Tabular { visits, .. } => visits[obs * self.n_out + out],
            QBackend::Mlp(_) => self.updates,
        }
    }

    /// One SGD step towards `target`; returns the value before and after.
    ///
    /// Tabular cells move by `min(1, 2 eta) (target - cell)`, the gradient
    /// step on the squared error; the MLP takes a clipped step of size `eta`
    /// on the half-squared error.
    pub fn update(&mut self, obs: usize, out: usize, target: f64, eta: f64) -> Result<(f64, f64)> {
        if !target.is_finite() {
            bail!(NonFinite, "target {} for agent {} at ({}, {})", target, self.agent, obs, out);
        }
        if eta <= 0.0 || !eta.is_finite() {
            bail!(Domain, "step size must be positive and finite, got {}", eta);
        }
        let n_out = self.n_out;
        let res = match &mut self.backend {
            QBackend::Tabular { values, visits } => {
                let k = obs * n_out + out;
                let before = values[k];
                let rate = (2.0 * eta).min(1.0);
                values[k] = before + rate * (target - before);
                visits[k] += 1;
                (before, values[k])
            }
            QBackend::Mlp(m) => {
                let before = m.outputs(obs)[out];
                m.sgd_step(obs, out, target, eta);
                let after = m.outputs(obs)[out];
                if !after.is_finite() {
                    bail!(NonFinite, "MLP output diverged for agent {}", self.agent);
                }
                (before, after)
            }
        };
        self.updates += 1;
        Ok(res)
    }
}

/// Epsilon-greedy choice over `adm`; the greedy branch breaks ties towards
/// the lowest agent index with STOP last.
pub fn select_successor(
    q: &QEstimator,
    obs: usize,
    adm: &SuccessorSet,
    epsilon: f64,
    n_agents: usize,
    rng: &mut dyn RngCore,
) -> Successor {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return adm.as_slice()[rng.gen_range(0..adm.len())];
    }
    q.with_row(obs, |row| greedy_successor(row, adm, n_agents))
}

pub fn greedy_successor(row: &[f64], adm: &SuccessorSet, n_agents: usize) -> Successor {
    let mut best = adm.as_slice()[0];
    let mut best_v = row[best.slot(n_agents)];
    for s in adm.iter().skip(1) {
        let v = row[s.slot(n_agents)];
        if v > best_v {
            best = s;
            best_v = v;
        }
    }
    best
}

fn greedy_index(row: &[f64]) -> usize {
    let mut best = 0;
    for (k, v) in row.iter().enumerate() {
        if *v > row[best] {
            best = k;
        }
    }
    best
}

fn select_local(q: &QEstimator, obs: usize, epsilon: f64, rng: &mut dyn RngCore) -> usize {
    if epsilon > 0.0 && rng.gen::<f64>() < epsilon {
        return rng.gen_range(0..q.n_out);
    }
    q.with_row(obs, greedy_index)
}

/// `max_{c'' in adm} Q(obs, c'')`, or zero at a terminal.
pub fn compute_bootstrap(q: &QEstimator, obs: Option<usize>, adm: &SuccessorSet, n_agents: usize) -> f64 {
    match obs {
        None => 0.0,
        Some(o) => {
            q.with_row(o, |row| adm.slots(n_agents).map(|s| row[s]).fold(f64::NEG_INFINITY, f64::max))
        }
    }
}

/// The three scalars returned to the predecessor at a handoff.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HandoffMessage {
    pub bootstrap: f64,
    pub duration: usize,
    pub option_reward: f64,
}

impl HandoffMessage {
    pub const SCALARS: u64 = 3;
}

/// `R + gamma^tau b`.
pub fn bellman_target(msg: &HandoffMessage, gamma: f64) -> f64 {
    msg.option_reward + libm::pow(gamma, msg.duration as f64) * msg.bootstrap
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochTransition {
    pub episode: u64,
    pub epoch: u64,
    pub predecessor: AgentId,
    pub obs: usize,
    pub successor: Successor,
    pub option_reward: f64,
    pub duration: usize,
    /// `None` at a terminal.
    pub successor_obs: Option<usize>,
    pub bootstrap: f64,
    pub target: f64,
    pub q_before: f64,
    pub q_after: f64,
    pub step_size: f64,
    pub handoff: bool,
}

/// Counters of what crossed agent boundaries.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolAudit {
    /// Control transfers between two distinct agents.
    pub handoffs: u64,
    pub messages: u64,
    pub scalars: u64,
    /// Epochs where an agent chose itself; their bootstrap never leaves the agent.
    pub self_epochs: u64,
    pub stops: u64,
    pub beta_updates: u64,
    pub alpha_updates: u64,
    /// Epochs dropped because the horizon cut them.
    pub censored: u64,
}

/// The only path by which values move between agents.
struct Channel<'a> {
    audit: &'a mut ProtocolAudit,
}

impl Channel<'_> {
    fn deliver(&mut self, msg: HandoffMessage) -> HandoffMessage {
        self.audit.messages += 1;
        self.audit.scalars += HandoffMessage::SCALARS;
        msg
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AgentLearner {
    pub agent: AgentId,
    pub beta: QEstimator,
    pub alpha: Option<QEstimator>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Evaluate,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpisodeResult {
    pub discounted_return: f64,
    pub undiscounted_return: f64,
    pub steps: usize,
    pub epochs: u64,
    pub stopped: bool,
    pub transitions: Vec<EpochTransition>,
    /// State reads made through the episode handle.
    pub access: AccessAudit,
}

/// Random streams of one episode: environment dynamics and internal
/// policies on one, the learner's exploration on the other.
pub struct EpisodeRngs<'a> {
    pub env: &'a mut dyn RngCore,
    pub explore: &'a mut dyn RngCore,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct IcqLearner {
    pub config: LearnerConfig,
    pub n_agents: usize,
    pub gamma: f64,
    pub agents: Vec<AgentLearner>,
    pub episodes: u64,
    pub epochs: u64,
    pub audit: ProtocolAudit,
}

impl IcqLearner {
    pub fn new(env: &dyn Environment, maps: &[ObservationMap], config: LearnerConfig) -> Result<Self> {
        config.validate()?;
        let cfg = env.config();
        cfg.validate()?;
        if maps.len() != cfg.n_agents {
            bail!(Config, "expected {} observation maps, got {}", cfg.n_agents, maps.len());
        }
        let mut rng = substream(config.seed, Stream::Initialization, 0);
        let agents = maps
            .iter()
            .enumerate()
            .map(|(i, map)| {
                let beta = QEstimator::build(i, map.card_obs, cfg.n_agents + 1, &config, &mut rng);
                let alpha = config
                    .adaptable
                    .then(|| QEstimator::build(i, map.card_obs, env.n_local_actions(i), &config, &mut rng));
                AgentLearner { agent: i, beta, alpha }
            })
            .collect();
        Ok(Self {
            config,
            n_agents: cfg.n_agents,
            gamma: cfg.discount,
            agents,
            episodes: 0,
            epochs: 0,
            audit: ProtocolAudit::default(),
        })
    }

    pub fn epsilon(&self) -> f64 {
        self.config.epsilon.at(self.episodes)
    }

    fn step_size(&self, est: &QEstimator, obs: usize, out: usize) -> f64 {
        self.config.step.step(est.updates, est.visits(obs, out))
    }

    /// Successor's reply value at its own observation.
    fn successor_bootstrap(&self, j: AgentId, obs: usize, adm: &SuccessorSet) -> f64 {
        let a = &self.agents[j];
        match (&a.alpha, self.config.coupling) {
            (Some(alpha), Coupling::AlphaBootstrap) => alpha.with_row(obs, |r| r.iter().copied().fold(f64::NEG_INFINITY, f64::max)),
            _ => compute_bootstrap(&a.beta, Some(obs), adm, self.n_agents),
        }
    }

    /// Run one episode. In `Train` mode epsilon follows the schedule and the
    /// estimators are updated; in `Evaluate` mode the policy is greedy and
    /// nothing changes. With `log`, every epoch is recorded.
    pub fn run_episode(
        &mut self,
        env: &dyn Environment,
        maps: &[ObservationMap],
        mode: Mode,
        rngs: EpisodeRngs<'_>,
        log: bool,
    ) -> Result<EpisodeResult> {
        let start = env.reset(rngs.env)?;
        self.run_episode_from(env, maps, start, mode, rngs, log)
    }

    /// [`IcqLearner::run_episode`] from a given initial joint state.
    pub fn run_episode_from(
        &mut self,
        env: &dyn Environment,
        maps: &[ObservationMap],
        start: JointState,
        mode: Mode,
        rngs: EpisodeRngs<'_>,
        log: bool,
    ) -> Result<EpisodeResult> {
        let eps = match mode {
            Mode::Train => self.epsilon(),
            Mode::Evaluate => 0.0,
        };
        let learn = mode == Mode::Train;
        let n = self.n_agents;
        let gamma = self.gamma;
        let adaptable = self.config.adaptable;
        let mut ep = Episode::begin_at(env, maps, start)?;
        let mut res = EpisodeResult::default();
        let mut disc_t = 1.0;
        let mut next_obs: Option<usize> = None;

        while ep.live() {
            let i = ep.active();
            let o = match next_obs.take() {
                Some(o) => o,
                None => ep.observe(),
            };
            let (first_local, key_obs, adm) = if adaptable {
                let alpha = self.agents[i].alpha.as_ref().expect("adaptable learner has alpha estimators");
                let a = select_local(alpha, o, eps, rngs.explore);
                (Some(a), ep.observe_after(a), ep.admissible_after(a))
            } else {
                (None, o, ep.admissible())
            };
            let chosen = select_successor(&self.agents[i].beta, key_obs, &adm, eps, n, rngs.explore);

            let mut option_reward = 0.0;
            let mut first_reward = 0.0;
            let mut tau = 0usize;
            let mut disc = 1.0;
            let mut local = first_local;
            let view = loop {
                let a = match local.take() {
                    Some(a) => a,
                    None if adaptable => {
                        let obs_now = ep.observe();
                        let alpha = self.agents[i].alpha.as_ref().expect("adaptable learner has alpha estimators");
                        select_local(alpha, obs_now, eps, rngs.explore)
                    }
                    None => ep.internal_action(rngs.env),
                };
                let ends = ep.ends_option(a);
                let succ = if ends { chosen } else { Successor::Agent(i) };
                let view = ep.step(a, succ, rngs.env)?;
                if tau == 0 {
                    first_reward = view.reward;
                }
                option_reward += disc * view.reward;
                res.discounted_return += disc_t * view.reward;
                res.undiscounted_return += view.reward;
                disc *= gamma;
                disc_t *= gamma;
                tau += 1;
                res.steps += 1;
                if view.option_end || view.terminated {
                    break view;
                }
            };

            if !view.option_end {
                // the horizon cut the option: its duration is censored
                if learn {
                    self.audit.censored += 1;
                }
                break;
            }
            res.epochs += 1;
            self.epochs += learn as u64;

            let (bootstrap, successor_obs, censor) = match chosen {
                Successor::Stop => {
                    res.stopped = true;
                    (0.0, None, false)
                }
                Successor::Agent(_) if view.terminated => {
                    (0.0, None, self.config.truncation == Truncation::Censor)
                }
                Successor::Agent(j) => {
                    let o2 = ep.observe();
                    next_obs = Some(o2);
                    let adm2 = ep.admissible();
                    (self.successor_bootstrap(j, o2, &adm2), Some(o2), false)
                }
            };
            if !learn {
                if log {
                    let msg = HandoffMessage { bootstrap, duration: tau, option_reward };
                    let q = self.agents[i].beta.evaluate(key_obs, chosen.slot(n));
                    res.transitions.push(EpochTransition {
                        episode: self.episodes,
                        epoch: res.epochs,
                        predecessor: i,
                        obs: key_obs,
                        successor: chosen,
                        option_reward,
                        duration: tau,
                        successor_obs,
                        bootstrap,
                        target: bellman_target(&msg, gamma),
                        q_before: q,
                        q_after: q,
                        step_size: 0.0,
                        handoff: matches!(chosen, Successor::Agent(j) if j != i),
                    });
                }
                continue;
            }
            if censor {
                self.audit.censored += 1;
                continue;
            }
            let raw = HandoffMessage { bootstrap, duration: tau, option_reward };
            let handoff = matches!(chosen, Successor::Agent(j) if j != i);
            let msg = if handoff {
                self.audit.handoffs += 1;
                Channel { audit: &mut self.audit }.deliver(raw)
            } else {
                match chosen {
                    Successor::Stop => self.audit.stops += 1,
                    _ => self.audit.self_epochs += 1,
                }
                raw
            };

            let target = bellman_target(&msg, gamma);
            let slot = chosen.slot(n);
            let eta = self.step_size(&self.agents[i].beta, key_obs, slot);
            let (q_before, q_after) = self.agents[i].beta.update(key_obs, slot, target, eta)?;
            self.audit.beta_updates += 1;

            if let Some(a) = first_local {
                let v_plus = compute_bootstrap(&self.agents[i].beta, Some(key_obs), &adm, n);
                let y_alpha = first_reward + gamma * v_plus;
                let alpha = self.agents[i].alpha.as_ref().expect("adaptable learner has alpha estimators");
                let eta_a = self.config.step.step(alpha.updates, alpha.visits(o, a));
                self.agents[i].alpha.as_mut().expect("alpha").update(o, a, y_alpha, eta_a)?;
                self.audit.alpha_updates += 1;
            }

            if log {
                res.transitions.push(EpochTransition {
                    episode: self.episodes,
                    epoch: self.epochs,
                    predecessor: i,
                    obs: key_obs,
                    successor: chosen,
                    option_reward: msg.option_reward,
                    duration: msg.duration,
                    successor_obs,
                    bootstrap: msg.bootstrap,
                    target,
                    q_before,
                    q_after,
                    step_size: eta,
                    handoff,
                });
            }
        }
        if learn {
            self.episodes += 1;
        }
        res.access = ep.audit();
        Ok(res)
    }

    /// Train for `episodes` episodes on the streams of `seed`.
    pub fn train(
        &mut self,
        env: &dyn Environment,
        maps: &[ObservationMap],
        episodes: u64,
        seed: u64,
    ) -> Result<()> {
        self.train_on(env, maps, episodes, &mut Streams::new(seed))
    }

    /// Train for `episodes` episodes, continuing `streams`. Successive calls
    /// on the same streams reproduce one uninterrupted run.
    pub fn train_on(
        &mut self,
        env: &dyn Environment,
        maps: &[ObservationMap],
        episodes: u64,
        streams: &mut Streams,
    ) -> Result<()> {
        for _ in 0..episodes {
            self.run_episode(
                env,
                maps,
                Mode::Train,
                EpisodeRngs { env: &mut streams.env, explore: &mut streams.explore },
                false,
            )?;
        }
        Ok(())
    }

    /// Train until the routing estimators have taken `budget` updates in total.
    pub fn train_updates(
        &mut self,
        env: &dyn Environment,
        maps: &[ObservationMap],
        budget: u64,
        seed: u64,
    ) -> Result<()> {
        let target = self.audit.beta_updates + budget;
        self.train_until(env, maps, target, &mut Streams::new(seed))
    }

    /// Train on `streams` until the lifetime routing-update count reaches
    /// `total`; a no-op if it already has.
    pub fn train_until(
        &mut self,
        env: &dyn Environment,
        maps: &[ObservationMap],
        total: u64,
        streams: &mut Streams,
    ) -> Result<()> {
        while self.audit.beta_updates < total {
            self.run_episode(
                env,
                maps,
                Mode::Train,
                EpisodeRngs { env: &mut streams.env, explore: &mut streams.explore },
                false,
            )?;
        }
        Ok(())
    }

    /// `Q^beta_i(o, slot)`.
    pub fn q(&self, agent: AgentId, obs: usize, slot: usize) -> f64 {
        self.agents[agent].beta.evaluate(obs, slot)
    }

    pub fn is_finite(&self) -> bool {
        self.agents.iter().all(|a| {
            let ok = |q: &QEstimator| (0..q.n_obs).all(|o| q.row(o).iter().all(|v| v.is_finite()));
            ok(&a.beta) && a.alpha.as_ref().map_or(true, ok)
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalStats {
    pub mean: f64,
    pub se: f64,
    pub n: usize,
}

/// Greedy evaluation over `n_eval` episodes on common random numbers: the
/// `k`-th evaluation episode always uses the same environment stream for a
/// given `seed`.
pub fn evaluate_greedy(
    learner: &IcqLearner,
    env: &dyn Environment,
    maps: &[ObservationMap],
    n_eval: usize,
    seed: u64,
) -> Result<EvalStats> {
    let mut probe = learner.clone();
    let mut returns = Vec::with_capacity(n_eval);
    for k in 0..n_eval {
        let mut env_rng = substream(seed, Stream::Evaluation, k as u64);
        let mut explore = substream(seed, Stream::Exploration, k as u64);
        let r = probe.run_episode(env, maps, Mode::Evaluate, EpisodeRngs { env: &mut env_rng, explore: &mut explore }, false)?;
        returns.push(r.discounted_return);
    }
    Ok(mean_se(&returns, n_eval))
}

pub fn mean_se(xs: &[f64], n: usize) -> EvalStats {
    let k = xs.len().max(1) as f64;
    let mean = xs.iter().sum::<f64>() / k;
    let var = if xs.len() > 1 { xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (k - 1.0) } else { 0.0 };
    EvalStats { mean, se: libm::sqrt(var / k), n }
}

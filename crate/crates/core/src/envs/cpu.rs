//! Six-role CPU-programming task in the adaptable regime.
//!
//! Memory holds two operands `a`, `b` and an output cell; a task code names
//! the target `op(a, b)` for `op` in {add, sub, max, min, copy-a, copy-b}.
//! The roles share a register bus `X`, `Y`, `R` plus a selection `S`:
//!
//! | role     | local actions                         |
//! |----------|---------------------------------------|
//! | starter  | clear the bus                         |
//! | loader-A | `X <- a` or `X <- b`                  |
//! | loader-B | `Y <- a` or `Y <- b`                  |
//! | alu      | `R <- X op Y`, op in {add, sub, max, min}; out of range faults to empty |
//! | selector | `S <- X`, `Y` or `R`                  |
//! | writer   | `out <- S`                            |
//!
//! Every role may pass control to any role or STOP. Each step costs
//! `step_cost`; STOP pays `+1` when the output cell equals the target. A
//! role's private state latches the last value it produced.
//!
//! Each occupied register also carries a value-free provenance tag
//! ([`Expr`]): garbage, `a`, `b`, or `op(x, y)` over the operand tags.
//! Observations show the task code, the tags of the role's visible register
//! block and the output cell, never register values, so a policy learned on
//! small operands transfers to large ones exactly when it is
//! value-independent.

use alloc::collections::{BTreeMap, BTreeSet, VecDeque};
use alloc::string::ToString;
use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, RngCore};
use serde::{Deserialize, Serialize};

use crate::ais::ObservationMap;
use crate::error::{bail, Result};
use crate::smdp::{settle, validate_action, EnvConfig, Environment, JointAction, JointState, StepOutcome, Successor, SuccessorSet};

pub const STARTER: usize = 0;
pub const LOADER_A: usize = 1;
pub const LOADER_B: usize = 2;
pub const ALU: usize = 3;
pub const SELECTOR: usize = 4;
pub const WRITER: usize = 5;
pub const N_ROLES: usize = 6;
pub const ROLE_NAMES: [&str; N_ROLES] = ["starter", "loader-a", "loader-b", "alu", "selector", "writer"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    Add,
    Sub,
    Max,
    Min,
    CopyA,
    CopyB,
}

impl Task {
    pub const ALL: [Task; 6] = [Task::Add, Task::Sub, Task::Max, Task::Min, Task::CopyA, Task::CopyB];

    pub fn code(self) -> usize {
        self as usize
    }

    pub fn from_code(c: usize) -> Task {
        Task::ALL[c]
    }

    /// Unbounded integer target.
    pub fn target(self, a: i64, b: i64) -> i64 {
        match self {
            Task::Add => a + b,
            Task::Sub => a - b,
            Task::Max => a.max(b),
            Task::Min => a.min(b),
            Task::CopyA => a,
            Task::CopyB => b,
        }
    }
}

/// ALU operation codes, in local-action order.
pub fn alu_apply(op: usize, x: i64, y: i64) -> i64 {
    match op {
        0 => x + y,
        1 => x - y,
        2 => x.max(y),
        _ => x.min(y),
    }
}

/// Provenance tag of a register: 0 garbage, 1 `a`, 2 `b`, and
/// `3 + 9 op + 3 x + y` for an ALU result over operand tags `x, y < 3`.
pub type Expr = usize;
pub const EXPR_GARBAGE: Expr = 0;
pub const EXPR_A: Expr = 1;
pub const EXPR_B: Expr = 2;
/// Number of distinct tags.
pub const N_EXPR: usize = 3 + 4 * 9;

/// Tag of `op(x, y)`; nested results collapse to garbage.
pub fn expr_alu(op: usize, x: Expr, y: Expr) -> Expr {
    let leaf = |e: Expr| if e < 3 { e } else { EXPR_GARBAGE };
    3 + 9 * op + 3 * leaf(x) + leaf(y)
}

/// Register contents: value plus provenance tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Reg {
    pub value: usize,
    pub tag: Expr,
}

impl Reg {
    pub fn new(value: usize, tag: Expr) -> Self {
        Self { value, tag }
    }
}

fn value(r: Option<Reg>) -> Option<usize> {
    r.map(|r| r.value)
}

/// Observation digit of a register: 0 empty, else `1 + tag`.
fn tag_digit(r: Option<Reg>) -> usize {
    r.map_or(0, |r| 1 + r.tag)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Phase {
    /// Operands from the lowest `train_fraction` of the value range.
    Train,
    /// Full range, with at least one operand outside the training range.
    HeldOut,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CpuSpec {
    /// Values are integers in `0..value_range`.
    pub value_range: usize,
    pub train_fraction: f64,
    pub step_cost: f64,
    pub horizon: usize,
    pub discount: f64,
    pub seed: u64,
}

impl Default for CpuSpec {
    fn default() -> Self {
        Self { value_range: 20, train_fraction: 0.2, step_cost: 0.01, horizon: 12, discount: 0.95, seed: 0 }
    }
}

/// Decoded interface state. Registers use `None` for empty.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Machine {
    pub task: Task,
    pub a: usize,
    pub b: usize,
    pub out: Option<Reg>,
    pub x: Option<Reg>,
    pub y: Option<Reg>,
    pub r: Option<Reg>,
    /// 0 none, 1 X, 2 Y, 3 R.
    pub s: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CpuEnv {
    config: EnvConfig,
    pub spec: CpuSpec,
    pub phase: Phase,
}

impl CpuEnv {
    pub fn new(spec: &CpuSpec) -> Result<Self> {
        if spec.value_range < 2 {
            bail!(Config, "value range must hold at least two values");
        }
        if !(spec.train_fraction > 0.0 && spec.train_fraction <= 1.0) {
            bail!(Config, "train fraction must lie in (0, 1]");
        }
        if spec.horizon < 5 {
            bail!(Config, "horizon too short for the shortest program");
        }
        let v = spec.value_range;
        let reg = (v + 1) as u128 * N_EXPR as u128;
        let card = 6 * (v * v) as u128 * reg.pow(4) * 4;
        let card = match usize::try_from(card) {
            Ok(c) => c,
            Err(_) => bail!(Config, "value range {} overflows the interface encoding", v),
        };
        let mut params = BTreeMap::new();
        params.insert("family".to_string(), "cpu".to_string());
        params.insert("value_range".to_string(), v.to_string());
        params.insert("train_fraction".to_string(), spec.train_fraction.to_string());
        let config = EnvConfig {
            n_agents: N_ROLES,
            card_latent: 1,
            card_interface: card,
            horizon: spec.horizon,
            discount: spec.discount,
            seed: spec.seed,
            params,
        };
        config.validate()?;
        Ok(Self { config, spec: spec.clone(), phase: Phase::Train })
    }

    pub fn with_phase(&self, phase: Phase) -> Self {
        Self { phase, ..self.clone() }
    }

    /// Operands below this bound form the training range.
    pub fn train_cut(&self) -> usize {
        let v = self.spec.value_range as f64;
        (libm::ceil(self.spec.train_fraction * v - 1e-9) as usize).clamp(1, self.spec.value_range)
    }

    pub fn encode(&self, mc: &Machine) -> usize {
        let v = self.spec.value_range;
        let base = (v + 1) * N_EXPR;
        let reg = |o: Option<Reg>| o.map_or(0, |r| 1 + r.value * N_EXPR + r.tag);
        let mut k = mc.task.code();
        for (digit, base) in [
            (mc.a, v),
            (mc.b, v),
            (reg(mc.out), base),
            (reg(mc.x), base),
            (reg(mc.y), base),
            (reg(mc.r), base),
            (mc.s, 4),
        ] {
            k = k * base + digit;
        }
        k
    }

    pub fn decode(&self, mut k: usize) -> Machine {
        let v = self.spec.value_range;
        let base = (v + 1) * N_EXPR;
        let mut take = |base: usize| {
            let d = k % base;
            k /= base;
            d
        };
        let s = take(4);
        let reg = |d: usize| (d > 0 && d <= v * N_EXPR).then(|| Reg::new((d - 1) / N_EXPR, (d - 1) % N_EXPR));
        let r = reg(take(base));
        let y = reg(take(base));
        let x = reg(take(base));
        let out = reg(take(base));
        let b = take(v);
        let a = take(v);
        Machine { task: Task::from_code(take(6)), a, b, out, x, y, r, s }
    }

    pub fn target(&self, mc: &Machine) -> Option<usize> {
        let t = mc.task.target(mc.a as i64, mc.b as i64);
        (0..self.spec.value_range as i64).contains(&t).then_some(t as usize)
    }

    /// Fresh machine: garbage on the bus, empty output.
    pub fn machine(&self, task: Task, a: usize, b: usize, garbage: [usize; 3]) -> Machine {
        let g = |v: usize| Some(Reg::new(v, EXPR_GARBAGE));
        Machine { task, a, b, out: None, x: g(garbage[0]), y: g(garbage[1]), r: g(garbage[2]), s: 0 }
    }

    pub fn start_state(&self, mc: &Machine) -> JointState {
        JointState {
            latent: 0,
            interface: self.encode(mc),
            privates: vec![0; N_ROLES],
            active: STARTER,
            step: 0,
            terminated: false,
        }
    }

    /// Effect of `role` taking `local` on the machine and its own latch.
    pub fn apply(&self, mc: &Machine, role: usize, local: usize) -> (Machine, Option<usize>) {
        let v = self.spec.value_range as i64;
        let mut m = *mc;
        let latch = match role {
            STARTER => {
                m.x = None;
                m.y = None;
                m.r = None;
                m.s = 0;
                None
            }
            LOADER_A => {
                m.x = Some(if local == 0 { Reg::new(mc.a, EXPR_A) } else { Reg::new(mc.b, EXPR_B) });
                value(m.x)
            }
            LOADER_B => {
                m.y = Some(if local == 0 { Reg::new(mc.a, EXPR_A) } else { Reg::new(mc.b, EXPR_B) });
                value(m.y)
            }
            ALU => {
                m.r = match (mc.x, mc.y) {
                    (Some(x), Some(y)) => {
                        let res = alu_apply(local, x.value as i64, y.value as i64);
                        (0..v).contains(&res).then(|| Reg::new(res as usize, expr_alu(local, x.tag, y.tag)))
                    }
                    _ => None,
                };
                value(m.r)
            }
            SELECTOR => {
                m.s = local + 1;
                Some(m.s)
            }
            _ => {
                let src = match mc.s {
                    1 => mc.x,
                    2 => mc.y,
                    3 => mc.r,
                    _ => None,
                };
                if src.is_some() {
                    m.out = src;
                }
                value(m.out)
            }
        };
        (m, latch)
    }

    fn latch_code(&self, role: usize, latch: Option<usize>) -> usize {
        match role {
            SELECTOR => latch.unwrap_or(0),
            _ => latch.map_or(0, |v| v + 1),
        }
    }

    /// Observation digits of a role's visible block as `(digit, radix)`:
    /// provenance tags along the role's data path plus the output cell.
    /// Operand registers only ever hold leaf tags, hence the short radix.
    pub fn visible_block(role: usize, mc: &Machine) -> Vec<(usize, usize)> {
        let leaf = |r: Option<Reg>| (tag_digit(r), 4);
        let tag = |r: Option<Reg>| (tag_digit(r), N_EXPR + 1);
        let selected = match mc.s {
            1 => mc.x,
            2 => mc.y,
            3 => mc.r,
            _ => None,
        };
        let mut block = match role {
            STARTER => vec![],
            LOADER_A | LOADER_B => vec![leaf(mc.x), leaf(mc.y)],
            ALU => vec![leaf(mc.x), leaf(mc.y), tag(mc.r)],
            SELECTOR => vec![leaf(mc.x), leaf(mc.y), tag(mc.r), (mc.s, 4)],
            _ => vec![(mc.s, 4), tag(selected)],
        };
        block.push(tag(mc.out));
        block
    }

    /// Observation of `role`: task code then its visible block, mixed radix.
    pub fn observe(role: usize, mc: &Machine) -> usize {
        CpuEnv::visible_block(role, mc).iter().fold(mc.task.code(), |acc, &(d, base)| acc * base + d)
    }

    pub fn card_observation(role: usize) -> usize {
        let mc = Machine { task: Task::Add, a: 0, b: 0, out: None, x: None, y: None, r: None, s: 0 };
        CpuEnv::visible_block(role, &mc).iter().fold(6, |acc, &(_, base)| acc * base)
    }

    fn draw_machine(&self, rng: &mut dyn RngCore) -> Result<Machine> {
        let v = self.spec.value_range;
        let cut = self.train_cut();
        for _ in 0..10_000 {
            let task = Task::ALL[rng.gen_range(0..Task::ALL.len())];
            let (a, b) = match self.phase {
                Phase::Train => (rng.gen_range(0..cut), rng.gen_range(0..cut)),
                Phase::HeldOut => (rng.gen_range(0..v), rng.gen_range(0..v)),
            };
            if self.phase == Phase::HeldOut && a.max(b) < cut {
                continue;
            }
            let garbage = [rng.gen_range(0..v), rng.gen_range(0..v), rng.gen_range(0..v)];
            let mc = self.machine(task, a, b, garbage);
            if self.target(&mc).is_some() {
                return Ok(mc);
            }
        }
        bail!(Config, "could not draw a reachable task in phase {:?}", self.phase)
    }

    /// Every output value reachable from a cleared machine with operands
    /// `(a, b)`, by breadth-first search over bus states.
    pub fn reachable_outputs(&self, a: usize, b: usize) -> BTreeSet<usize> {
        let start = Machine { task: Task::Add, a, b, out: None, x: None, y: None, r: None, s: 0 };
        let mut seen = BTreeSet::new();
        let mut queue = VecDeque::new();
        let mut outs = BTreeSet::new();
        seen.insert(start);
        queue.push_back(start);
        while let Some(mc) = queue.pop_front() {
            if let Some(o) = mc.out {
                outs.insert(o.value);
            }
            for role in 0..N_ROLES {
                for local in 0..self.n_local_actions(role) {
                    let (next, _) = self.apply(&mc, role, local);
                    if seen.insert(next) {
                        queue.push_back(next);
                    }
                }
            }
        }
        outs
    }
}

impl Environment for CpuEnv {
    fn config(&self) -> &EnvConfig {
        &self.config
    }

    fn r_max(&self) -> f64 {
        1.0 + self.spec.step_cost
    }

    fn card_private(&self, agent: usize) -> usize {
        match agent {
            SELECTOR => 4,
            STARTER => 1,
            _ => self.spec.value_range + 1,
        }
    }

    fn n_local_actions(&self, agent: usize) -> usize {
        match agent {
            LOADER_A | LOADER_B => 2,
            ALU => 4,
            SELECTOR => 3,
            _ => 1,
        }
    }

    fn reset(&self, rng: &mut dyn RngCore) -> Result<JointState> {
        let mc = self.draw_machine(rng)?;
        Ok(self.start_state(&mc))
    }

    fn admissible_successors(&self, _interface: usize) -> SuccessorSet {
        SuccessorSet::full(N_ROLES)
    }

    fn post_action(&self, state: &JointState, local: usize) -> JointState {
        let (mc, latch) = self.apply(&self.decode(state.interface), state.active, local);
        let mut next = state.clone();
        next.interface = self.encode(&mc);
        if state.active != STARTER {
            next.privates[state.active] = self.latch_code(state.active, latch);
        }
        next
    }

    fn step(&self, state: &JointState, action: &JointAction, _rng: &mut dyn RngCore) -> Result<StepOutcome> {
        validate_action(self, state, action)?;
        let next = self.post_action(state, action.local);
        let mut reward = -self.spec.step_cost;
        if action.successor == Successor::Stop {
            let mc = self.decode(next.interface);
            if value(mc.out).is_some() && value(mc.out) == self.target(&mc) {
                reward += 1.0;
            }
        }
        Ok(settle(&self.config, state, action, true, next, reward))
    }

    fn observation_maps(&self) -> Vec<ObservationMap> {
        (0..N_ROLES)
            .map(|role| {
                let env = self.clone();
                ObservationMap::custom(role, CpuEnv::card_observation(role), ROLE_NAMES[role], move |m, _l| {
                    CpuEnv::observe(role, &env.decode(m))
                })
            })
            .collect()
    }
}

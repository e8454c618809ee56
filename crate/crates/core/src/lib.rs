//! Interface-constrained semi-Markov decision processes.
//!
//! Sequential multi-agent control where exactly one agent acts at a time,
//! control passes through a shared interface artifact, and each agent sees
//! only a local projection of that artifact plus its own private state.
//!
//! The crate is `no_std` with `alloc`. It contains:
//!
//! * [`smdp`]: joint-state types and the [`smdp::Environment`] contract.
//! * [`ais`]: observation maps and Monte-Carlo AIS gap estimation.
//! * [`learner`]: the decentralized IC-Q learner with scalar value passing.
//! * [`oracle`]: latent decision-epoch SMDP extraction and value iteration.
//! * [`envs`]: synthetic, routing, CPU-programming and table environments.
//! * [`diagnostics`]: mixing time, feature covariance, contraction margin,
//!   value gaps, correlations and the three-term error bound.
//!
//! IO, configuration files and the command-line runner live in `icq-lab`.
#![no_std]

extern crate alloc;
#[cfg(test)]
extern crate std;

pub mod ais;
pub mod diagnostics;
pub mod envs;
pub mod epochs;
pub mod error;
pub mod learner;
pub mod linalg;
pub mod oracle;
pub mod rng;
pub mod smdp;

pub use error::{Error, Result};
pub use smdp::{
    AgentId, EnvConfig, Environment, JointAction, JointState, StepOutcome, Successor, SuccessorSet,
};

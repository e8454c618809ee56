//! Concrete IC-SMDP families.
//!
//! * [`table`]: small random instances with an exact latent SMDP, used by the
//!   oracle and convergence checks.
//! * [`synthetic`]: the parameterized environment with a retention knob and a
//!   handoff-probability knob.
//! * [`routing`]: packet routing on random graphs, one agent per node.
//! * [`cpu`]: a six-role CPU-programming task in the adaptable regime.

pub mod cpu;
pub mod graph;
pub mod routing;
pub mod synthetic;
pub mod table;

use alloc::vec::Vec;

use rand::{Rng, RngCore};

/// A flat Dirichlet(1) draw of length `k`.
pub(crate) fn simplex(k: usize, rng: &mut dyn RngCore) -> Vec<f64> {
    let w: Vec<f64> = (0..k).map(|_| -libm::log(1.0 - rng.gen::<f64>())).collect();
    let s: f64 = w.iter().sum();
    w.into_iter().map(|x| x / s).collect()
}

/// Index drawn from unnormalized weights.
pub(crate) fn sample_weighted(weights: &[f64], rng: &mut dyn RngCore) -> usize {
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (k, w) in weights.iter().enumerate() {
        if u < *w {
            return k;
        }
        u -= w;
    }
    weights.iter().rposition(|w| *w > 0.0).unwrap_or(0)
}

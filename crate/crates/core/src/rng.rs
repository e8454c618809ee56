//! Seeded random streams.
//!
//! One root seed per run is split into named substreams so that exploration
//! noise never perturbs environment dynamics, and two configurations that
//! share a seed see identical environment randomness.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Stream {
    Environment,
    Exploration,
    Initialization,
    Evaluation,
    Estimation,
    Construction,
}

impl Stream {
    fn tag(self) -> u64 {
        match self {
            Stream::Environment => 0x454e_5649,
            Stream::Exploration => 0x4558_504c,
            Stream::Initialization => 0x494e_4954,
            Stream::Evaluation => 0x4556_414c,
            Stream::Estimation => 0x4553_544d,
            Stream::Construction => 0x434f_4e53,
        }
    }
}

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Deterministic seed for `(root, stream, index)`.
pub fn derive_seed(root: u64, stream: Stream, index: u64) -> u64 {
    mix64(mix64(root ^ stream.tag()).wrapping_add(index))
}

pub fn substream(root: u64, stream: Stream, index: u64) -> StreamRng {
    StreamRng::seed_from_u64(derive_seed(root, stream, index))
}

/// The named substreams of one run.
#[derive(Clone, Debug)]
pub struct Streams {
    pub env: StreamRng,
    pub explore: StreamRng,
    pub init: StreamRng,
}

impl Streams {
    pub fn new(root: u64) -> Self {
        Self {
            env: substream(root, Stream::Environment, 0),
            explore: substream(root, Stream::Exploration, 0),
            init: substream(root, Stream::Initialization, 0),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::RngCore;

    #[test]
    fn streams_are_independent_and_reproducible() {
        let mut a = Streams::new(7);
        let mut b = Streams::new(7);
        assert_eq!(a.env.next_u64(), b.env.next_u64());
        // drawing exploration noise leaves the environment stream untouched
        let mut c = Streams::new(7);
        for _ in 0..100 {
            c.explore.next_u64();
        }
        assert_eq!(Streams::new(7).env.next_u64(), c.env.next_u64());
        assert_ne!(derive_seed(7, Stream::Environment, 0), derive_seed(7, Stream::Exploration, 0));
    }
}

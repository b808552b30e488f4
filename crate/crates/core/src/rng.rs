//! Named random streams derived from a master seed.
//!
//! Every consumer of randomness asks for a stream by name plus an index
//! path (step, task slot, rollout, ...). The derived generator depends only
//! on `(master, name, path)`, never on call order or worker scheduling, so
//! turning one consumer on or off cannot shift the draws seen by another.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type StreamRng = ChaCha8Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Streams {
    master: u64,
}

impl Streams {
    pub fn new(master: u64) -> Self {
        Self { master }
    }

    pub fn master(&self) -> u64 {
        self.master
    }

    pub fn seed(&self, name: &str, path: &[u64]) -> u64 {
        let mut h = mix(self.master ^ 0x243f_6a88_85a3_08d3);
        for b in name.bytes() {
            h = mix(h ^ b as u64);
        }
        h = mix(h ^ 0xff);
        for &p in path {
            h = mix(h.wrapping_add(p).wrapping_add(0x9e37_79b9_7f4a_7c15));
        }
        h
    }

    pub fn rng(&self, name: &str, path: &[u64]) -> StreamRng {
        ChaCha8Rng::seed_from_u64(self.seed(name, path))
    }

    /// A child namespace, e.g. one per pipeline phase.
    pub fn child(&self, name: &str) -> Streams {
        Streams::new(self.seed(name, &[]))
    }
}

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

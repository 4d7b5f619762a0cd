//! Counter-based random streams keyed by their position in a run.
//!
//! Every draw of a simulation is addressed by `(master seed, chain, round,
//! client, local step)`. The key for a path is obtained by folding the path
//! components through the SplitMix64 finalizer, and the stream itself is the
//! SplitMix64 sequence `mix(key + (i + 1)·φ)` for counter `i`. Two streams
//! with the same path produce identical draws no matter in which order or on
//! which thread they are consumed.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

#[inline]
fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn fold(key: u64, component: u64) -> u64 {
    mix64(key ^ mix64(component.wrapping_add(GOLDEN)))
}

/// Address of a substream inside a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct StreamPath {
    pub chain: u64,
    pub round: u64,
    pub client: u64,
    pub step: u64,
}

#[derive(Clone, Debug)]
pub struct RandomStream {
    key: u64,
    counter: u64,
}

impl RandomStream {
    pub fn new(master_seed: u64, path: StreamPath) -> Self {
        let mut key = mix64(master_seed ^ 0x6A09_E667_F3BC_C909);
        for part in [path.chain, path.round, path.client, path.step] {
            key = fold(key, part);
        }
        RandomStream { key, counter: 0 }
    }

    /// Stream for auxiliary draws that are not tied to a simulation step
    /// (dataset generation, random problem construction).
    pub fn aux(master_seed: u64, label: u64) -> Self {
        Self::new(
            master_seed,
            StreamPath {
                chain: u64::MAX,
                round: label,
                client: u64::MAX,
                step: u64::MAX,
            },
        )
    }
}

impl RngCore for RandomStream {
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)))
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

/// All substreams of one Markov chain (one replica) of a run.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ChainStreams {
    pub seed: u64,
    pub chain: u64,
}

impl ChainStreams {
    pub fn new(seed: u64, chain: u64) -> Self {
        ChainStreams { seed, chain }
    }

    pub fn step(&self, round: u64, client: usize, step: usize) -> RandomStream {
        RandomStream::new(
            self.seed,
            StreamPath {
                chain: self.chain,
                round,
                client: client as u64,
                step: step as u64,
            },
        )
    }
}

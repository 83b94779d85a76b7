//! Coordinate-addressed random streams.
//!
//! Every draw used by an oracle is a pure function of
//! `(seed, trial, round, agent, step)` plus a counter, so agents can be
//! evaluated in any order (or concurrently) and still see the same noise.

use rand::RngCore;

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[inline]
fn absorb(state: u64, word: u64) -> u64 {
    mix64(state ^ mix64(word.wrapping_add(GOLDEN)))
}

/// Seed of trial `trial` under `base_seed`.
pub fn trial_seed(base_seed: u64, trial: u64) -> u64 {
    absorb(absorb(0x6665_6476_6172_0001, base_seed), trial)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default)]
pub struct NoiseStream {
    pub seed: u64,
    pub trial: u64,
    pub round: u64,
    pub agent: u64,
    pub step: u64,
}

impl NoiseStream {
    pub fn new(seed: u64) -> Self {
        Self {
            seed,
            ..Self::default()
        }
    }

    pub fn trial(self, trial: u64) -> Self {
        Self { trial, ..self }
    }

    pub fn round(self, round: u64) -> Self {
        Self { round, ..self }
    }

    pub fn agent(self, agent: u64) -> Self {
        Self { agent, ..self }
    }

    pub fn step(self, step: u64) -> Self {
        Self { step, ..self }
    }

    /// Substream key for the current coordinates.
    pub fn key(&self) -> u64 {
        let mut k = absorb(0x6665_6476_6172_0002, self.seed);
        k = absorb(k, self.trial);
        k = absorb(k, self.round);
        k = absorb(k, self.agent);
        absorb(k, self.step)
    }

    /// A fresh generator positioned at counter 0 of this substream.
    pub fn rng(&self) -> CounterRng {
        CounterRng {
            key: self.key(),
            counter: 0,
        }
    }
}

/// Counter-mode generator: output `k` is `mix64(key + k * GOLDEN)`.
#[derive(Debug, Clone)]
pub struct CounterRng {
    key: u64,
    counter: u64,
}

impl CounterRng {
    pub fn counter(&self) -> u64 {
        self.counter
    }

    /// Fair coin consuming exactly one counter.
    #[inline]
    pub fn bernoulli_half(&mut self) -> bool {
        self.next_u64() >> 63 == 1
    }
}

impl RngCore for CounterRng {
    #[inline]
    fn next_u32(&mut self) -> u32 {
        (self.next_u64() >> 32) as u32
    }

    #[inline]
    fn next_u64(&mut self) -> u64 {
        let out = mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN)));
        self.counter = self.counter.wrapping_add(1);
        out
    }

    fn fill_bytes(&mut self, dst: &mut [u8]) {
        for chunk in dst.chunks_mut(8) {
            let bytes = self.next_u64().to_le_bytes();
            chunk.copy_from_slice(&bytes[..chunk.len()]);
        }
    }
}

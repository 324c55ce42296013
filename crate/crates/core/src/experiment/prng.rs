//! SplitMix64.
//!
//! Output `i` (counting from 1) for seed `s` is `mix64(s + i·γ)` with
//! `γ = 0x9E3779B97F4A7C15`, so the stream is a pure function of (seed,
//! counter) and identical on every platform.

pub const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// The SplitMix64 output finalizer.
pub const fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitMix64 {
    state: u64,
}

impl SplitMix64 {
    pub const fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Independent stream keyed by `key`, seeded with `mix64(seed ^ key·γ)`.
    pub const fn substream(seed: u64, key: u64) -> Self {
        Self::new(mix64(seed ^ key.wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN_GAMMA);
        mix64(self.state)
    }

    /// Uniform integer in `[0, bound)`, by rejecting the biased low zone.
    pub fn below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "empty range");
        let zone = bound.wrapping_neg() % bound;
        loop {
            let x = self.next_u64();
            if x >= zone {
                return x % bound;
            }
        }
    }
}

//! Counter-based SplitMix64 generator.
//!
//! Output `n` (zero-based) of a stream with key `k` is
//! `mix(k + (n + 1) * 0x9E3779B97F4A7C15)` with wrapping arithmetic, where
//! `mix` is the SplitMix64 finalizer. The full state is `(key, counter)`, so
//! any stream can be reproduced or resumed from two integers in any language.
//!
//! Derived quantities:
//! - `next_f64`: top 53 bits scaled by 2^-53, in `[0, 1)`.
//! - `normal`: Box-Muller `sqrt(-2 ln(1 - u1)) * cos(2 pi u2)`, one value per
//!   pair of uniforms.
//! - `truncated_normal`: `normal` resampled until `|z| <= 2`.
//! - `shuffle`: Fisher-Yates from the last index down, `j = below(i + 1)`.

const GOLDEN_GAMMA: u64 = 0x9E37_79B9_7F4A_7C15;

/// SplitMix64 finalizer.
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SplitMix64 {
    key: u64,
    counter: u64,
}

impl SplitMix64 {
    pub fn new(seed: u64) -> Self {
        Self {
            key: seed,
            counter: 0,
        }
    }

    /// Independent stream for `seed` labelled by `tags` (e.g. a purpose code and an index).
    pub fn derive(seed: u64, tags: &[u64]) -> Self {
        let key = tags
            .iter()
            .fold(mix64(seed), |acc, &t| mix64(acc ^ mix64(t.wrapping_add(GOLDEN_GAMMA))));
        Self::new(key)
    }

    pub fn from_state(state: [u64; 2]) -> Self {
        Self {
            key: state[0],
            counter: state[1],
        }
    }

    pub fn state(&self) -> [u64; 2] {
        [self.key, self.counter]
    }

    pub fn next_u64(&mut self) -> u64 {
        self.counter = self.counter.wrapping_add(1);
        mix64(self.key.wrapping_add(self.counter.wrapping_mul(GOLDEN_GAMMA)))
    }

    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.next_f64()
    }

    /// Uniform integer in `0..n` by multiply-shift. `n` must be positive.
    pub fn below(&mut self, n: u64) -> u64 {
        debug_assert!(n > 0);
        ((self.next_u64() as u128 * n as u128) >> 64) as u64
    }

    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.next_f64();
        let u2 = self.next_f64();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn truncated_normal(&mut self, std: f64) -> f64 {
        loop {
            let z = self.normal();
            if z.abs() <= 2.0 {
                return z * std;
            }
        }
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i as u64 + 1) as usize;
            items.swap(i, j);
        }
    }
}

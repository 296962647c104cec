//! Bit-reproducible random source.
//!
//! The stream is fully specified so that any implementation can regenerate it:
//!
//! * `next_u64`: splitmix64. The state advances by `0x9E3779B97F4A7C15`
//!   (wrapping) and the output is the standard splitmix64 finalizer of the new
//!   state.
//! * `next_f64`: the top 53 bits of `next_u64`, scaled by `2^-53`, in `[0, 1)`.
//! * `next_normal`: Box–Muller, cosine branch only. Two uniforms are drawn in
//!   order, `u1 = (top53 + 1) * 2^-53` in `(0, 1]` and `u2 = top53 * 2^-53`,
//!   and the variate is `sqrt(-2 ln u1) * cos(2 pi u2)`. The sine partner is
//!   discarded so the source carries no hidden spare between calls.
//! * `below(n)`: unbiased integer in `[0, n)` by rejection on the low zone of
//!   the 64-bit range.
//!
//! Independent streams are obtained with [`RandomSource::derive`], which folds a
//! list of keys into the seed through repeated splitmix64 mixing.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;
const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RandomSource {
    state: u64,
}

impl RandomSource {
    pub fn new(seed: u64) -> Self {
        Self { state: seed }
    }

    /// Source keyed by `(seed, keys...)`. Each key is absorbed as
    /// `h = mix64(h ^ mix64(key + GOLDEN))`, starting from `h = mix64(seed)`.
    pub fn derive(seed: u64, keys: &[u64]) -> Self {
        let mut h = mix64(seed);
        for &k in keys {
            h = mix64(h ^ mix64(k.wrapping_add(GOLDEN)));
        }
        Self::new(h)
    }

    pub fn state(&self) -> u64 {
        self.state
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        self.state = self.state.wrapping_add(GOLDEN);
        mix64(self.state)
    }

    #[inline]
    pub fn next_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    pub fn next_normal(&mut self) -> f64 {
        let u1 = ((self.next_u64() >> 11) + 1) as f64 * TWO_POW_NEG_53;
        let u2 = (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53;
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        let n = n as u64;
        // values below `zone` would bias the modulo
        let zone = n.wrapping_neg() % n;
        loop {
            let x = self.next_u64();
            if x >= zone {
                return (x % n) as usize;
            }
        }
    }

    /// Fisher–Yates, walking from the last index down.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    pub fn normals(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.next_normal()).collect()
    }
}

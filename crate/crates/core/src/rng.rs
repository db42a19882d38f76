//! Counter-based random streams.
//!
//! Every random draw in the crate is a pure function of `(key, counter)`,
//! where the key is derived from a user seed and a stream tag with
//! [`derive_seed`]. The mixing function is SplitMix64's finalizer, so any
//! language with 64-bit wrapping arithmetic can regenerate the same bits.

const GOLDEN: u64 = 0x9e37_79b9_7f4a_7c15;

/// SplitMix64 output function.
#[inline]
pub fn mix64(mut z: u64) -> u64 {
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Derive an independent 64-bit key from a parent seed and a stream index.
///
/// `derive_seed(s, i) = mix64(mix64(s) ^ mix64(i + GOLDEN))`
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    mix64(mix64(seed) ^ mix64(stream.wrapping_add(GOLDEN)))
}

/// The `counter`-th 64-bit word of the stream keyed by `key`.
#[inline]
pub fn word(key: u64, counter: u64) -> u64 {
    mix64(key.wrapping_add(counter.wrapping_mul(GOLDEN)))
}

/// Sequential view over one counter stream.
#[derive(Debug, Clone)]
pub struct Stream {
    key: u64,
    counter: u64,
}

impl Stream {
    pub fn new(key: u64) -> Self {
        Self { key, counter: 0 }
    }

    #[inline]
    pub fn next_u64(&mut self) -> u64 {
        let w = word(self.key, self.counter);
        self.counter += 1;
        w
    }

    /// Uniform draw in the open interval (0, 1) with 53 bits of resolution.
    #[inline]
    pub fn uniform(&mut self) -> f64 {
        ((self.next_u64() >> 11) as f64 + 0.5) * (1.0 / (1u64 << 53) as f64)
    }
}

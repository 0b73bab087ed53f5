//! Seeded random number helpers.
//!
//! All randomness in the crate flows through a [`SeedStream`] built on
//! ChaCha8, so that every pipeline is reproducible from a single `u64`
//! seed. The float helpers derive values from raw `next_u32` output
//! directly, which pins the exact bit streams independent of any
//! distribution-crate internals.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// FNV-1a over a byte string. Used to turn parameter names into seed
/// tags and as the checkpoint checksum.
pub fn fnv1a64(bytes: &[u8]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for &b in bytes {
        h ^= b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic random stream derived from a `u64` seed.
#[derive(Clone)]
pub struct SeedStream {
    rng: ChaCha8Rng,
}

impl SeedStream {
    pub fn new(seed: u64) -> Self {
        SeedStream {
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Independent child stream; distinct `tag`s give distinct streams.
    pub fn child(&self, tag: u64) -> Self {
        let mut seed = [0u8; 32];
        seed[..32].copy_from_slice(&self.rng.get_seed());
        // fold the tag into the seed words
        for (i, b) in tag.to_le_bytes().iter().enumerate() {
            seed[i] ^= b.rotate_left(3);
            seed[i + 8] ^= b;
        }
        SeedStream {
            rng: ChaCha8Rng::from_seed(seed),
        }
    }

    pub fn next_u32(&mut self) -> u32 {
        self.rng.next_u32()
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform in [0, 1) with 24 bits of mantissa.
    pub fn uniform_f32(&mut self) -> f32 {
        (self.next_u32() >> 8) as f32 * (1.0 / 16_777_216.0)
    }

    /// Uniform in [0, 1) with 53 bits of mantissa.
    pub fn uniform_f64(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / 9_007_199_254_740_992.0)
    }

    pub fn range_f32(&mut self, lo: f32, hi: f32) -> f32 {
        lo + (hi - lo) * self.uniform_f32()
    }

    pub fn range_f64(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform_f64()
    }

    /// Uniform integer in [0, n). Lemire reduction; deterministic.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        ((self.next_u32() as u64 * n as u64) >> 32) as usize
    }

    pub fn coin(&mut self) -> bool {
        self.next_u32() & 1 == 1
    }

    /// In-place Fisher-Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.below(i + 1);
            items.swap(i, j);
        }
    }

    /// Serializable state: (seed, 64-bit word position).
    pub fn state(&self) -> ([u8; 32], u128) {
        (self.rng.get_seed(), self.rng.get_word_pos())
    }

    pub fn from_state(seed: [u8; 32], word_pos: u128) -> Self {
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_word_pos(word_pos);
        SeedStream { rng }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_stream() {
        let mut a = SeedStream::new(7);
        let mut b = SeedStream::new(7);
        for _ in 0..100 {
            assert_eq!(a.next_u32(), b.next_u32());
        }
    }

    #[test]
    fn child_streams_differ() {
        let root = SeedStream::new(3);
        let mut a = root.child(0);
        let mut b = root.child(1);
        let same = (0..32).all(|_| a.next_u32() == b.next_u32());
        assert!(!same);
    }

    #[test]
    fn state_round_trip() {
        let mut a = SeedStream::new(11);
        for _ in 0..17 {
            a.next_u32();
        }
        let (seed, pos) = a.state();
        let mut b = SeedStream::from_state(seed, pos);
        for _ in 0..50 {
            assert_eq!(a.next_u32(), b.next_u32());
        }
    }

    #[test]
    fn uniform_in_unit_interval() {
        let mut s = SeedStream::new(1);
        for _ in 0..1000 {
            let v = s.uniform_f32();
            assert!((0.0..1.0).contains(&v));
        }
    }

    #[test]
    fn below_bounds() {
        let mut s = SeedStream::new(2);
        for _ in 0..1000 {
            assert!(s.below(7) < 7);
        }
    }

    #[test]
    fn fnv_reference_vectors() {
        // published FNV-1a 64-bit test vectors
        assert_eq!(fnv1a64(b""), 0xcbf2_9ce4_8422_2325);
        assert_eq!(fnv1a64(b"a"), 0xaf63_dc4c_8601_ec8c);
        assert_eq!(fnv1a64(b"foobar"), 0x8594_4171_f739_67e8);
    }
}

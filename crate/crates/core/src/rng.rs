//! Deterministic randomness. Everything that draws numbers goes through
//! [`Rng`], a ChaCha8 stream whose state is exactly (seed, word position),
//! so checkpoints can capture and restore it losslessly.

use rand_chacha::ChaCha8Rng;
use rand_core::{Rng as _, SeedableRng};

/// Snapshot of a stream: enough to rebuild the generator mid-sequence.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RngState {
    pub seed: u64,
    pub word_pos: u128,
}

/// ChaCha8 stream with a stateless normal sampler. Normal draws use
/// Box-Muller and always consume exactly two `u64`s; nothing is cached, so
/// `state()` fully describes the generator.
#[derive(Debug, Clone)]
pub struct Rng {
    inner: ChaCha8Rng,
    seed: u64,
}

impl Rng {
    pub fn seed_from_u64(seed: u64) -> Self {
        Rng {
            inner: ChaCha8Rng::seed_from_u64(seed),
            seed,
        }
    }

    /// Derive an independent stream for a named subsystem. Streams with
    /// different tags never overlap; same (seed, tag) is reproducible.
    pub fn derive(&self, tag: u64) -> Self {
        Rng::seed_from_u64(self.seed ^ tag.wrapping_mul(0x9e37_79b9_7f4a_7c15))
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1) with 53 random mantissa bits.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_in(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Integer in [0, n). Rejection-free modulo is fine here: n is always
    /// tiny (augmentation offsets, dataset indices) relative to 2^64.
    pub fn below(&mut self, n: usize) -> usize {
        debug_assert!(n > 0);
        (self.next_u64() % n as u64) as usize
    }

    /// Standard normal via Box-Muller, two u64 draws, no cached half.
    pub fn normal(&mut self) -> f64 {
        let u1 = 1.0 - self.uniform(); // (0, 1], keeps ln finite
        let u2 = self.uniform();
        (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
    }

    pub fn normal_vec(&mut self, n: usize) -> Vec<f64> {
        (0..n).map(|_| self.normal()).collect()
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.seed,
            word_pos: self.inner.get_word_pos(),
        }
    }

    pub fn restore(state: RngState) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(state.seed);
        inner.set_word_pos(state.word_pos);
        Rng { inner, seed: state.seed }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn restore_resumes_mid_stream() {
        let mut a = Rng::seed_from_u64(7);
        for _ in 0..13 {
            a.normal();
        }
        a.uniform();
        let snap = a.state();
        let tail: Vec<u64> = (0..32).map(|_| a.next_u64()).collect();

        let mut b = Rng::restore(snap);
        let tail2: Vec<u64> = (0..32).map(|_| b.next_u64()).collect();
        assert_eq!(tail, tail2);
    }

    #[test]
    fn normal_consumes_exactly_two_words() {
        let mut a = Rng::seed_from_u64(1);
        a.normal();
        let mut b = Rng::seed_from_u64(1);
        b.next_u64();
        b.next_u64();
        assert_eq!(a.state(), b.state());
    }

    #[test]
    fn normal_moments_roughly_standard() {
        let mut r = Rng::seed_from_u64(42);
        let xs = r.normal_vec(20_000);
        let mean = xs.iter().sum::<f64>() / xs.len() as f64;
        let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / xs.len() as f64;
        assert!(mean.abs() < 0.03, "mean {mean}");
        assert!((var - 1.0).abs() < 0.05, "var {var}");
    }

    #[test]
    fn derive_streams_differ() {
        let root = Rng::seed_from_u64(5);
        let mut a = root.derive(1);
        let mut b = root.derive(2);
        assert_ne!(a.next_u64(), b.next_u64());
    }
}

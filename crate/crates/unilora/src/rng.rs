//! Deterministic random streams with snapshotable cursors.
//!
//! Every stochastic piece of the system (weight init, workload generation,
//! LoRA dropout, synthetic data) draws from a [`SeededRng`]. The cursor
//! (seed + stream position) can be captured and restored bit-exactly, which
//! is what makes trainer pause/resume and cross-runtime migration replayable.

use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Serializable position of a [`SeededRng`] stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngCursor {
    pub seed: u64,
    pub word_pos_hi: u64,
    pub word_pos_lo: u64,
}

/// ChaCha-backed stream that knows its own seed and position.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        SeededRng {
            seed,
            inner: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    /// Derive an independent stream from this seed and a stream label.
    pub fn derive(seed: u64, label: &str) -> Self {
        let tag = crate::fnv1a64(label.as_bytes());
        SeededRng::new(seed ^ tag.wrapping_mul(0x9e3779b97f4a7c15))
    }

    pub fn cursor(&self) -> RngCursor {
        let pos = self.inner.get_word_pos();
        RngCursor {
            seed: self.seed,
            word_pos_hi: (pos >> 64) as u64,
            word_pos_lo: pos as u64,
        }
    }

    pub fn restore(cursor: RngCursor) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(cursor.seed);
        inner.set_word_pos(((cursor.word_pos_hi as u128) << 64) | cursor.word_pos_lo as u128);
        SeededRng {
            seed: cursor.seed,
            inner,
        }
    }

    pub fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    /// Uniform in [0, 1).
    pub fn next_uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 / (1u64 << 53) as f64
    }

    /// Uniform integer in [0, bound). `bound` must be nonzero.
    pub fn next_below(&mut self, bound: u64) -> u64 {
        assert!(bound > 0, "next_below bound must be positive");
        // Modulo bias is irrelevant at the bounds used here (vocab sizes,
        // trace lengths), and determinism is what matters.
        self.next_u64() % bound
    }

    /// Standard normal via Box-Muller (one value per two uniforms, fixed
    /// draw count keeps the cursor arithmetic simple).
    pub fn next_gaussian(&mut self) -> f64 {
        let u1 = loop {
            let u = self.next_uniform();
            if u > 0.0 {
                break u;
            }
        };
        let u2 = self.next_uniform();
        (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
    }

    /// Exponential with the given rate (events per unit time).
    pub fn next_exponential(&mut self, rate: f64) -> f64 {
        assert!(rate > 0.0, "exponential rate must be positive");
        let u = self.next_uniform();
        -(1.0 - u).ln() / rate
    }
}

//! Deterministic random streams.
//!
//! Every stochastic routine in this crate draws from a [`NoiseStream`], a
//! ChaCha12 generator addressed by `(master seed, substream index)`.
//! Replication `r` of an estimator always uses `NoiseStream::substream(seed, r)`,
//! so estimates are exact indexed sums: the same seed gives bit-identical
//! results on every rerun regardless of how replications are scheduled across
//! workers.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha12Rng;
use rand_distr::StandardNormal;

/// A seeded, deterministic random stream.
///
/// Wraps ChaCha12 keyed by the master seed, with the stream (nonce) set to the
/// substream index. Distinct indices give statistically independent streams
/// under the same key.
#[derive(Debug, Clone)]
pub struct NoiseStream {
    rng: ChaCha12Rng,
}

impl NoiseStream {
    /// Stream for a single-path computation: substream 0 of `seed`.
    pub fn master(seed: u64) -> Self {
        Self::substream(seed, 0)
    }

    /// Substream `index` of `master_seed`.
    pub fn substream(master_seed: u64, index: u64) -> Self {
        let mut rng = ChaCha12Rng::seed_from_u64(master_seed);
        rng.set_stream(index.into());
        NoiseStream { rng }
    }

    /// One standard-normal draw.
    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// One draw uniform on [-1, 1).
    pub fn uniform_sym(&mut self) -> f64 {
        2.0 * self.rng.random::<f64>() - 1.0
    }

    /// One draw uniform on [0, 1).
    pub fn uniform01(&mut self) -> f64 {
        self.rng.random::<f64>()
    }
}

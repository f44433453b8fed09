//! Deterministic, stream-separated randomness.
//!
//! Every stochastic component draws from its own ChaCha8 stream, keyed by
//! `(seed, stream id)`. Streams are independent of evaluation order, so
//! corpora, batches, and forecast paths come out bit-identical no matter
//! how the work is scheduled across threads.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Well-known stream domains. Keeps seed derivations from colliding
/// between subsystems that share one user-facing seed.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Domain {
    SynthSeries = 1,
    SynthOracle = 2,
    ModelInit = 3,
    BatchSampling = 4,
    ForecastPath = 5,
    Bootstrap = 6,
}

/// RNG for `(seed, domain, stream)`. Same triple, same draws, always.
pub fn stream_rng(seed: u64, domain: Domain, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    // ChaCha streams are cheap counters; fold the domain into the high bits.
    rng.set_stream(((domain as u64) << 56) ^ stream);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    #[test]
    fn same_triple_same_draws() {
        let a: Vec<f64> = stream_rng(7, Domain::SynthSeries, 3)
            .sample_iter(rand::distributions::Standard)
            .take(8)
            .collect();
        let b: Vec<f64> = stream_rng(7, Domain::SynthSeries, 3)
            .sample_iter(rand::distributions::Standard)
            .take(8)
            .collect();
        assert_eq!(a, b);
    }

    #[test]
    fn streams_are_independent() {
        let a: f64 = stream_rng(7, Domain::SynthSeries, 0).gen();
        let b: f64 = stream_rng(7, Domain::SynthSeries, 1).gen();
        let c: f64 = stream_rng(7, Domain::BatchSampling, 0).gen();
        assert_ne!(a, b);
        assert_ne!(a, c);
    }
}

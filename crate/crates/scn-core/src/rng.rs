//! Seeded, counter-addressable randomness.
//!
//! All randomness flows through ChaCha8, a counter-based generator, split into
//! three named streams (data / init / sampling). Within a stream, callers
//! address disjoint regions by an event counter — episode index, training step
//! — so any point of a run can be regenerated exactly without replaying the
//! draws before it. No OS entropy is ever consulted.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The three independent randomness streams of a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    /// World generation: initial positions and velocities.
    Data = 0,
    /// Parameter initialization.
    Init = 1,
    /// Batch index sampling and probe splitting.
    Sampling = 2,
}

/// Each counter value owns a disjoint 2^36-word region of the stream — far
/// more draws than any single event (episode init, batch sample) performs.
const REGION_BITS: u32 = 36;

/// Counter namespace for the probe train/test split, kept clear of training
/// step counters (which start at 0).
pub const PROBE_SPLIT_COUNTER: u64 = 1 << 33;

/// Generator positioned at the start of `stream`.
pub fn stream_rng(seed: u64, stream: Stream) -> ChaCha8Rng {
    counter_rng(seed, stream, 0)
}

/// Generator positioned at region `counter` of `stream`.
pub fn counter_rng(seed: u64, stream: Stream, counter: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng.set_word_pos((counter as u128) << REGION_BITS);
    rng
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn draws(rng: &mut ChaCha8Rng, n: usize) -> Vec<u64> {
        (0..n).map(|_| rng.random()).collect()
    }

    #[test]
    fn same_coordinates_reproduce_the_sequence() {
        let a = draws(&mut counter_rng(7, Stream::Data, 3), 16);
        let b = draws(&mut counter_rng(7, Stream::Data, 3), 16);
        assert_eq!(a, b);
    }

    #[test]
    fn streams_and_counters_are_independent_axes() {
        let base = draws(&mut counter_rng(7, Stream::Data, 0), 8);
        assert_ne!(base, draws(&mut counter_rng(7, Stream::Init, 0), 8));
        assert_ne!(base, draws(&mut counter_rng(7, Stream::Data, 1), 8));
        assert_ne!(base, draws(&mut counter_rng(8, Stream::Data, 0), 8));
    }

    #[test]
    fn counter_access_is_order_independent() {
        // Reading region 5 directly equals reading it after touching region 4:
        // exactly the property that makes checkpoint resume bit-faithful.
        let direct = draws(&mut counter_rng(42, Stream::Sampling, 5), 32);
        let mut r4 = counter_rng(42, Stream::Sampling, 4);
        let _ = draws(&mut r4, 1000);
        let after = draws(&mut counter_rng(42, Stream::Sampling, 5), 32);
        assert_eq!(direct, after);
    }
}

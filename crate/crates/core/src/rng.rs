//! Seeded random streams.
//!
//! Every unit of stochastic work (a profile particle, a replication) draws from
//! its own ChaCha8 stream. The stream is selected by the 64-bit ChaCha stream
//! id, so work units can run in any order, on any thread, and still see the
//! same numbers.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// The generator used throughout the crate.
pub type RandomSource = ChaCha8Rng;

/// Open stream `stream_id` of the generator keyed by `seed`.
pub fn stream(seed: u64, stream_id: u64) -> RandomSource {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream_id);
    rng
}

/// SplitMix64 finalizer.
pub fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Seed for one replication of one sweep point:
/// `splitmix64(splitmix64(master ^ splitmix64(sweep_index)) ^ replication)`.
pub fn derive_seed(master: u64, sweep_index: u64, replication: u64) -> u64 {
    splitmix64(splitmix64(master ^ splitmix64(sweep_index)) ^ replication)
}

/// Human-readable statement of [`derive_seed`], recorded in run manifests.
pub const SEED_SCHEME: &str = "replication seed = splitmix64(splitmix64(master ^ splitmix64(sweep_index)) ^ replication_index); \
     generator = ChaCha8, stream 0 for the bit sequence and arrivals of a replication; \
     channel profiles use seed splitmix64(master ^ 0x50524f46) with one stream per particle";

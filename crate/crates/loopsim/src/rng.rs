//! Deterministic random streams for reproducible parallel sampling.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Generator for stream `stream` of the run with master seed `master_seed`.
///
/// Sample `i` of a run is drawn from `stream_rng(seed, i)` and therefore
/// depends on `(seed, i)` alone — never on scheduling or worker count.
/// ChaCha provides 2^64 independent streams per seed.
pub fn stream_rng(master_seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    rng.set_stream(stream);
    rng
}

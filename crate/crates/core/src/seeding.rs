use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Independent generator for `(base, stream)`.
pub fn rng_for(base: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(base);
    rng.set_stream(stream);
    rng
}

/// A seed derived from `base` for a named sub-task.
pub fn derive(base: u64, stream: u64) -> u64 {
    rng_for(base, stream).next_u64()
}

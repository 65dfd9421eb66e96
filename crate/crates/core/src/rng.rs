//! Seed fan-out. One root seed feeds every named random stream.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stream {
    Init = 1,
    Data = 2,
    Shuffle = 3,
    Posterior = 4,
    Prior = 5,
    Eval = 6,
}

/// Independent generator for `stream` under the root `seed`.
pub fn stream(seed: u64, stream: Stream) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream as u64);
    rng
}

/// Generator for a sub-task identified by `tags` (query index, sample
/// number, ...) within a stream.
pub fn substream(seed: u64, s: Stream, tags: &[u64]) -> ChaCha8Rng {
    stream(derive_seed(seed, tags), s)
}

/// Mixes `tags` into `seed` with splitmix64 finalization.
pub fn derive_seed(seed: u64, tags: &[u64]) -> u64 {
    tags.iter().fold(splitmix(seed), |acc, &t| splitmix(acc ^ splitmix(t.wrapping_add(0x9E37_79B9_7F4A_7C15))))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normals<R: rand::Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

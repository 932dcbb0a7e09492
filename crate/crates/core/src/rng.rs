//! Named random streams derived from one run seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream names used by the pipeline.
pub const SYNTH: &str = "synth";
pub const INIT: &str = "init";
pub const SHUFFLE: &str = "shuffle";
pub const SPLIT: &str = "split";

/// Independent generator for `name` under `seed`. The same pair always yields
/// the same sequence, and distinct names never share a ChaCha stream.
pub fn stream(seed: u64, name: &str) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(fnv1a(name.as_bytes()));
    rng
}

fn fnv1a(bytes: &[u8]) -> u64 {
    bytes.iter().fold(0xcbf2_9ce4_8422_2325, |h, &b| {
        (h ^ b as u64).wrapping_mul(0x0000_0100_0000_01b3)
    })
}

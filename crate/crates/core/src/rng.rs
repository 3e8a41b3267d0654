//! Counter-keyed random streams.
//!
//! Every stochastic draw in the simulator comes from a generator keyed by a
//! tuple such as `(seed, agent, frame)`, so results never depend on the order
//! in which agents, frames or sweep points are evaluated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Generator for the stream named by `keys` under `seed`.
pub fn keyed(seed: u64, keys: &[u64]) -> ChaCha8Rng {
    let mut h = splitmix(seed);
    for &k in keys {
        h = splitmix(h ^ k);
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Stream domains, so two subsystems with the same numeric keys never collide.
pub mod domain {
    pub const POSE_NOISE: u64 = 1;
    pub const WORLD: u64 = 2;
    pub const RAYS: u64 = 3;
    pub const WEIGHTS: u64 = 4;
    pub const TEST: u64 = 5;
}

//! Counter-based RNG stream assignment: every work unit gets its own ChaCha
//! stream derived from one master seed, so results do not depend on how
//! work is scheduled across threads.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Stream domains keep unrelated uses of the same master seed apart.
pub mod domain {
    pub const SIMULATE: u64 = 1;
    pub const MCMC: u64 = 2;
    pub const EVIDENCE: u64 = 3;
    pub const COMPARE: u64 = 4;
    pub const SMOOTH: u64 = 5;
    pub const GUIDING: u64 = 6;
}

fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// RNG for work unit `index` within `domain`.
pub fn stream(seed: u64, domain: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(mix(seed ^ mix(domain)));
    rng.set_stream(index);
    rng
}

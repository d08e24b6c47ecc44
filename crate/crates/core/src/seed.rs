//! Deterministic seed splitting.
//!
//! Every random stream in a run is derived from the single master seed as
//! `child = mix(master, robot, cycle, tag)`, so results never depend on the
//! order in which independent streams are consumed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub type Rng = ChaCha8Rng;

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    tag.bytes().fold(FNV_OFFSET, |h, b| {
        (h ^ u64::from(b)).wrapping_mul(FNV_PRIME)
    })
}

/// Child seed for `(robot, cycle, tag)` under `master`.
pub fn derive(master: u64, robot: u64, cycle: u64, tag: &str) -> u64 {
    let mut h = splitmix64(master);
    h = splitmix64(h ^ robot);
    h = splitmix64(h ^ cycle.rotate_left(17));
    splitmix64(h ^ fnv1a(tag))
}

/// Child seed of an existing seed, for sub-streams inside one operation.
pub fn child(seed: u64, tag: &str) -> u64 {
    splitmix64(seed ^ fnv1a(tag))
}

pub fn rng(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

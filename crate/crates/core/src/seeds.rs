//! Expansion of one master seed into independent per-component streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// SplitMix64 finalizer.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub master: u64,
    pub model_init: u64,
    pub loader_clf: u64,
    pub loader_gen: u64,
    pub augment: u64,
    pub sampler: u64,
    pub buffer: u64,
    pub init_draw: u64,
    pub attack: u64,
    pub eval: u64,
}

impl SeedPlan {
    pub fn from_master(master: u64) -> Self {
        let s = |i: u64| mix(master ^ mix(i));
        SeedPlan {
            master,
            model_init: s(1),
            loader_clf: s(2),
            loader_gen: s(3),
            augment: s(4),
            sampler: s(5),
            buffer: s(6),
            init_draw: s(7),
            attack: s(8),
            eval: s(9),
        }
    }
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

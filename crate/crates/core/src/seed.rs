//! Seed derivation. Every random stream in a run is derived from one root
//! seed plus a name (and optional indices), so components can be reseeded
//! independently and reproduced in isolation.

use serde::{Deserialize, Serialize};

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a base seed with a list of indices into a new seed.
pub fn mix(seed: u64, parts: &[u64]) -> u64 {
    parts.iter().fold(splitmix64(seed), |acc, &p| splitmix64(acc ^ splitmix64(p)))
}

fn fnv1a(name: &str) -> u64 {
    name.bytes().fold(0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x0100_0000_01b3))
}

/// Named sub-seeds expanded from a root seed.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SeedPlan {
    pub root: u64,
    pub data: u64,
    pub init: u64,
    pub noise: u64,
    pub shuffle: u64,
}

impl SeedPlan {
    pub fn new(root: u64) -> Self {
        Self {
            root,
            data: derive(root, "data"),
            init: derive(root, "init"),
            noise: derive(root, "noise"),
            shuffle: derive(root, "shuffle"),
        }
    }
}

pub fn derive(root: u64, name: &str) -> u64 {
    mix(root, &[fnv1a(name)])
}

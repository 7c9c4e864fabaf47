//! Stateless seed derivation. Every source of randomness in a run is keyed
//! by (base seed, purpose tags), so resuming at any epoch replays the exact
//! same stream without carrying RNG state around.

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E3779B97F4A7C15);
    let mut z = x;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

pub fn derive(base: u64, parts: &[u64]) -> u64 {
    let mut acc = splitmix64(base ^ 0xA076_1D64_78BD_642F);
    for &p in parts {
        acc = splitmix64(acc ^ p.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    }
    acc
}

pub const TAG_INIT: u64 = 1;
pub const TAG_GROW: u64 = 2;
pub const TAG_BATCH: u64 = 3;
pub const TAG_DROPOUT: u64 = 4;
pub const TAG_CANDIDATES: u64 = 5;
pub const TAG_KMEANS: u64 = 6;
pub const TAG_ANCHORS: u64 = 7;
pub const TAG_ISS: u64 = 8;

//! Seed derivation. One top-level seed reproduces a whole experiment; every
//! component (dataset, init, noise, gates, ...) gets its own stream derived
//! from that seed by a stable hash, so adding draws to one component never
//! shifts another.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn splitmix64(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9e3779b97f4a7c15);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d049bb133111eb);
    x ^ (x >> 31)
}

fn fnv1a(tag: &str) -> u64 {
    let mut h = 0xcbf29ce484222325u64;
    for &b in tag.as_bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Derive the sub-seed for a named component.
pub fn split_seed(root: u64, tag: &str) -> u64 {
    splitmix64(root ^ fnv1a(tag))
}

/// Derive a per-item sub-seed (e.g. one per image) inside a named component.
pub fn split_seed_indexed(root: u64, tag: &str, index: u64) -> u64 {
    splitmix64(split_seed(root, tag) ^ splitmix64(index))
}

/// Seeded stream for a named component.
pub fn stream(root: u64, tag: &str) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed(root, tag))
}

/// Seeded stream for one item of a named component.
pub fn stream_indexed(root: u64, tag: &str, index: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(split_seed_indexed(root, tag, index))
}

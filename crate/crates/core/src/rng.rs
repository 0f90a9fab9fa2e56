//! Deterministic RNG streams. Every random decision in the pipeline draws
//! from a ChaCha8 stream derived from (seed, label), so independent
//! subsystems never share or perturb each other's randomness.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Platform-independent stream derivation: a fixed 64-bit mix of the seed
/// with a label hash (FNV-1a over the label bytes).
pub fn stream(seed: u64, label: &str) -> ChaCha8Rng {
    let mut h: u64 = 0xcbf29ce484222325;
    for b in label.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    // splitmix64 finalizer over seed ^ label hash
    let mut z = seed ^ h;
    z = z.wrapping_add(0x9e3779b97f4a7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58476d1ce4e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d049bb133111eb);
    z ^= z >> 31;
    ChaCha8Rng::seed_from_u64(z)
}

/// Stream keyed by a label plus an index (per-run, per-cell seeds).
pub fn indexed_stream(seed: u64, label: &str, index: u64) -> ChaCha8Rng {
    stream(seed, &format!("{label}/{index}"))
}


/// A derived seed for an independent child job, kept in the i64-safe range
/// so it survives TOML round trips.
pub fn derive_seed(seed: u64, label: &str) -> u64 {
    use rand::Rng;
    stream(seed, label).gen::<u64>() & 0x7fff_ffff_ffff_ffff
}

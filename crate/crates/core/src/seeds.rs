//! Deterministic seed derivation. Every stochastic component draws its seed
//! from the master seed plus a path of labels, so parallel scheduling and
//! worker counts cannot change results.

use sha2::{Digest, Sha256};

/// Derive a child seed from a master seed and a label path such as
/// `&["trial", "3", "repeat", "7"]`. Stable across platforms and runs.
pub fn derive_seed(master: u64, path: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for part in path {
        hasher.update([0xff]);
        hasher.update(part.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

/// Convenience for numeric path segments.
pub fn derive_seed_idx(master: u64, label: &str, idx: u64) -> u64 {
    derive_seed(master, &[label, &idx.to_string()])
}

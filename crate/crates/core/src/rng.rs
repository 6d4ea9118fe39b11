//! Seed derivation and identifier generation.
//!
//! Every stochastic step in the crate draws from a [`ChaCha8Rng`] whose seed is
//! derived from a master seed and a list of labels, so results never depend on
//! iteration order or worker count.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

const ALPHANUMERIC: &[u8] = b"abcdefghijklmnopqrstuvwxyz0123456789";

/// Length of randomly generated component names and process suffixes.
pub const IDENTIFIER_LEN: usize = 20;

/// Hashes `master` together with `labels` into a fresh 64-bit seed.
pub fn derive_seed(master: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for label in labels {
        hasher.update((label.len() as u64).to_le_bytes());
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn stream(seed: u64) -> StreamRng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn derived_stream(master: u64, labels: &[&str]) -> StreamRng {
    stream(derive_seed(master, labels))
}

/// Lowercase alphanumeric string of `len` characters.
pub fn random_identifier<R: Rng + ?Sized>(rng: &mut R, len: usize) -> String {
    (0..len)
        .map(|_| ALPHANUMERIC[rng.random_range(0..ALPHANUMERIC.len())] as char)
        .collect()
}

//! Named random sub-streams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Derives a child seed from `(seed, stream, index)`.
///
/// Different stream names never share state, so e.g. the batching stream is
/// unaffected by how many draws the generation stream made.
pub fn derive_seed(seed: u64, stream: &str, index: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update((stream.len() as u64).to_le_bytes());
    h.update(stream.as_bytes());
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

pub fn rng_from(seed: u64) -> Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn stream_rng(seed: u64, stream: &str, index: u64) -> Rng {
    rng_from(derive_seed(seed, stream, index))
}

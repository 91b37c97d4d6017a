//! Named random substreams derived from one root seed.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type Rng = ChaCha8Rng;

/// Deterministic generator for `(root, name)`; distinct names give
/// independent streams.
pub fn substream(root: u64, name: &str) -> Rng {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    let digest: [u8; 32] = h.finalize().into();
    Rng::from_seed(digest)
}

/// 64-bit seed derived from `(root, name)`.
pub fn derive_seed(root: u64, name: &str) -> u64 {
    use rand::RngCore;
    substream(root, name).next_u64()
}

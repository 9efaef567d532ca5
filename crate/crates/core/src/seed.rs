//! Named random streams derived from one root seed.
//!
//! Each consumer asks for a stream by name; the stream's seed is a hash of
//! the root seed and the name, so introducing a new consumer never shifts the
//! numbers any existing consumer sees.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

pub type StreamRng = ChaCha8Rng;

pub fn derive_seed(root: u64, name: &str) -> u64 {
    let digest = stream_key(root, name);
    u64::from_le_bytes(digest[..8].try_into().unwrap())
}

pub fn stream(root: u64, name: &str) -> StreamRng {
    StreamRng::from_seed(stream_key(root, name))
}

fn stream_key(root: u64, name: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(root.to_le_bytes());
    h.update(name.as_bytes());
    h.finalize().into()
}

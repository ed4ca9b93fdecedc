//! Deterministic randomness: one master seed, named substreams.
//!
//! Every random decision in the pipeline draws from a stream derived from
//! (master seed, stream name[, index]) via SHA-256, so adding a consumer of
//! randomness in one place never shifts the draws of another, and per-user
//! streams are independent of iteration order.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// Stream names used across the crate. Centralised so collisions are visible.
pub mod stream {
    pub const DATA: &str = "data";
    pub const INIT: &str = "init";
    pub const PRETRAIN: &str = "pretrain";
    pub const TUNE: &str = "tune";
    pub const NEGATIVES: &str = "negatives";
    pub const VALID_NEGATIVES: &str = "valid-negatives";
    pub const EVAL_NEGATIVES: &str = "eval-negatives";
}

pub fn substream(master: u64, name: &str) -> ChaCha8Rng {
    substream_indexed(master, name, 0)
}

/// Derive an independent RNG for (master, name, index); `index` is typically
/// a user id or an epoch number.
pub fn substream_indexed(master: u64, name: &str, index: u64) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(name.as_bytes());
    h.update([0x1f]);
    h.update(index.to_le_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Per-tensor init stream: keyed by parameter path so that reordering
/// construction code cannot silently change initial weights.
pub fn init_stream(master: u64, tensor_path: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update([0x1f]);
    h.update(stream::INIT.as_bytes());
    h.update([0x1f]);
    h.update(tensor_path.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

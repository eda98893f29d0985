//! Seed derivation. Every random stream in the crate descends from one
//! 64-bit root seed through named splits, so adding a new consumer never
//! perturbs existing streams.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use sha2::{Digest, Sha256};

/// A node in the seed tree.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SeedTree {
    seed: u64,
}

impl SeedTree {
    pub fn new(seed: u64) -> Self {
        Self { seed }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Child node for `name`.
    pub fn split(&self, name: &str) -> SeedTree {
        let mut hasher = Sha256::new();
        hasher.update(self.seed.to_le_bytes());
        hasher.update(name.as_bytes());
        let digest = hasher.finalize();
        let mut bytes = [0u8; 8];
        bytes.copy_from_slice(&digest[..8]);
        SeedTree {
            seed: u64::from_le_bytes(bytes),
        }
    }

    /// Child node for an indexed item (epoch, cluster, worker...).
    pub fn split_index(&self, name: &str, index: u64) -> SeedTree {
        self.split(&format!("{name}#{index}"))
    }

    pub fn rng(&self, name: &str) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.split(name).seed)
    }
}

/// Hex SHA-256 of a byte buffer, used for config/checkpoint/vocab hashes.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

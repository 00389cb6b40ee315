//! Seed derivation, portable random streams and atomic file output.
//!
//! Every random quantity in the pipeline is drawn from a [`ChaCha20Rng`]
//! seeded with a 64-bit value. Derived seeds come from SHA-256 over a
//! length-prefixed encoding of their parts, so they do not depend on
//! platform, iteration order or thread scheduling.

use std::io::{self, Write};
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use sha2::{Digest, Sha256};

/// One component of a derived seed.
#[derive(Debug, Clone, Copy)]
pub enum SeedPart<'a> {
    Int(u64),
    Str(&'a str),
}

/// Hashes `parts` into a 64-bit seed (first eight bytes of SHA-256, little endian).
pub fn stable_hash(parts: &[SeedPart<'_>]) -> u64 {
    let mut hasher = Sha256::new();
    for part in parts {
        match part {
            SeedPart::Int(v) => {
                hasher.update([0u8]);
                hasher.update(v.to_le_bytes());
            }
            SeedPart::Str(s) => {
                hasher.update([1u8]);
                hasher.update((s.len() as u64).to_le_bytes());
                hasher.update(s.as_bytes());
            }
        }
    }
    let digest = hasher.finalize();
    let mut bytes = [0u8; 8];
    bytes.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(bytes)
}

/// Seed for the noise draw of synthetic `index` of real image `real_id`.
pub fn noise_seed(master_seed: u64, real_id: &str, index: usize) -> u64 {
    stable_hash(&[
        SeedPart::Str("noise"),
        SeedPart::Int(master_seed),
        SeedPart::Str(real_id),
        SeedPart::Int(index as u64),
    ])
}

/// Seed passed to the image backend for synthetic `index` of `real_id`.
pub fn generation_seed(master_seed: u64, real_id: &str, index: usize) -> u64 {
    stable_hash(&[
        SeedPart::Str("generation"),
        SeedPart::Int(master_seed),
        SeedPart::Str(real_id),
        SeedPart::Int(index as u64),
    ])
}

pub fn rng(seed: u64) -> ChaCha20Rng {
    ChaCha20Rng::seed_from_u64(seed)
}

/// Hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Writes `contents` to `path` through a temporary file in the same
/// directory followed by a rename.
pub fn atomic_write(path: &Path, contents: &[u8]) -> io::Result<()> {
    let dir = match path.parent() {
        Some(p) if !p.as_os_str().is_empty() => p,
        _ => Path::new("."),
    };
    let mut tmp = tempfile::NamedTempFile::new_in(dir)?;
    tmp.write_all(contents)?;
    tmp.as_file().sync_all()?;
    tmp.persist(path).map_err(|e| e.error)?;
    Ok(())
}

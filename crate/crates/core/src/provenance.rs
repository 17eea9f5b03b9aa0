//! Content hashes that tie artifacts back to the configuration that made
//! them.

use serde::Serialize;
use sha2::{Digest, Sha256};

use crate::error::Result;

/// SHA-256 of the canonical JSON encoding of `value`, as 64-bit integer
/// (first eight digest bytes, little endian).
pub fn hash_u64<T: Serialize + ?Sized>(value: &T) -> Result<u64> {
    let bytes = serde_json::to_vec(value)?;
    Ok(digest_u64(&bytes))
}

/// SHA-256 of raw bytes folded to 64 bits.
pub fn digest_u64(bytes: &[u8]) -> u64 {
    let digest = Sha256::digest(bytes);
    let mut head = [0u8; 8];
    head.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(head)
}

/// Sixteen lowercase hex digits, the form embedded in text artifacts.
pub fn hex(hash: u64) -> String {
    format!("{hash:016x}")
}

/// [`hash_u64`] rendered with [`hex`].
pub fn config_hash<T: Serialize + ?Sized>(value: &T) -> Result<String> {
    Ok(hex(hash_u64(value)?))
}

//! Small cross-cutting helpers: stable seed derivation and content digests.
//!
//! Every randomized stage of the pipeline draws from its own ChaCha stream whose
//! seed is derived here. Deriving seeds by hashing (root seed, label path) keeps
//! independent stages decorrelated and makes every run reproducible from a single
//! root seed, regardless of thread scheduling or stage order.

use sha2::{Digest, Sha256};

/// Derives a child seed from a root seed and a label path.
///
/// The labels are joined with a 0x1f separator so that ("ab","c") and ("a","bc")
/// cannot collide. The result is the first eight bytes (little-endian) of
/// SHA-256 over the root seed and the joined labels.
pub fn derive_seed(root: u64, labels: &[&str]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(root.to_le_bytes());
    for label in labels {
        hasher.update([0x1f]);
        hasher.update(label.as_bytes());
    }
    let digest = hasher.finalize();
    u64::from_le_bytes(digest[..8].try_into().expect("digest is at least 8 bytes"))
}

/// Hex-encoded SHA-256 of a UTF-8 string. Used to key completion fixtures by
/// prompt and to checksum serialized models.
pub fn sha256_hex(text: &str) -> String {
    let digest = Sha256::digest(text.as_bytes());
    let mut out = String::with_capacity(64);
    for byte in digest {
        out.push_str(&format!("{byte:02x}"));
    }
    out
}

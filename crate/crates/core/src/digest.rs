//! Content hashing helpers.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Lowercase hex SHA-256 of `bytes`.
pub fn sha256_hex(bytes: impl AsRef<[u8]>) -> String {
    hex::encode(Sha256::digest(bytes.as_ref()))
}

/// Canonical JSON text: object keys sorted, no insignificant whitespace,
/// string contents untouched.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    // serde_json's default `Map` is a BTreeMap, so re-serializing through
    // `Value` yields sorted keys at every depth.
    let value = serde_json::to_value(value)?;
    serde_json::to_string(&value)
}

/// SHA-256 over the canonical JSON form of `value`.
pub fn canonical_digest<T: Serialize + ?Sized>(value: &T) -> serde_json::Result<String> {
    Ok(sha256_hex(canonical_json(value)?))
}

//! Canonical JSON and hashing helpers shared by snapshots and traces.

use serde::Serialize;
use sha2::{Digest, Sha256};

/// Serializes through `serde_json::Value`, whose object maps keep keys
/// sorted, so the output is independent of struct field order.
pub fn canonical_json<T: Serialize + ?Sized>(value: &T) -> String {
    let v = serde_json::to_value(value).expect("value serializes to JSON");
    serde_json::to_string(&v).expect("JSON value serializes")
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

pub fn canonical_hash<T: Serialize + ?Sized>(value: &T) -> String {
    sha256_hex(canonical_json(value).as_bytes())
}

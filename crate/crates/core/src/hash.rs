use serde::Serialize;
use sha2::{Digest, Sha256};

/// SHA-256 of the compact JSON encoding of `value`, hex encoded.
pub fn config_hash<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("config types always serialize");
    hex::encode(Sha256::digest(&bytes))
}

/// SHA-256 of raw bytes, hex encoded.
pub fn bytes_hash(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

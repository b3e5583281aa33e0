//! Few-shot symbol detection and transcription for ciphered manuscript lines.

pub mod bitmap;
pub mod checkpoint;
pub mod config;
pub mod datagen;
pub mod decoder;
pub mod detector;
pub mod error;
pub mod geometry;
pub mod inference;
pub mod metrics;
pub mod numerics;
pub mod preprocess;
pub mod training;

pub use error::{Error, Result};

/// Hex SHA-256 of a value's JSON serialization.
pub fn config_hash<T: serde::Serialize>(value: &T) -> String {
    use sha2::{Digest, Sha256};
    let json = serde_json::to_vec(value).expect("config serializes");
    Sha256::digest(&json)
        .iter()
        .map(|b| format!("{b:02x}"))
        .collect()
}

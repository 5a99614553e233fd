//! Core library for a synthetic-biography knowledge testbed.
//!
//! The pipeline is: generate a deterministic corpus of fictional biography
//! documents ([`corpus`]), derive question-answering tasks over the same
//! population ([`tasks`]), tokenize everything with a closed word-level
//! vocabulary ([`tokenizer`]), train a small decoder-only transformer from
//! scratch ([`model`], [`train`]), and score generations against exact
//! oracles and analytic guessing baselines ([`eval`]).
//!
//! Everything is seed-deterministic: the same configuration and seed
//! reproduce byte-identical artifacts.

pub mod corpus;
pub mod error;
pub mod eval;
pub mod linalg;
pub mod model;
pub mod rng;
pub mod tasks;
pub mod tokenizer;
pub mod train;

pub use error::{Error, Result};

/// Lowercase hex SHA-256 of a byte slice; used for artifact and data-file
/// fingerprints in run manifests and checkpoints.
pub fn sha256_hex(bytes: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    hasher.update(bytes);
    let digest = hasher.finalize();
    let mut out = String::with_capacity(64);
    for byte in digest {
        use std::fmt::Write;
        let _ = write!(out, "{byte:02x}");
    }
    out
}

//! Span-based compositional data augmentation for parallel corpora.
//!
//! The pipeline: load or generate a corpus ([`corpus`]), extract input-span
//! to output-fragment alignments ([`align`]), infer word equivalence classes
//! ([`cluster`]), enumerate substitutable spans ([`spans`]), synthesize new
//! examples by legality-checked span substitution ([`subst`]), and
//! optionally learn *which* substitutions to make by training a
//! Gumbel-softmax policy against a downstream model's loss ([`augmenter`],
//! [`models`], [`train`]).
//!
//! All randomness flows from explicit seeds; every operation is
//! deterministic given its inputs.

pub mod align;
pub mod augmenter;
pub mod autodiff;
pub mod cluster;
pub mod config;
pub mod corpus;
pub mod models;
pub mod spans;
pub mod subst;
pub mod train;

use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: {msg}")]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },
    #[error("{0}")]
    Validation(String),
    #[error("unknown token {0:?}")]
    UnknownToken(String),
    #[error("checkpoint was built against a different span inventory (hash {found} != {expected})")]
    InventoryMismatch { expected: String, found: String },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn parse(path: impl Into<PathBuf>, line: usize, msg: impl Into<String>) -> Self {
        Error::Parse { path: path.into(), line, msg: msg.into() }
    }
}

/// Independent RNG stream `stream` under a master `seed`. The same
/// (seed, stream) pair always yields the same generator, and distinct
/// streams are decorrelated by a splitmix scramble.
pub fn derive_rng(seed: u64, stream: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    let mut z = seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    rand_chacha::ChaCha8Rng::seed_from_u64(z ^ (z >> 31))
}

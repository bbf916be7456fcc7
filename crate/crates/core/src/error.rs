//! Error types shared across the crate.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    /// A kernel specification violates its invariants (non-positive variance
    /// or length scale).
    #[error("invalid kernel spec: {0}")]
    InvalidKernel(String),

    /// An input value is outside the domain of the requested operation
    /// (e.g. negative time under a Wiener kernel).
    #[error("domain error: {0}")]
    Domain(String),

    /// The inducing gram matrix could not be factored even after jitter
    /// escalation.
    #[error("singular kernel matrix for {kernel}: {detail}")]
    SingularKernel { kernel: String, detail: String },

    /// The preprocessing pipeline produced an empty result.
    #[error("pipeline error: {0}")]
    Pipeline(String),

    /// A caller-supplied argument is inconsistent with the data.
    #[error("argument error: {0}")]
    Argument(String),

    /// A numeric failure inside the inference engine (non-finite values,
    /// loss of negative definiteness).
    #[error("numeric error: {0}")]
    Numeric(String),

    /// Requested word is not in the vocabulary.
    #[error("unknown word {word:?}; near matches: {near:?}")]
    UnknownWord { word: String, near: Vec<String> },

    #[error("io error: {0}")]
    Io(#[from] std::io::Error),

    /// A persisted file does not start with the expected magic bytes.
    #[error("bad magic bytes: expected {expected:?}")]
    BadMagic { expected: &'static str },

    /// A persisted file has an unsupported format version.
    #[error("format version mismatch: found {found}, expected {expected}")]
    VersionMismatch { found: u32, expected: u32 },

    /// A persisted file ended before all declared payloads were read.
    #[error("truncated file")]
    Truncated,

    /// A checkpoint does not belong to the corpus it is being used with.
    #[error("corpus fingerprint mismatch: checkpoint {checkpoint:#018x}, corpus {corpus:#018x}")]
    FingerprintMismatch { checkpoint: u64, corpus: u64 },

    #[error("config error: {0}")]
    Config(String),
}

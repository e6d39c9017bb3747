use thiserror::Error;

/// Errors produced anywhere in the engine.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {left_rows}x{left_cols} vs {right_rows}x{right_cols}")]
    ShapeMismatch {
        op: &'static str,
        left_rows: usize,
        left_cols: usize,
        right_rows: usize,
        right_cols: usize,
    },

    #[error("invalid matrix data: expected {expected} entries, got {actual}")]
    InvalidData { expected: usize, actual: usize },

    #[error("rank {rank} out of range 1..={max}")]
    RankOutOfRange { rank: usize, max: usize },

    #[error("{what} did not converge within {iterations} iterations")]
    NonConvergence { what: &'static str, iterations: usize },

    #[error("symmetric adapter requires a square base matrix, got {rows}x{cols} for {name}")]
    NonSquare { name: String, rows: usize, cols: usize },

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("loss node must be 1x1, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("training diverged at step {step}: loss = {loss}")]
    Divergence { step: usize, loss: f64 },

    #[error("frozen weights changed during training: fingerprint {before:016x} -> {after:016x}")]
    FrozenWeightsChanged { before: u64, after: u64 },

    #[error("model has no adapters attached")]
    NoAdapters,

    #[error("unknown layer {0}")]
    UnknownLayer(String),

    #[error("token {token} out of vocabulary of size {vocab_size}")]
    OutOfVocab { token: usize, vocab_size: usize },

    #[error("sequence length {len} exceeds maximum {max}")]
    SequenceTooLong { len: usize, max: usize },

    #[error("missing parameter {0}")]
    MissingParameter(String),

    #[error("base fingerprint mismatch: checkpoint {expected:016x}, model {actual:016x}")]
    FingerprintMismatch { expected: u64, actual: u64 },

    #[error("corrupt checkpoint ({section}): {detail}")]
    CorruptFile { section: &'static str, detail: String },

    #[error("comparison row {task} is missing the {arm} arm")]
    MissingArm { task: String, arm: &'static str },

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },

    #[error("schema error at line {line}: {message}")]
    Schema { line: usize, message: String },

    #[error("invalid config: {0}")]
    Config(String),

    #[error("empty corpus")]
    EmptyCorpus,

    #[error("sequence length {len} exceeds max_positions {max}")]
    LengthOverflow { len: usize, max: usize },

    #[error("token id {id} out of range for vocabulary of size {vocab_size}")]
    TokenOutOfRange { id: u32, vocab_size: usize },

    #[error("virtual token {index} out of range for prompt of length {len}")]
    VirtualOutOfRange { index: usize, len: usize },

    #[error("loss mask selects no positions")]
    EmptyMask,

    #[error("non-finite gradient in tensor {0}")]
    NonFiniteGradient(String),

    #[error("training diverged at step {step} (loss {loss})")]
    Diverged { step: usize, loss: f64 },

    #[error("no lexicon entry for relation {0:?}")]
    MissingRelation(String),

    #[error("label {0:?} is not in the label universe")]
    UnknownLabel(String),

    #[error("target format {0} requires a binary-relation lexicon")]
    FormatNotApplicable(&'static str),

    #[error("misaligned documents: {0}")]
    Misaligned(String),

    #[error("checkpoint mismatch: {0}")]
    CheckpointMismatch(String),

    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

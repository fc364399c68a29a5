use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{op}: dimension mismatch between {left:?} and {right:?}")]
    Dimension {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} elements")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("softmax row {row} has no allowed entries")]
    DegenerateRow { row: usize },

    #[error("non-finite value in {0}")]
    NonFinite(String),

    #[error("position {pos} is not after last stored position {last}")]
    Ordering { pos: usize, last: usize },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error("checkpoint version {found} unsupported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("checkpoint config hash does not match model configuration")]
    ConfigHash,

    #[error("unknown array `{0}`")]
    UnknownArray(String),

    #[error("mixer mode {0} is not available for this model")]
    UnknownMode(String),

    #[error("no out-of-window tokens: sequence length {len} <= sinks + window ({span})")]
    EmptyReport { len: usize, span: usize },

    #[error("corpus: {0}")]
    Corpus(String),

    #[error("empty input: {0}")]
    Empty(&'static str),

    #[error("token id {token} out of range for vocabulary of {vocab}")]
    Token { token: usize, vocab: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, left: &[usize], right: &[usize]) -> Self {
        Error::Dimension {
            op,
            left: left.to_vec(),
            right: right.to_vec(),
        }
    }
}

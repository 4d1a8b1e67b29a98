use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("invalid input: {0}")]
    InvalidInput(String),

    #[error("unsupported element: Z = {0}")]
    UnsupportedElement(u32),

    #[error("requested token dimension {requested} exceeds achievable rank {rank}")]
    RankExceeded { requested: usize, rank: usize },

    #[error("cannot decode a zero token vector")]
    ZeroToken,

    #[error("configuration error: {0}")]
    Config(String),

    #[error("non-finite activations in {0}")]
    NonFinite(String),

    #[error("sampler state became non-finite at step {0}")]
    SamplerDiverged(usize),

    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },

    #[error("empty corpus")]
    EmptyCorpus,

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

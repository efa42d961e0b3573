use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    Shape {
        op: &'static str,
        expected: String,
        got: String,
    },

    #[error("empty matrix passed to {0}")]
    Empty(&'static str),

    #[error("row {row} is fully masked; softmax undefined")]
    FullyMaskedRow { row: usize },

    #[error("non-finite value in {what}{}", ctx.as_ref().map(|c| format!(" ({c})")).unwrap_or_default())]
    NonFinite {
        what: &'static str,
        ctx: Option<String>,
    },

    #[error("zero-norm vector passed to {0}; cosine discrepancy undefined")]
    ZeroNorm(&'static str),

    #[error("configuration error: {0}")]
    Config(String),

    #[error("{path}: format error at byte {offset}: {msg}")]
    Format {
        path: String,
        offset: u64,
        msg: String,
    },

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no supervision: ground truth has no matches and no unmatched points")]
    NoSupervision,

    #[error("training aborted at step {step}: non-finite loss")]
    NonFiniteLoss { step: usize },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn config(msg: impl Into<String>) -> Self {
        Error::Config(msg.into())
    }
}

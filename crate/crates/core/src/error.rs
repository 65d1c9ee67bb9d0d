use std::path::PathBuf;

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violated: {0}")]
    Contract(String),

    #[error("numeric error: {0}")]
    Numeric(String),

    #[error("vocabulary error: {0}")]
    Vocabulary(String),

    /// Tag string that does not fit the BIO/BIOES grammar.
    #[error("scheme error{}: invalid tag {tag:?}", line.map(|l| format!(" at line {l}")).unwrap_or_default())]
    Scheme { tag: String, line: Option<usize> },

    #[error("parse error in {}:{line}: {msg}", path.display())]
    Parse {
        path: PathBuf,
        line: usize,
        msg: String,
    },

    #[error("format error at line {line}: {msg}")]
    Format { line: usize, msg: String },

    #[error("corrupt checkpoint ({field}): {msg}")]
    CorruptCheckpoint { field: String, msg: String },

    #[error("no feasible tag sequence under the transition mask")]
    Infeasible,

    #[error("instance too large for enumeration: {0} sequences")]
    TooLarge(u128),

    #[error("sequences misaligned at sentence {sentence}: {msg}")]
    Alignment { sentence: usize, msg: String },

    #[error("config error: {0}")]
    Config(String),

    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Short machine-readable kind, used by the CLI's single-line errors.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Dimension { .. } => "dimension",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Numeric(_) => "numeric",
            Error::Vocabulary(_) => "vocabulary",
            Error::Scheme { .. } => "scheme",
            Error::Parse { .. } => "parse",
            Error::Format { .. } => "format",
            Error::CorruptCheckpoint { .. } => "corrupt-checkpoint",
            Error::Infeasible => "infeasible",
            Error::TooLarge(_) => "too-large",
            Error::Alignment { .. } => "alignment",
            Error::Config(_) => "config",
            Error::Io(_) => "io",
            Error::Json(_) => "json",
        }
    }
}

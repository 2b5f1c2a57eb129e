use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("dimension mismatch in {op}: {lhs:?} vs {rhs:?}")]
    Dimension {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("invalid shape {shape:?} for {len} values")]
    Shape { shape: Vec<usize>, len: usize },

    #[error("non-finite value in {0}")]
    NonFinite(&'static str),

    #[error("refocus parameters do not match encoder: {0}")]
    RefocusShape(String),

    #[error("degenerate embedding: zero norm")]
    DegenerateEmbedding,

    #[error("unknown class {0}")]
    UnknownLabel(usize),

    #[error("class coverage: {0}")]
    Coverage(String),

    #[error("configuration: {0}")]
    Config(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("input: {0}")]
    Input(String),

    #[error("checkpoint format: {0}")]
    Format(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub(crate) fn dim(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Dimension {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    /// Numeric failures get their own process exit code in the CLI.
    pub fn is_numeric(&self) -> bool {
        matches!(self, Error::NonFinite(_) | Error::DegenerateEmbedding)
    }
}

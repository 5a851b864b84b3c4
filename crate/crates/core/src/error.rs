use std::path::PathBuf;

/// Errors produced anywhere in the toolkit.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    /// A distance was asked of inputs where it is undefined (zero vectors for cosine).
    #[error("degenerate input: {0}")]
    DegenerateInput(String),

    /// The latent normalization constant vanished.
    #[error("degenerate normalization: mean pairwise feature distance {0:e} is below 1e-12")]
    DegenerateNormalization(f64),

    #[error("unsupported action: {0}")]
    UnsupportedAction(String),

    #[error("unsupported: {0}")]
    Unsupported(String),

    #[error("format error at byte {offset}: {message}")]
    Format { offset: u64, message: String },

    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("{path}: {source}")]
    Json {
        path: PathBuf,
        #[source]
        source: serde_json::Error,
    },

    #[error("csv: {0}")]
    Csv(#[from] csv::Error),

    /// An error raised while evaluating one (sample, group element) pair.
    #[error("sample {sample}, element {element}: {source}")]
    AtPair {
        sample: usize,
        element: usize,
        #[source]
        source: Box<Error>,
    },
}

impl Error {
    pub(crate) fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }

    pub(crate) fn format(offset: u64, msg: impl Into<String>) -> Self {
        Error::Format {
            offset,
            message: msg.into(),
        }
    }

    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn at_pair(self, sample: usize, element: usize) -> Self {
        match self {
            // keep the innermost location
            e @ Error::AtPair { .. } => e,
            e => Error::AtPair {
                sample,
                element,
                source: Box::new(e),
            },
        }
    }

    /// The error with any (sample, element) context peeled off.
    pub fn root(&self) -> &Error {
        match self {
            Error::AtPair { source, .. } => source.root(),
            e => e,
        }
    }

    /// True for the numeric-degeneracy family (zero norms, vanishing normalization).
    pub fn is_degenerate(&self) -> bool {
        matches!(
            self.root(),
            Error::DegenerateInput(_) | Error::DegenerateNormalization(_)
        )
    }
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

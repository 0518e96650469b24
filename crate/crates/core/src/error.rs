use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("invalid network spec:\n  - {}", .0.join("\n  - "))]
    InvalidSpec(Vec<String>),

    #[error("unknown node `{0}`")]
    UnknownNode(String),

    #[error("invalid tap `{id}`: {reason}")]
    InvalidTap { id: String, reason: String },

    #[error("infeasible pruning target: {0}")]
    Infeasible(String),

    #[error("label {label} out of range for {classes} classes")]
    Label { label: usize, classes: usize },

    #[error("empty dataset")]
    EmptyDataset,

    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),

    #[error("malformed {what}: {detail}")]
    Format { what: &'static str, detail: String },

    #[error("checkpoint version {found} is not supported (expected {expected})")]
    Version { found: u32, expected: u32 },

    #[error("I/O error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub(crate) fn io(path: impl AsRef<std::path::Path>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.as_ref().display().to_string(),
            source,
        }
    }

    pub(crate) fn format(what: &'static str, detail: impl Into<String>) -> Self {
        Error::Format {
            what,
            detail: detail.into(),
        }
    }
}

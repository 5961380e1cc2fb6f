use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("shape error in {op}: {lhs:?} vs {rhs:?}")]
    Shape {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },

    #[error("domain error: {0}")]
    Domain(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("config error: {0}")]
    Config(String),

    #[error("format error: {0}")]
    Format(String),

    #[error("unsupported image format (magic bytes {magic})")]
    UnsupportedFormat { magic: String },

    #[error("manifest error at line {line}: {msg}")]
    Manifest { line: usize, msg: String },

    #[error("class {class} has {count} samples, need at least {need}")]
    SmallClass { class: usize, count: usize, need: usize },

    #[error("perplexity search failed at point {point}: entropy {entropy:.6} bits, target {target:.6}")]
    Perplexity { point: usize, entropy: f64, target: f64 },

    #[error("non-finite values: {0}")]
    NonFinite(String),

    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
}

impl Error {
    pub fn shape(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Self {
        Error::Shape {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Short machine-readable tag used in CLI error lines.
    pub fn kind(&self) -> &'static str {
        match self {
            Error::Shape { .. } => "shape",
            Error::Domain(_) => "domain",
            Error::Contract(_) => "contract",
            Error::Config(_) => "config",
            Error::Format(_) => "format",
            Error::UnsupportedFormat { .. } => "unsupported_format",
            Error::Manifest { .. } => "manifest",
            Error::SmallClass { .. } => "small_class",
            Error::Perplexity { .. } => "perplexity",
            Error::NonFinite(_) => "non_finite",
            Error::Io { .. } => "io",
            Error::Json(_) => "json",
        }
    }
}

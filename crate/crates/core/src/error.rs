use thiserror::Error;

/// Crate-wide error type.
///
/// `Shape`, `Config` and `Format` variants are validation failures (bad
/// inputs, bad files); `NonFinite` and `Numerical` indicate a runtime or
/// numerical failure. The CLI maps the former to exit code 1 and the latter
/// to exit code 2.
#[derive(Debug, Error)]
pub enum Error {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },

    #[error("non-finite value ({value}) at flat index {index} in {op}")]
    NonFinite {
        op: &'static str,
        index: usize,
        value: f64,
    },

    #[error("numerical failure in {op}: {detail}")]
    Numerical { op: &'static str, detail: String },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("{context}: {source}")]
    Io {
        context: String,
        #[source]
        source: std::io::Error,
    },

    #[error("bad file format: {0}")]
    Format(String),

    #[error("image error: {0}")]
    Image(#[from] image::ImageError),
}

impl Error {
    pub fn shape(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Shape {
            op,
            detail: detail.into(),
        }
    }

    pub fn numerical(op: &'static str, detail: impl Into<String>) -> Self {
        Error::Numerical {
            op,
            detail: detail.into(),
        }
    }

    pub fn io(context: impl Into<String>, source: std::io::Error) -> Self {
        Error::Io {
            context: context.into(),
            source,
        }
    }

    /// True for errors caused by invalid inputs or files rather than by a
    /// numerical failure at runtime.
    pub fn is_validation(&self) -> bool {
        matches!(
            self,
            Error::Shape { .. } | Error::Config(..) | Error::Format(..) | Error::Image(..)
        )
    }
}

pub type Result<T> = std::result::Result<T, Error>;

use std::path::PathBuf;

/// Crate-wide error type. Variants map onto the CLI's exit-code categories:
/// `Config`/`Input` are caller mistakes, `Numeric` is a runtime math failure
/// (non-finite values, degenerate geometry), `Format`/`Io` are file problems.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("config: {0}")]
    Config(String),

    #[error("input: {0}")]
    Input(String),

    #[error("numeric: {0}")]
    Numeric(String),

    #[error("format: {path}: {message} (byte offset {offset})")]
    Format {
        path: PathBuf,
        offset: u64,
        message: String,
    },

    #[error("io: {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl Error {
    /// Exit code for the CLI: config-class 2, numeric 3, io-class 4.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::Input(_) => 2,
            Error::Numeric(_) => 3,
            Error::Format { .. } | Error::Io { .. } => 4,
        }
    }

}

pub type Result<T> = std::result::Result<T, Error>;

/// Attach a path to an `std::io::Error`.
pub fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

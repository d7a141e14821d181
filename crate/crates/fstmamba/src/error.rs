use std::path::PathBuf;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Core(#[from] fstmamba_core::Error),
    #[error("{}: {source}", path.display())]
    Io { path: PathBuf, source: std::io::Error },
    #[error("{}: malformed container: {msg}", path.display())]
    Container { path: PathBuf, msg: String },
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{}: {source}", path.display())]
    Toml { path: PathBuf, source: toml::de::Error },
    #[error("json: {0}")]
    Json(#[from] serde_json::Error),
    #[error("png encoding: {0}")]
    Png(#[from] png::EncodingError),
    /// A check, evaluation threshold or training run failed.
    #[error("{0}")]
    Failed(String),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

impl Error {
    pub fn io(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
        let path = path.into();
        move |source| Error::Io { path, source }
    }

    /// 1 for failed checks, evaluations and diverged runs; 2 for usage and
    /// validation errors.
    pub fn exit_code(&self) -> u8 {
        use fstmamba_core::Error as C;
        match self {
            Error::Failed(_) | Error::Core(C::NonFinite { .. } | C::Diverged { .. }) => 1,
            _ => 2,
        }
    }
}

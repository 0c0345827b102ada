use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("configuration error: {0}")]
    Config(String),

    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },

    #[error("format error: {0}")]
    Format(String),

    #[error("contract violation: {0}")]
    Contract(String),

    #[error("model error: {0}")]
    Model(String),

    #[error("calibration error: {0}")]
    Calibration(String),

    #[error("degenerate activation range [{lo}, {hi}] for {layer}")]
    DegenerateRange { layer: String, lo: f32, hi: f32 },

    #[error("no template with id {0}")]
    UnknownTemplate(i64),

    #[error("dataset {0} has no usable events")]
    EmptyDataset(PathBuf),

    #[error("training diverged at epoch {epoch}: loss = {loss}")]
    Divergence { epoch: usize, loss: f64 },

    #[error("correlation undefined: {0}")]
    UndefinedCorrelation(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

use std::path::PathBuf;

use genconvit_tensor::TensorError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("invalid config: {0}")]
    Config(String),
    #[error("{what}: expected shape {expected:?}, got {got:?}")]
    Shape {
        what: &'static str,
        expected: Vec<usize>,
        got: Vec<usize>,
    },
    #[error("unknown parameter `{0}`")]
    UnknownParam(String),
    #[error("loss became non-finite ({0})")]
    NonFiniteLoss(f64),
    #[error("no frames to predict from")]
    NoFrames,
    #[error("no image files in {0}")]
    EmptyDir(PathBuf),
    #[error("class `{0}` has no videos")]
    EmptyClass(&'static str),
    #[error("metric needs both classes present")]
    SingleClass,
    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),
    #[error("label {0} is not 0 (real) or 1 (fake)")]
    BadLabel(u8),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }
}

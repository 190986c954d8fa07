use std::path::PathBuf;

/// Input that fails a documented contract. The CLI maps these to exit code 1.
#[derive(Debug, thiserror::Error)]
pub enum ValidationError {
    #[error("missing file: {}", .0.display())]
    MissingFile(PathBuf),
    #[error("malformed record at line {line}: {message}")]
    MalformedRecord { line: usize, message: String },
    #[error("missing mask for fake sample {}", .0.display())]
    MissingMask(PathBuf),
    #[error("real sample {} has a mask with manipulated pixels", .0.display())]
    RealMaskNotEmpty(PathBuf),
    #[error("non-binary mask {}: found value {value}", path.display())]
    NonBinaryMask { path: PathBuf, value: u8 },
    #[error("empty generator tag for {}", .0.display())]
    EmptyGenerator(PathBuf),
    #[error("zero-area image {}", .0.display())]
    ZeroArea(PathBuf),
    #[error("image is not RGB")]
    NotRgb,
    #[error("layer {layer} out of range for {family} (valid 1..={max})")]
    LayerOutOfRange { family: String, layer: usize, max: usize },
    #[error("checkpoint digest mismatch: expected {expected}, found {found}")]
    DigestMismatch { expected: String, found: String },
    #[error("degenerate labels: need at least one real and one fake sample")]
    DegenerateLabels,
    #[error("empty manifest {0}")]
    EmptyManifest(String),
    #[error("unsupported decoder: {0}")]
    UnsupportedDecoder(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("dimension mismatch: {0}")]
    DimensionMismatch(String),
    #[error("missing prediction for {}", .0.display())]
    MissingPrediction(PathBuf),
    #[error("unmatched file {}: no counterpart in {}", file.display(), dir.display())]
    Unmatched { file: PathBuf, dir: PathBuf },
    #[error("malformed csv: {0}")]
    MalformedCsv(String),
    #[error("no objects in annotation set")]
    NoObjects,
}

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error(transparent)]
    Validation(#[from] ValidationError),
    #[error("io error on {}: {source}", path.display())]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("image error on {}: {source}", path.display())]
    Image {
        path: PathBuf,
        #[source]
        source: image::ImageError,
    },
    #[error("json error: {0}")]
    Json(#[from] serde_json::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("weights error: {0}")]
    Weights(String),
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
    #[error("non-finite loss at epoch {epoch} (batch {batch})")]
    NonFiniteLoss { epoch: usize, batch: usize },
    #[error("inpainter failed: {0}")]
    Inpainter(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io { path: path.into(), source }
    }

    pub fn image(path: impl Into<PathBuf>, source: image::ImageError) -> Self {
        Error::Image { path: path.into(), source }
    }

    pub fn is_validation(&self) -> bool {
        matches!(self, Error::Validation(_))
    }
}

pub type Result<T> = std::result::Result<T, Error>;

pub(crate) fn invalid(msg: impl Into<String>) -> Error {
    Error::Validation(ValidationError::InvalidParameter(msg.into()))
}

pub(crate) fn dim_mismatch(msg: impl Into<String>) -> Error {
    Error::Validation(ValidationError::DimensionMismatch(msg.into()))
}

use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("missing file: {0}")]
    MissingFile(PathBuf),
    #[error("header mismatch in {path}: {detail}")]
    HeaderMismatch { path: PathBuf, detail: String },
    #[error("unsupported dtype {dtype:?} (expected {expected:?})")]
    UnsupportedDtype { dtype: String, expected: &'static str },
    #[error("i/o failure on {path}: {source}")]
    IoFailure {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("malformed file {path}: {detail}")]
    Malformed { path: PathBuf, detail: String },

    #[error("invalid voxel spacing: {0}")]
    InvalidSpacing(String),
    #[error("invalid volume geometry: {0}")]
    InvalidGeometry(String),
    #[error("volume is not isotropic: spacing {0:?}")]
    NotIsotropic([f64; 3]),
    #[error("volume is not cubic: dims {0:?}")]
    NotCubic([usize; 3]),
    #[error("dimension mismatch: {0:?} vs {1:?}")]
    DimsMismatch([usize; 3], [usize; 3]),
    #[error("frame mismatch: {0}")]
    FrameMismatch(String),

    #[error("negative sigma: {0}")]
    NegativeSigma(f64),
    #[error("invalid scale-space parameters: {0}")]
    InvalidParams(String),
    #[error("no grid point reaches sensitivity {theta}; best achieved {best_sensitivity}")]
    Infeasible { theta: f64, best_sensitivity: f64 },

    #[error("gamma must be positive, got {0}")]
    NonPositiveGamma(f64),
    #[error("input value {0} outside [0, 1]")]
    OutOfRangeInput(f32),
    #[error("bad input size: {0}")]
    BadInputSize(String),
    #[error("invalid augmentation config: {0}")]
    InvalidAugment(String),

    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("stale cache: {0}")]
    StaleCache(String),
    #[error("invalid network config: {0}")]
    InvalidNetwork(String),

    #[error("no dataset has both positive and negative samples")]
    NoPairableDatasets,
    #[error("need at least {needed} patients, got {got}")]
    InsufficientPatients { needed: usize, got: usize },

    #[error("pooled lesion count is zero")]
    NoLesions,
    #[error("sensitivity {target} unreachable (max {max})")]
    SensitivityUnreachable { target: f64, max: f64 },
    #[error("bad fold count k={k} for {n} patients")]
    BadK { k: usize, n: usize },

    #[error("could not place lesions after {0} attempts")]
    PlacementFailure(usize),
    #[error("invalid phantom config: {0}")]
    InvalidPhantom(String),

    #[error("invalid config field `{field}`: {detail}")]
    Config { field: String, detail: String },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        let path = path.into();
        if source.kind() == std::io::ErrorKind::NotFound {
            Error::MissingFile(path)
        } else {
            Error::IoFailure { path, source }
        }
    }

    pub(crate) fn config(field: impl Into<String>, detail: impl Into<String>) -> Self {
        Error::Config { field: field.into(), detail: detail.into() }
    }
}

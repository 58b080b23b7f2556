use std::path::PathBuf;

use lidarfield_autodiff::AutodiffError;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid intrinsics: {0}")]
    InvalidIntrinsics(String),
    #[error("point at the sensor origin has zero depth")]
    ZeroDepth,
    #[error("{what} out of bounds: {detail}")]
    OutOfBounds { what: &'static str, detail: String },
    #[error("scene has no points")]
    EmptyScene,
    #[error("scene bounds are degenerate along {axis}")]
    DegenerateBounds { axis: &'static str },
    #[error("bad ray bounds: near {near}, far {far}")]
    BadBounds { near: f64, far: f64 },
    #[error("sample distances are not strictly increasing (ray {ray})")]
    NonMonotoneSamples { ray: usize },
    #[error("batch misaligned: {0}")]
    MisalignedBatch(String),
    #[error(
        "non-finite loss at iteration {iteration} (component {component}); \
         largest gradient {max_grad:e} in `{param}`"
    )]
    NonFiniteLoss {
        iteration: usize,
        component: &'static str,
        max_grad: f64,
        param: String,
    },
    #[error("empty input: {0}")]
    EmptySet(String),
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("{path}: {points} points but {labels} labels")]
    SizeMismatch { path: PathBuf, points: usize, labels: usize },
    #[error("{path}: truncated file ({len} bytes is not a multiple of {record})")]
    TruncatedFile { path: PathBuf, len: u64, record: usize },
    #[error("missing frame {index}: {path}")]
    MissingFrame { index: usize, path: PathBuf },
    #[error("config: {0}")]
    Config(String),
    #[error("format: {0}")]
    Format(String),
    #[error("{path}: {source}")]
    Io { path: PathBuf, source: std::io::Error },
    #[error(transparent)]
    Autodiff(#[from] AutodiffError),
}

pub type Result<T, E = Error> = std::result::Result<T, E>;

pub(crate) fn io_err(path: impl Into<PathBuf>) -> impl FnOnce(std::io::Error) -> Error {
    let path = path.into();
    move |source| Error::Io { path, source }
}

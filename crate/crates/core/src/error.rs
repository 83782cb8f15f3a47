use std::path::PathBuf;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("grid size overflows addressable memory for dims {0:?}")]
    DimensionOverflow(Vec<usize>),

    #[error("data length {got} does not match product of dims {expected}")]
    LengthMismatch { expected: usize, got: usize },

    #[error("rectangle {rect} is outside grid dims {dims:?}")]
    OutOfBounds { rect: String, dims: Vec<usize> },

    #[error("dimension mismatch: {0}")]
    DimMismatch(String),

    #[error("contrast undefined for {0} rectangle")]
    DegenerateRect(&'static str),

    #[error("degenerate input: {0}")]
    Degenerate(String),

    #[error("no admissible candidate rectangle: {0}")]
    NoCandidate(String),

    #[error("invalid parameter: {0}")]
    InvalidParameter(String),

    #[error("overlapping patches: {0} and {1}")]
    OverlappingPatches(String, String),

    #[error("SAR iteration did not converge after {sweeps} sweeps (last update {last_update:e})")]
    NoConvergence { sweeps: usize, last_update: f64 },

    #[error("bad magic: expected \"SPLG\", found {0:?}")]
    BadMagic([u8; 4]),

    #[error("unsupported grid file version {0} (expected 1)")]
    VersionMismatch(u32),

    #[error("truncated grid file: {0}")]
    Truncated(String),

    #[error("malformed input: {0}")]
    Malformed(String),

    #[error("unsupported frame format: {}", .0.display())]
    UnsupportedFormat(PathBuf),

    #[error("frame {} has size {got:?}, expected {expected:?}", .path.display())]
    MixedFrameSizes {
        path: PathBuf,
        expected: (u32, u32),
        got: (u32, u32),
    },

    #[error("empty baseline range")]
    EmptyBaseline,

    #[error("image decode error: {0}")]
    Image(#[from] image::ImageError),

    #[error("JSON error: {0}")]
    Json(#[from] serde_json::Error),

    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

use std::path::PathBuf;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, thiserror::Error)]
pub enum Error {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("shape {shape:?} holds {expected} elements but {actual} were supplied")]
    ElementCount {
        shape: Vec<usize>,
        expected: usize,
        actual: usize,
    },
    #[error("shape {0:?} has a zero extent")]
    ZeroExtent(Vec<usize>),
    #[error("axis {axis} is invalid for a rank-{rank} tensor")]
    InvalidAxis { axis: usize, rank: usize },
    #[error("slice {start}..{end} is out of bounds for axis {axis} of extent {extent}")]
    OutOfBounds {
        axis: usize,
        start: usize,
        end: usize,
        extent: usize,
    },
    #[error("divisor magnitude {value:e} is not above the floor {floor:e}")]
    DivisionFloor { value: f64, floor: f64 },
    #[error("backward root must be a scalar, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("non-finite value in {0}")]
    NonFinite(String),
    #[error("non-finite loss at iteration {iter}: {detail}")]
    Diverged { iter: u64, detail: String },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("bad magic: expected {expected:?}")]
    BadMagic { expected: &'static str },
    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated payload: needed {needed} bytes at offset {offset}, {available} available")]
    Truncated {
        offset: usize,
        needed: usize,
        available: usize,
    },
    #[error("extent overflow: {0}")]
    ExtentOverflow(String),
    #[error("{0} trailing bytes after payload")]
    TrailingBytes(usize),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("css file line {line}: {msg}")]
    Css { line: usize, msg: String },
    #[error("css file has {0} data rows, expected 31")]
    CssRowCount(usize),
    #[error("css file row {row}, column {column}: negative sensitivity {value}")]
    CssNegative {
        row: usize,
        column: &'static str,
        value: f64,
    },
    #[error("css file row {row}: wavelength {value} is not strictly increasing")]
    CssNonMonotone { row: usize, value: f64 },
    #[error("wavelength grid mismatch between cube and css function")]
    WavelengthMismatch,
    #[error("config line {line}: {msg}")]
    ConfigSyntax { line: usize, msg: String },
    #[error("unknown config key `{0}`")]
    UnknownKey(String),
    #[error("invalid value `{value}` for `{key}`")]
    InvalidValue { key: String, value: String },
    #[error("unknown gradcheck target `{0}`")]
    UnknownTarget(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    pub(crate) fn config(msg: impl Into<String>) -> Self {
        Error::InvalidConfig(msg.into())
    }
}

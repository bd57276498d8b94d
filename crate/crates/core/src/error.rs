use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum Error {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },

    #[error("dimension {0} outside supported range 1..=7")]
    UnsupportedDimension(usize),

    #[error("row {row}: non-finite value in {what}")]
    NonFinite { row: usize, what: &'static str },

    #[error("row {row}: coordinate component {value} overflows the signed 32-bit domain")]
    CoordinateOverflow { row: usize, value: f64 },

    #[error("duplicate coordinate at row {0}")]
    DuplicateCoordinate(usize),

    #[error("coordinate at row {row} is not a multiple of tensor stride {stride:?}")]
    StrideViolation { row: usize, stride: Vec<u32> },

    #[error("invalid kernel: {0}")]
    InvalidKernel(String),

    #[error("kernel map references row {index} but only {len} rows exist")]
    IndexOutOfRange { index: usize, len: usize },

    #[error("channel mismatch: expected {expected}, got {got}")]
    ChannelMismatch { expected: usize, got: usize },

    #[error("shape mismatch for {what}: expected {expected:?}, got {got:?}")]
    ShapeMismatch {
        what: String,
        expected: Vec<usize>,
        got: Vec<usize>,
    },

    #[error("pooling output row {0} receives no inputs")]
    EmptyPoolingRow(usize),

    #[error("value is not recorded on this tape")]
    ForeignValue,

    #[error("loss must be a scalar, got shape {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("malformed input: {0}")]
    Format(String),

    #[error("i/o error: {0}")]
    Io(String),
}

impl From<std::io::Error> for Error {
    fn from(err: std::io::Error) -> Self {
        Error::Io(err.to_string())
    }
}

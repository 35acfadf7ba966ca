use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

/// Netpbm parse failures. Offsets are byte positions in the input.
#[derive(Debug, Error, PartialEq, Eq)]
pub enum ParseError {
    #[error("bad magic at byte {offset}: expected P5 or P6")]
    BadMagic { offset: usize },
    #[error("malformed header at byte {offset}: {reason}")]
    MalformedHeader { offset: usize, reason: &'static str },
    #[error("unsupported maxval {maxval} at byte {offset} (only 255 is supported)")]
    UnsupportedMaxval { offset: usize, maxval: u64 },
    #[error("truncated payload at byte {offset}: expected {expected} bytes, found {found}")]
    TruncatedPayload {
        offset: usize,
        expected: usize,
        found: usize,
    },
}

#[derive(Debug, Error)]
pub enum Error {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}: {source}")]
    Parse {
        path: PathBuf,
        #[source]
        source: ParseError,
    },
    #[error(transparent)]
    Format(#[from] ParseError),
    #[error("invalid geometry: {0}")]
    Geometry(String),
    #[error("level {level} outside family range {min}..={max}")]
    LevelOutOfRange { level: u8, min: u8, max: u8 },
    #[error("latent is at level {found}, operation expects level {expected}")]
    LevelMismatch { expected: u8, found: u8 },
    #[error("{0}")]
    Quantization(String),
    #[error("module kind mismatch: {0}")]
    KindMismatch(String),
    #[error("invalid policy: {0}")]
    InvalidPolicy(String),
    #[error("missing transform module {kind} {from}->{to}")]
    MissingModule { kind: &'static str, from: u8, to: u8 },
    #[error("invalid codec family: {0}")]
    InvalidFamily(String),
    #[error("bitstream version {found} does not match family version {expected}")]
    VersionMismatch { expected: String, found: String },
    #[error("corrupt payload: {0}")]
    CorruptPayload(String),
    #[error("malformed container: {0}")]
    Container(String),
    #[error("singular regression system (condition number {condition:e})")]
    Singular { condition: f64 },
    #[error("training order violation: {0}")]
    TrainingOrder(String),
    #[error("numeric failure: {0}")]
    Numeric(String),
    #[error("metric error: {0}")]
    Metric(String),
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
}

impl Error {
    pub fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the command-line driver.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) | Error::InvalidPolicy(_) => 2,
            Error::Singular { .. } | Error::Numeric(_) => 4,
            _ => 3,
        }
    }
}

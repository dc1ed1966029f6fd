use std::io;
use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },

    #[error("{path}: bad magic {found:?}, expected {expected:?}")]
    BadMagic {
        path: PathBuf,
        expected: [u8; 4],
        found: [u8; 4],
    },

    #[error("{path}: unsupported format version {version}")]
    UnsupportedVersion { path: PathBuf, version: u32 },

    #[error("{path}: truncated ({what}): expected {expected} bytes, found {found}")]
    Truncated {
        path: PathBuf,
        what: &'static str,
        expected: u64,
        found: u64,
    },

    #[error("{path}: {found} trailing bytes after payload")]
    TrailingBytes { path: PathBuf, found: u64 },

    #[error("dimension product overflows: {dims:?}")]
    DimOverflow { dims: Vec<u64> },

    #[error("non-finite value {value} at flat index {index}")]
    NonFinite { index: usize, value: f64 },

    #[error("invalid dimensions: {0}")]
    InvalidDims(String),

    #[error("{path}:{line}: {message}")]
    Parse {
        path: PathBuf,
        line: usize,
        message: String,
    },

    #[error("video {video_id} has conflicting labels (line {line})")]
    LabelConflict { video_id: String, line: usize },

    #[error("duplicate segment ({video_id}, {segment_index}) at line {line}")]
    DuplicateSegment {
        video_id: String,
        segment_index: u32,
        line: usize,
    },

    #[error("{dim} = {size} is not divisible by cell size {cell}")]
    NotDivisible {
        dim: &'static str,
        size: usize,
        cell: usize,
    },

    #[error("instance count mismatch: expected {expected}, got {got}")]
    CountMismatch { expected: usize, got: usize },

    #[error("two instances claim grid cell ({row}, {col})")]
    GridCollision { row: usize, col: usize },

    #[error("cell ({row}, {col}) outside a {rows}x{cols} grid")]
    OutOfGrid {
        row: usize,
        col: usize,
        rows: usize,
        cols: usize,
    },

    #[error("shape mismatch: {0}")]
    Shape(String),

    #[error("non-finite activation in layer {layer}")]
    NonFiniteActivation { layer: usize },

    #[error("tape recorded against parameter version {tape}, parameters are at {params}")]
    StaleTape { tape: u64, params: u64 },

    #[error("manifest has no {0} segments")]
    MissingClass(&'static str),

    #[error("non-finite loss at iteration {iteration} (bags: {})", bags.join(", "))]
    NonFiniteLoss { iteration: usize, bags: Vec<String> },

    #[error("ROC needs both classes: {positives} positives, {negatives} negatives")]
    SingleClass { positives: usize, negatives: usize },

    #[error("length mismatch: {0} scores vs {1} labels")]
    LengthMismatch(usize, usize),

    #[error("video {video_id}: missing segment {segment_index}")]
    MissingSegment { video_id: String, segment_index: u32 },

    #[error("no annotated frames to evaluate")]
    NoAnnotatedFrames,

    #[error("no overlapping video ids between scores and annotations")]
    NoOverlap,

    #[error("invalid configuration: {0}")]
    Config(String),
}

impl Error {
    pub(crate) fn io(path: impl Into<PathBuf>, source: io::Error) -> Self {
        Error::Io {
            path: path.into(),
            source,
        }
    }

    /// Process exit code for the CLI: 1 usage, 2 data/format, 3 numerical.
    pub fn exit_code(&self) -> i32 {
        match self {
            Error::Config(_) => 1,
            Error::NonFiniteLoss { .. } | Error::NonFiniteActivation { .. } => 3,
            _ => 2,
        }
    }
}

use thiserror::Error;

/// Errors surfaced by the toolkit.
#[derive(Debug, Error)]
pub enum Error {
    /// Two operands have incompatible dimensions for the named operation.
    #[error("{op}: incompatible shapes {lhs_rows}x{lhs_cols} and {rhs_rows}x{rhs_cols}")]
    ShapeMismatch {
        op: &'static str,
        lhs_rows: usize,
        lhs_cols: usize,
        rhs_rows: usize,
        rhs_cols: usize,
    },

    /// Invalid configuration, flags or architecture description.
    #[error("invalid configuration: {0}")]
    Config(String),

    /// Malformed or inconsistent data that is not one of the structured cases below.
    #[error("invalid data: {0}")]
    Data(String),

    #[error("bad magic: expected {expected:?}, found {found:?}")]
    BadMagic { expected: &'static str, found: [u8; 4] },

    #[error("unsupported format version {0}")]
    UnsupportedVersion(u32),

    #[error("truncated file while reading {0}")]
    Truncated(&'static str),

    #[error("frame {frame}: label {label} out of range for {num_classes} classes")]
    LabelOutOfRange {
        frame: usize,
        label: u64,
        num_classes: usize,
    },

    #[error("segment lengths sum to {sum} but the dataset declares {num_frames} frames")]
    SegmentSumMismatch { sum: u64, num_frames: u64 },

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

impl Error {
    pub(crate) fn shape(op: &'static str, lhs: (usize, usize), rhs: (usize, usize)) -> Self {
        Error::ShapeMismatch {
            op,
            lhs_rows: lhs.0,
            lhs_cols: lhs.1,
            rhs_rows: rhs.0,
            rhs_cols: rhs.1,
        }
    }
}

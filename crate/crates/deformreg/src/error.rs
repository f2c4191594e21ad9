//! Crate-wide error type.

use thiserror::Error;

pub type Result<T> = std::result::Result<T, Error>;

#[derive(Error, Debug)]
pub enum Error {
    #[error("shape mismatch in {what}: expected {expected:?}, found {found:?}")]
    ShapeMismatch {
        what: &'static str,
        expected: Vec<usize>,
        found: Vec<usize>,
    },

    #[error("invalid argument: {0}")]
    InvalidArgument(String),

    #[error("affine matrix is singular")]
    SingularAffine,

    #[error("non-finite values encountered in {0}")]
    NonFinite(String),

    #[error("no overlap between valid regions")]
    NoOverlap,

    #[error("mask selects no voxels")]
    EmptyMask,

    #[error("channel {0} is constant; cannot normalize")]
    ConstantChannel(usize),

    #[error("all sampling centers were dropped; loss is undefined")]
    AllCentersDropped,

    #[error("no labels present in either volume")]
    NoCommonLabels,

    #[error("loss became non-finite at level {level}, iteration {iteration}")]
    NonFiniteLoss { level: usize, iteration: usize },

    #[error("malformed NIfTI header at offset {offset}: {message}")]
    NiftiHeader { offset: usize, message: String },

    #[error("unsupported NIfTI datatype code {0}")]
    NiftiDatatype(i16),

    #[error("NIfTI file error: {0}")]
    Nifti(String),

    #[error("configuration error: {0}")]
    Config(String),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

impl Error {
    pub fn invalid(msg: impl Into<String>) -> Self {
        Error::InvalidArgument(msg.into())
    }
}

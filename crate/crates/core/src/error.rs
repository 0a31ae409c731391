use thiserror::Error;

use crate::data_io::DataError;
use crate::detector::AdapterError;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("{what} has invalid shape {shape:?}, expected (H >= 1, W >= 1, 3)")]
    InvalidShape { what: &'static str, shape: Vec<usize> },

    #[error("{what} value {value} outside [0, 1]")]
    OutOfRange { what: &'static str, value: f64 },

    #[error("invalid annotation: box {0:?} has zero area")]
    InvalidAnnotation(crate::geometry::BoundingBox),

    #[error("image {height}x{width} is smaller than the {required}x{required} detector window")]
    ImageTooSmall {
        height: usize,
        width: usize,
        required: usize,
    },

    #[error("non-finite value in {term}")]
    NonFinite { term: String },

    #[error("dataset has 0 records")]
    EmptyDataset,

    #[error("no pseudo-GT: the clean detector output contains no person boxes")]
    NoPseudoGt,

    #[error("invalid configuration: {0}")]
    InvalidConfig(String),

    #[error("seed stability needs at least 2 seeds, got {0}")]
    TooFewSeeds(usize),

    #[error(transparent)]
    Adapter(#[from] AdapterError),

    #[error(transparent)]
    Data(#[from] DataError),

    #[error(transparent)]
    Io(#[from] std::io::Error),
}

//! Datasets: synthetic 2D generators, IDX image files, pixel scaling and
//! PPM sample grids.

mod idx;
mod image;
mod toy;

use std::path::PathBuf;

use thiserror::Error;

use crate::numerics::{NumericsError, Tensor};

pub use idx::{load_idx, parse_idx, parse_idx_rank, write_idx, IdxArray, IdxHeader};
pub use image::{
    binarize, denormalize_pixels, load_mnist, normalize_pixels, read_ppm, write_ppm_grid,
    PixelRange, PpmImage,
};
pub use toy::{gen_2d, Toy2d};

#[derive(Debug, Error)]
pub enum DataError {
    #[error("unknown dataset kind {0:?}")]
    UnknownKind(String),
    #[error("requested {0} points; need at least 1")]
    Empty(usize),
    #[error("bad IDX magic {0:02x?}")]
    BadMagic([u8; 4]),
    #[error("IDX header truncated: need {expected} bytes, got {actual}")]
    TruncatedHeader { expected: usize, actual: usize },
    #[error("IDX payload length {actual}, expected {expected}")]
    PayloadLength { expected: usize, actual: usize },
    #[error("IDX rank {actual}, expected {expected}")]
    RankMismatch { expected: u8, actual: u8 },
    #[error("grid of {rows}x{cols} needs {expected} images, got {actual}")]
    GridMismatch {
        rows: usize,
        cols: usize,
        expected: usize,
        actual: usize,
    },
    #[error("image dimension {0} is not a square")]
    NotSquare(usize),
    #[error("malformed PPM: {0}")]
    BadPpm(String),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Numerics(#[from] NumericsError),
}

impl DataError {
    pub(crate) fn io(path: impl Into<PathBuf>, source: std::io::Error) -> Self {
        DataError::Io {
            path: path.into(),
            source,
        }
    }
}

/// Affine map applied to the raw values: `stored = raw * scale + shift`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Normalization {
    pub scale: f64,
    pub shift: f64,
}

impl Normalization {
    pub const IDENTITY: Self = Self {
        scale: 1.0,
        shift: 0.0,
    };

    pub fn invert(&self, v: f64) -> f64 {
        (v - self.shift) / self.scale
    }
}

/// Rows of `data` are examples.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub name: String,
    pub data: Tensor,
    pub normalization: Normalization,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.data.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.data.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.data.cols()
    }

    /// First `n` rows (or all when fewer).
    pub fn take(&self, n: usize) -> Dataset {
        Dataset {
            name: self.name.clone(),
            data: self.data.slice_rows(0, n.min(self.len())),
            normalization: self.normalization,
        }
    }
}

use std::fs;
use std::path::{Path, PathBuf};

use crate::numerics::Tensor;

use super::idx::{load_idx, IdxArray};
use super::{DataError, Dataset, Normalization};

/// Value range of stored pixels.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PixelRange {
    /// `[0, 255]`
    Byte,
    /// `[-1, 1]`
    Signed,
}

pub const PIXEL_NORMALIZATION: Normalization = Normalization {
    scale: 1.0 / 127.5,
    shift: -1.0,
};

/// Maps byte values to `[-1, 1]`.
pub fn normalize_pixels(bytes: &Tensor) -> Tensor {
    bytes.map(|v| v * PIXEL_NORMALIZATION.scale + PIXEL_NORMALIZATION.shift)
}

/// Inverse of [`normalize_pixels`], without rounding or clamping.
pub fn denormalize_pixels(x: &Tensor) -> Tensor {
    x.map(|v| PIXEL_NORMALIZATION.invert(v))
}

/// 1 where the value is at or above mid-range, else 0.
pub fn binarize(x: &Tensor, range: PixelRange) -> Tensor {
    x.map(|v| {
        let unit = match range {
            PixelRange::Byte => v / 255.0,
            PixelRange::Signed => (v + 1.0) / 2.0,
        };
        if unit >= 0.5 {
            1.0
        } else {
            0.0
        }
    })
}

fn find(dir: &Path, stem: &str) -> Result<PathBuf, DataError> {
    for name in [format!("{stem}.gz"), stem.to_string()] {
        let p = dir.join(name);
        if p.exists() {
            return Ok(p);
        }
    }
    Err(DataError::io(
        dir.join(stem),
        std::io::Error::new(std::io::ErrorKind::NotFound, "no such IDX file"),
    ))
}

/// Loads `train-images-idx3-ubyte[.gz]` and the matching labels from `dir`,
/// keeps the first `limit` images, flattens them and scales to `[-1, 1]`.
pub fn load_mnist(dir: &Path, limit: Option<usize>) -> Result<(Dataset, Vec<u8>), DataError> {
    let images: IdxArray = load_idx(&find(dir, "train-images-idx3-ubyte")?)?;
    if images.header.rank() != 3 {
        return Err(DataError::RankMismatch {
            expected: 3,
            actual: images.header.rank(),
        });
    }
    let labels = load_idx(&find(dir, "train-labels-idx1-ubyte")?)?;
    let shape = images.shape();
    let n = limit.map_or(shape[0], |l| l.min(shape[0]));
    let d = shape[1] * shape[2];
    let raw = Tensor::new(
        vec![n, d],
        images.data[..n * d].iter().map(|&b| f64::from(b)).collect(),
    )?;
    let labels = labels.data.into_iter().take(n).collect();
    Ok((
        Dataset {
            name: "mnist".into(),
            data: normalize_pixels(&raw),
            normalization: PIXEL_NORMALIZATION,
        },
        labels,
    ))
}

/// Decoded binary PPM.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PpmImage {
    pub width: usize,
    pub height: usize,
    /// RGB triples, row-major.
    pub pixels: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    ((v + 1.0) * 127.5).round().clamp(0.0, 255.0) as u8
}

/// Tiles `rows * cols` square grayscale images in `[-1, 1]` into one P6 file.
pub fn write_ppm_grid(samples: &Tensor, rows: usize, cols: usize, path: &Path) -> Result<(), DataError> {
    let expected = rows * cols;
    if samples.rows() != expected || expected == 0 {
        return Err(DataError::GridMismatch {
            rows,
            cols,
            expected,
            actual: samples.rows(),
        });
    }
    let d = samples.cols();
    let side = (d as f64).sqrt().round() as usize;
    if side * side != d {
        return Err(DataError::NotSquare(d));
    }
    let (w, h) = (cols * side, rows * side);
    let mut out = format!("P6\n{w} {h}\n255\n").into_bytes();
    out.reserve(3 * w * h);
    for y in 0..h {
        let (gr, py) = (y / side, y % side);
        for x in 0..w {
            let (gc, px) = (x / side, x % side);
            let v = to_byte(samples.row(gr * cols + gc)[py * side + px]);
            out.extend_from_slice(&[v, v, v]);
        }
    }
    fs::write(path, out).map_err(|e| DataError::io(path, e))
}

pub fn read_ppm(path: &Path) -> Result<PpmImage, DataError> {
    let bytes = fs::read(path).map_err(|e| DataError::io(path, e))?;
    let bad = |m: &str| DataError::BadPpm(m.to_string());
    // magic, width, height, maxval separated by single whitespace runs
    let mut fields = Vec::new();
    let mut pos = 0;
    while fields.len() < 4 {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        fields.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    pos += 1;
    if fields[0] != "P6" {
        return Err(bad("not P6"));
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad number"));
    let (width, height, maxval) = (num(&fields[1])?, num(&fields[2])?, num(&fields[3])?);
    if maxval != 255 {
        return Err(bad("maxval must be 255"));
    }
    let pixels = bytes.get(pos..).unwrap_or_default().to_vec();
    if pixels.len() != 3 * width * height {
        return Err(bad("pixel data length"));
    }
    Ok(PpmImage {
        width,
        height,
        pixels,
    })
}

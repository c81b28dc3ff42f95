use std::f64::consts::PI;
use std::str::FromStr;

use crate::numerics::{RngState, Tensor};

use super::{DataError, Dataset, Normalization};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Toy2d {
    /// Two interleaved half circles with Gaussian jitter (std 0.05), centered.
    TwoMoons,
    /// Eight modes evenly spaced on a circle of radius 2, std 0.1.
    Gaussians8,
    /// Uniform on the dark squares of a 4x4 board over `[-2, 2]^2`.
    Checkerboard,
}

impl Toy2d {
    pub fn name(self) -> &'static str {
        match self {
            Toy2d::TwoMoons => "two_moons",
            Toy2d::Gaussians8 => "gaussians8",
            Toy2d::Checkerboard => "checkerboard",
        }
    }
}

impl FromStr for Toy2d {
    type Err = DataError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "two_moons" | "two-moons" | "moons" => Ok(Toy2d::TwoMoons),
            "gaussians8" | "8gaussians" | "eight_gaussians" => Ok(Toy2d::Gaussians8),
            "checkerboard" => Ok(Toy2d::Checkerboard),
            other => Err(DataError::UnknownKind(other.to_string())),
        }
    }
}

/// Draws `n` points; identical seeds give identical datasets.
pub fn gen_2d(rng: &mut RngState, kind: Toy2d, n: usize) -> Result<Dataset, DataError> {
    if n == 0 {
        return Err(DataError::Empty(n));
    }
    let mut data = Vec::with_capacity(2 * n);
    for _ in 0..n {
        let (x, y) = match kind {
            Toy2d::Gaussians8 => {
                let k = rng.below(8) as f64;
                let a = k * PI / 4.0;
                (
                    2.0 * a.cos() + 0.1 * rng.gaussian(),
                    2.0 * a.sin() + 0.1 * rng.gaussian(),
                )
            }
            Toy2d::TwoMoons => {
                let a = PI * rng.uniform();
                let (x, y) = if rng.below(2) == 0 {
                    (a.cos(), a.sin())
                } else {
                    (1.0 - a.cos(), 0.5 - a.sin())
                };
                (
                    x - 0.5 + 0.05 * rng.gaussian(),
                    y - 0.25 + 0.05 * rng.gaussian(),
                )
            }
            Toy2d::Checkerboard => {
                // one of the 8 cells with odd (col + row) parity
                let cell = rng.below(8);
                let row = cell / 2;
                let col = 2 * (cell % 2) + (row + 1) % 2;
                (
                    col as f64 - 2.0 + rng.uniform(),
                    row as f64 - 2.0 + rng.uniform(),
                )
            }
        };
        data.push(x);
        data.push(y);
    }
    Ok(Dataset {
        name: kind.name().to_string(),
        data: Tensor::new(vec![n, 2], data)?,
        normalization: Normalization::IDENTITY,
    })
}

//! Time discretization, curriculum, loss weightings and preconditioning.
//!
//! Training uses a grid `t_0 = 0 < t_1 = sigma_min < ... < t_N = sigma_max`.
//! The network is only ever evaluated at `t_1..t_N`; `t_0` marks the
//! boundary where the consistency target is the data itself.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::RngState;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ScheduleError {
    #[error("invalid schedule config: {0}")]
    InvalidConfig(String),
    #[error("grid needs at least 2 steps, got {0}")]
    TooFewSteps(usize),
    #[error("time {t} outside [{lo}, {hi}]")]
    OutOfRange { t: f64, lo: f64, hi: f64 },
    #[error("time must be positive, got {0}")]
    NonPositiveTime(f64),
    #[error("grid times must start at 0 and increase strictly")]
    InvalidGrid,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    /// Initial number of discretization steps.
    pub s0: u64,
    /// Final number of discretization steps.
    pub s1: u64,
    /// Total training iterations `K`.
    pub iterations: u64,
    /// Floor of the average-decoder weight at `sigma_max`.
    pub c_d: f64,
    /// Data standard deviation for the VE-kernel variant.
    pub sigma_data: f64,
    /// Latent norm penalty for the VE-kernel variant.
    pub gamma: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.05,
            sigma_max: 3.0,
            rho: 7.0,
            s0: 2,
            s1: 256,
            iterations: 400_000,
            c_d: 0.1,
            sigma_data: 0.5,
            gamma: 0.001,
        }
    }
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<(), ScheduleError> {
        let bad = |m: &str| Err(ScheduleError::InvalidConfig(m.to_string()));
        if !(self.sigma_min > 0.0 && self.sigma_min < self.sigma_max) {
            return bad("require 0 < sigma_min < sigma_max");
        }
        if !(self.rho >= 1.0) {
            return bad("require rho >= 1");
        }
        if !(1 <= self.s0 && self.s0 <= self.s1) {
            return bad("require 1 <= s0 <= s1");
        }
        if !(self.c_d > 0.0 && self.c_d <= 1.0) {
            return bad("require 0 < c_d <= 1");
        }
        if self.iterations < 1 {
            return bad("require iterations >= 1");
        }
        if !(self.sigma_data > 0.0) || self.gamma < 0.0 {
            return bad("require sigma_data > 0 and gamma >= 0");
        }
        Ok(())
    }

    fn unit_position(&self, t: f64) -> Result<f64, ScheduleError> {
        if !(self.sigma_min..=self.sigma_max).contains(&t) {
            return Err(ScheduleError::OutOfRange {
                t,
                lo: self.sigma_min,
                hi: self.sigma_max,
            });
        }
        Ok((t - self.sigma_min) / (self.sigma_max - self.sigma_min))
    }
}

/// Sorted training times with `t_0 = 0` prepended.
#[derive(Clone, Debug, PartialEq)]
pub struct TimeGrid {
    times: Vec<f64>,
}

impl TimeGrid {
    /// Wraps explicit times; they must start at 0 and increase strictly.
    pub fn new(times: Vec<f64>) -> Result<Self, ScheduleError> {
        if times.len() < 2 || times[0] != 0.0 || times.windows(2).any(|w| !(w[0] < w[1])) {
            return Err(ScheduleError::InvalidGrid);
        }
        Ok(Self { times })
    }

    /// Number of non-zero times `N`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    /// All times including `t_0`.
    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn time(&self, i: usize) -> f64 {
        self.times[i]
    }

    /// `(t_i, t_{i-1})` for `1 <= i <= N`.
    pub fn pair(&self, i: usize) -> (f64, f64) {
        (self.times[i], self.times[i - 1])
    }

    pub fn sigma_max(&self) -> f64 {
        *self.times.last().unwrap()
    }

    /// Index of the grid time closest to `t`.
    pub fn nearest_index(&self, t: f64) -> usize {
        let mut best = 1;
        for i in 1..self.times.len() {
            if (self.times[i] - t).abs() < (self.times[best] - t).abs() {
                best = i;
            }
        }
        best
    }
}

/// Karras-style discretization with `n` non-zero steps.
pub fn karras_grid(n: usize, cfg: &ScheduleConfig) -> Result<TimeGrid, ScheduleError> {
    if n < 2 {
        return Err(ScheduleError::TooFewSteps(n));
    }
    let inv_rho = 1.0 / cfg.rho;
    let lo = cfg.sigma_min.powf(inv_rho);
    let hi = cfg.sigma_max.powf(inv_rho);
    let mut times = Vec::with_capacity(n + 1);
    times.push(0.0);
    for i in 1..=n {
        let t = if i == 1 {
            cfg.sigma_min
        } else if i == n {
            cfg.sigma_max
        } else {
            let frac = (i - 1) as f64 / (n - 1) as f64;
            (lo + frac * (hi - lo)).powf(cfg.rho)
        };
        times.push(t);
    }
    TimeGrid::new(times)
}

/// Length of one curriculum stage, `K'`.
pub fn curriculum_stage_length(cfg: &ScheduleConfig) -> u64 {
    let ratio = (cfg.s1 / cfg.s0).max(1) as f64;
    let stages = ratio.log2() + 1.0;
    ((cfg.iterations as f64 / stages).floor() as u64).max(1)
}

/// Number of grid times at iteration `k`: `min(s0 * 2^floor(k/K'), s1) + 1`.
pub fn curriculum_steps(k: u64, cfg: &ScheduleConfig) -> usize {
    let doublings = (k / curriculum_stage_length(cfg)).min(63) as u32;
    let steps = cfg.s0.saturating_mul(1u64 << doublings).min(cfg.s1);
    steps as usize + 1
}

/// Consistency weight `1/t`.
pub fn lambda_weight(t: f64) -> Result<f64, ScheduleError> {
    if t <= 0.0 {
        return Err(ScheduleError::NonPositiveTime(t));
    }
    Ok(1.0 / t)
}

/// KL weight `t^2`.
pub fn beta_weight(t: f64) -> f64 {
    t * t
}

/// Output scale of the residual head; 0 at `sigma_min`, 1 at `sigma_max`.
pub fn c_out(t: f64, cfg: &ScheduleConfig) -> Result<f64, ScheduleError> {
    cfg.unit_position(t)
}

/// Average-decoder loss weight; 1 at `sigma_min`, `c_d` at `sigma_max`.
pub fn lambda_d(t: f64, cfg: &ScheduleConfig) -> Result<f64, ScheduleError> {
    let u = cfg.unit_position(t)?;
    Ok(cfg.c_d + (1.0 - cfg.c_d) * (1.0 - u))
}

/// Scalar fed to the time embedding: `ln(t) / 4`.
pub fn time_transform(t: f64) -> Result<f64, ScheduleError> {
    if t <= 0.0 {
        return Err(ScheduleError::NonPositiveTime(t));
    }
    Ok(t.ln() / 4.0)
}

/// Variance-exploding forward kernel `(a_t, b_t) = (1, t)`.
pub fn ve_kernel(t: f64) -> (f64, f64) {
    (1.0, t)
}

/// Scalings for the VE-kernel variant with an average-decoder skip.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Precond {
    pub c_skip: f64,
    pub c_out: f64,
    pub c_in: f64,
    pub lambda_d: f64,
}

pub fn scovae_precond(t: f64, cfg: &ScheduleConfig) -> Precond {
    let sd2 = cfg.sigma_data * cfg.sigma_data;
    let norm = (sd2 + t * t).sqrt();
    Precond {
        c_skip: 1.0,
        c_out: t * cfg.sigma_data / norm,
        c_in: 1.0 / norm,
        lambda_d: sd2 / (t * t + sd2),
    }
}

/// Uniform index `i` in `1..=N`; the loss pairs `(t_i, t_{i-1})`.
pub fn sample_time_index(rng: &mut RngState, grid: &TimeGrid) -> usize {
    1 + rng.below(grid.steps())
}

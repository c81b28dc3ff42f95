//! Sample-quality and latent diagnostics.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Likelihood, Model, ModelError, ModelKind};
use crate::numerics::{NumericsError, RngState, Tensor};
use crate::objective::{bernoulli_recon, ObjectiveError};
use crate::schedules::TimeGrid;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error("sample sets need at least {min} points, got {got}")]
    TooFewPoints { min: usize, got: usize },
    #[error("dimension mismatch: {0} vs {1}")]
    DimMismatch(usize, usize),
    #[error("non-finite metric {0}")]
    NonFinite(&'static str),
}

/// One evaluated metric, as logged.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric: String,
    pub value: f64,
    pub steps: usize,
    pub nfe: u64,
    pub seed: u64,
    pub wall_time: f64,
}

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt()
}

fn mean_pairwise(x: &Tensor, y: &Tensor) -> f64 {
    let mut total = 0.0;
    for i in 0..x.rows() {
        let xi = x.row(i);
        for j in 0..y.rows() {
            total += dist(xi, y.row(j));
        }
    }
    total / (x.rows() * y.rows()) as f64
}

/// V-statistic energy distance `2 E|x - y| - E|x - x'| - E|y - y'|`.
pub fn energy_distance(x: &Tensor, y: &Tensor) -> Result<f64, EvalError> {
    for t in [x, y] {
        if t.rows() < 2 {
            return Err(EvalError::TooFewPoints { min: 2, got: t.rows() });
        }
    }
    if x.cols() != y.cols() {
        return Err(EvalError::DimMismatch(x.cols(), y.cols()));
    }
    let ed = 2.0 * mean_pairwise(x, y) - mean_pairwise(x, x) - mean_pairwise(y, y);
    if !ed.is_finite() {
        return Err(EvalError::NonFinite("energy_distance"));
    }
    // rounding can leave tiny negatives on identical sets
    Ok(ed.max(0.0))
}

/// Per-element reconstruction error of encode -> decode at time `t`:
/// squared error for Gaussian models, binary cross-entropy in nats for
/// Bernoulli models.
pub fn recon_error(model: &Model<'_>, data: &Tensor, t: f64, rng: &mut RngState) -> Result<f64, EvalError> {
    let eps = rng.gaussian_sample(vec![data.rows(), model.spec.latent_dim]);
    let z = model.encode_latent(data, t, &eps)?;
    let out = model.generate(&z, t)?;
    let value = match model.spec.likelihood {
        Likelihood::Gaussian => {
            let se: f64 = out
                .data()
                .iter()
                .zip(data.data())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            se / data.len() as f64
        }
        Likelihood::Bernoulli => bernoulli_recon(&out, data)?,
    };
    if !value.is_finite() {
        return Err(EvalError::NonFinite("recon_error"));
    }
    Ok(value)
}

/// Batch-mean latent signal-to-noise ratio `|mu|^2 / |sigma|^2` at every
/// non-zero grid time.
pub fn snr_curve(model: &Model<'_>, data: &Tensor, grid: &TimeGrid) -> Result<Vec<(f64, f64)>, EvalError> {
    let mut out = Vec::with_capacity(grid.steps());
    let encoded = match model.spec.kind {
        ModelKind::Scovae => Some(model.encode_timefree(data)?),
        _ => None,
    };
    for &t in &grid.times()[1..] {
        let (mu, sigma) = match &encoded {
            Some(e) => (e.clone(), Tensor::full(e.shape().to_vec(), t)),
            None => model.encode(data, t)?,
        };
        let mut total = 0.0;
        for r in 0..mu.rows() {
            let m2: f64 = mu.row(r).iter().map(|v| v * v).sum();
            let s2: f64 = sigma.row(r).iter().map(|v| v * v).sum();
            total += m2 / s2;
        }
        out.push((t, total / mu.rows() as f64));
    }
    Ok(out)
}

/// Discrepancy between the first two moments of two sample sets.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct MomentReport {
    /// Euclidean norm of the mean difference.
    pub mean_gap: f64,
    /// Frobenius norm of the covariance difference.
    pub cov_gap: f64,
}

fn moments(x: &Tensor) -> (Vec<f64>, Vec<f64>) {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(x.row(r)) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut cov = vec![0.0; d * d];
    for r in 0..n {
        let row = x.row(r);
        for i in 0..d {
            let di = row[i] - mean[i];
            for j in 0..d {
                cov[i * d + j] += di * (row[j] - mean[j]);
            }
        }
    }
    let denom = (n.max(2) - 1) as f64;
    cov.iter_mut().for_each(|c| *c /= denom);
    (mean, cov)
}

pub fn moment_check(samples: &Tensor, reference: &Tensor) -> Result<MomentReport, EvalError> {
    if samples.cols() != reference.cols() {
        return Err(EvalError::DimMismatch(samples.cols(), reference.cols()));
    }
    for t in [samples, reference] {
        if t.rows() == 0 {
            return Err(EvalError::TooFewPoints { min: 1, got: 0 });
        }
    }
    let (ma, ca) = moments(samples);
    let (mb, cb) = moments(reference);
    let gap = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    Ok(MomentReport {
        mean_gap: gap(&ma, &mb),
        cov_gap: gap(&ca, &cb),
    })
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64, EvalError> {
    if a.len() != b.len() {
        return Err(EvalError::DimMismatch(a.len(), b.len()));
    }
    if a.len() < 2 {
        return Err(EvalError::TooFewPoints { min: 2, got: a.len() });
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    let rho = cov / (va * vb).sqrt();
    if !rho.is_finite() {
        return Err(EvalError::NonFinite("spearman"));
    }
    Ok(rho)
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

//! One-step and multistep generation, greedy time search, interpolation and
//! latent attribute editing.

use thiserror::Error;

use crate::model::{Model, ModelError};
use crate::numerics::{NumericsError, RngState, Tensor};
use crate::schedules::{ScheduleConfig, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SamplerError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error("invalid sampling schedule: {0}")]
    InvalidSchedule(String),
    #[error("mixing factor {0} outside [0, 1]")]
    InvalidAlpha(f64),
    #[error("attribute sets must be non-empty")]
    EmptyAttributeSet,
    #[error("sample count must be positive")]
    NoSamples,
    #[error("evaluation failed: {0}")]
    Eval(String),
}

/// Times at which Algorithm-2 style sampling decodes.
///
/// The first time is always `sigma_max`; later times re-noise the current
/// sample and need not be decreasing.
#[derive(Clone, Debug, PartialEq)]
pub struct SampleSchedule {
    times: Vec<f64>,
}

impl SampleSchedule {
    pub fn new(times: Vec<f64>, cfg: &ScheduleConfig) -> Result<Self, SamplerError> {
        let bad = |m: String| Err(SamplerError::InvalidSchedule(m));
        match times.first() {
            None => return bad("no times".into()),
            Some(&t) if t != cfg.sigma_max => {
                return bad(format!("first time {t} is not sigma_max = {}", cfg.sigma_max))
            }
            _ => {}
        }
        for (k, &t) in times.iter().enumerate() {
            if !(t >= cfg.sigma_min && t <= cfg.sigma_max) {
                return bad(format!("time {t} outside [{}, {}]", cfg.sigma_min, cfg.sigma_max));
            }
            if times[..k].contains(&t) {
                return bad(format!("time {t} repeated"));
            }
        }
        Ok(Self { times })
    }

    pub fn one_step(cfg: &ScheduleConfig) -> Self {
        Self {
            times: vec![cfg.sigma_max],
        }
    }

    /// `sigma_max` followed by the given re-noising times.
    pub fn with_times(rest: &[f64], cfg: &ScheduleConfig) -> Result<Self, SamplerError> {
        let mut times = vec![cfg.sigma_max];
        times.extend_from_slice(rest);
        Self::new(times, cfg)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Function evaluations per sample: `k` decoder and `k - 1` encoder passes.
    pub fn nfe(&self) -> u64 {
        2 * self.times.len() as u64 - 1
    }
}

/// Generates `n` samples; returns them with the measured number of network
/// evaluations.
pub fn sample(
    model: &Model<'_>,
    schedule: &SampleSchedule,
    rng: &mut RngState,
    n: usize,
) -> Result<(Tensor, u64), SamplerError> {
    if n == 0 {
        return Err(SamplerError::NoSamples);
    }
    let spec = model.spec;
    SampleSchedule::new(schedule.times.clone(), &spec.schedule)?;
    let before = model.counters.snapshot();
    let scale = model.prior_scale();
    let z = rng.gaussian_sample(vec![n, spec.latent_dim]).map(|v| v * scale);
    let t0 = if schedule.len() == 1 {
        model.generation_time()
    } else {
        schedule.times[0]
    };
    let mut x = model.decode_to_data(&z, t0)?;
    for &t in &schedule.times[1..] {
        let eps = rng.gaussian_sample(vec![n, spec.latent_dim]);
        let z = model.encode_latent(&x, t, &eps)?;
        x = model.decode_to_data(&z, t)?;
    }
    let nfe = model.counters.snapshot().since(&before).nfe();
    Ok((x, nfe))
}

/// Encode at `t` with fresh noise and decode at `t`.
pub fn reconstruct(model: &Model<'_>, x: &Tensor, t: f64, rng: &mut RngState) -> Result<Tensor, SamplerError> {
    let eps = rng.gaussian_sample(vec![x.rows(), model.spec.latent_dim]);
    let z = model.encode_latent(x, t, &eps)?;
    Ok(model.decode_to_data(&z, t)?)
}

/// Result of [`greedy_step_search`].
#[derive(Clone, Debug, PartialEq)]
pub struct SearchResult {
    pub schedule: SampleSchedule,
    /// Metric of the best schedule with `k + 1` steps at index `k`.
    pub metrics: Vec<f64>,
    /// Number of candidates evaluated at each extension.
    pub sweep_sizes: Vec<usize>,
}

/// Greedily extends the schedule one time at a time, trying every grid time
/// not already used and keeping the one that minimizes `eval_fn`.
///
/// All candidates are sampled from the same seed so that they are compared
/// on common noise.
pub fn greedy_step_search<F>(
    model: &Model<'_>,
    grid: &TimeGrid,
    mut eval_fn: F,
    max_steps: usize,
    n: usize,
    seed: u64,
) -> Result<SearchResult, SamplerError>
where
    F: FnMut(&Tensor) -> Result<f64, SamplerError>,
{
    let cfg = &model.spec.schedule;
    let mut evaluate = |s: &SampleSchedule| -> Result<f64, SamplerError> {
        let mut rng = RngState::new(seed, crate::numerics::streams::SAMPLE);
        let (x, _) = sample(model, s, &mut rng, n)?;
        eval_fn(&x)
    };
    let mut schedule = SampleSchedule::one_step(cfg);
    let mut metrics = vec![evaluate(&schedule)?];
    let mut sweep_sizes = Vec::new();
    while schedule.len() < max_steps {
        let candidates: Vec<f64> = grid.times()[1..]
            .iter()
            .copied()
            .filter(|t| !schedule.times.contains(t))
            .collect();
        if candidates.is_empty() {
            break;
        }
        sweep_sizes.push(candidates.len());
        let mut best: Option<(f64, SampleSchedule)> = None;
        for t in candidates {
            let mut times = schedule.times.clone();
            times.push(t);
            let s = SampleSchedule::new(times, cfg)?;
            let m = evaluate(&s)?;
            if best.as_ref().is_none_or(|(bm, _)| m < *bm) {
                best = Some((m, s));
            }
        }
        let (m, s) = best.expect("non-empty sweep");
        metrics.push(m);
        schedule = s;
    }
    Ok(SearchResult {
        schedule,
        metrics,
        sweep_sizes,
    })
}

/// Decodes `(1 - alpha) z0 + alpha z1` where both latents share one noise draw.
pub fn interpolate(
    model: &Model<'_>,
    x0: &Tensor,
    x1: &Tensor,
    t: f64,
    alpha: f64,
    rng: &mut RngState,
) -> Result<Tensor, SamplerError> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(SamplerError::InvalidAlpha(alpha));
    }
    let eps = rng.gaussian_sample(vec![x0.rows(), model.spec.latent_dim]);
    let z0 = model.encode_latent(x0, t, &eps)?;
    let z1 = model.encode_latent(x1, t, &eps)?;
    let z = z0.zip_map(&z1, |a, b| (1.0 - alpha) * a + alpha * b)?;
    Ok(model.decode_to_data(&z, t)?)
}

fn mean_latent(model: &Model<'_>, x: &Tensor, t: f64, rng: &mut RngState) -> Result<Vec<f64>, SamplerError> {
    let eps = rng.gaussian_sample(vec![x.rows(), model.spec.latent_dim]);
    let z = model.encode_latent(x, t, &eps)?;
    let d = z.cols();
    let mut m = vec![0.0; d];
    for r in 0..z.rows() {
        for (acc, v) in m.iter_mut().zip(z.row(r)) {
            *acc += v;
        }
    }
    Ok(m.into_iter().map(|v| v / z.rows() as f64).collect())
}

/// Attribute direction `mean(z_p) - mean(z_n)` at time `t`.
pub fn attribute_direction(
    model: &Model<'_>,
    positives: &Tensor,
    negatives: &Tensor,
    t: f64,
    rng: &mut RngState,
) -> Result<Vec<f64>, SamplerError> {
    if positives.rows() == 0 || negatives.rows() == 0 {
        return Err(SamplerError::EmptyAttributeSet);
    }
    let p = mean_latent(model, positives, t, rng)?;
    let n = mean_latent(model, negatives, t, rng)?;
    Ok(p.iter().zip(&n).map(|(a, b)| a - b).collect())
}

/// Decodes `z + psi * z_a`, where `z` encodes `x` with the first noise draw
/// of `rng`, so `psi = 0` reproduces [`reconstruct`] exactly.
#[allow(clippy::too_many_arguments)]
pub fn attribute_edit(
    model: &Model<'_>,
    x: &Tensor,
    positives: &Tensor,
    negatives: &Tensor,
    psi: f64,
    t: f64,
    rng: &mut RngState,
) -> Result<Tensor, SamplerError> {
    if positives.rows() == 0 || negatives.rows() == 0 {
        return Err(SamplerError::EmptyAttributeSet);
    }
    let eps = rng.gaussian_sample(vec![x.rows(), model.spec.latent_dim]);
    let z = model.encode_latent(x, t, &eps)?;
    if psi == 0.0 {
        return Ok(model.decode_to_data(&z, t)?);
    }
    let za = attribute_direction(model, positives, negatives, t, rng)?;
    let d = za.len();
    let shifted: Vec<f64> = z
        .data()
        .iter()
        .enumerate()
        .map(|(k, v)| v + psi * za[k % d])
        .collect();
    let z = Tensor::new(z.shape().to_vec(), shifted)?;
    Ok(model.decode_to_data(&z, t)?)
}

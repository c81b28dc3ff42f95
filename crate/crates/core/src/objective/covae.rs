//! Training objectives: the consistency VAE loss and its baselines.

use crate::model::{reparameterize, BoundModel, Likelihood, Masks, ModelKind};
use crate::numerics::{streams, RngState, Tape, Tensor, Var};
use crate::schedules::{self, TimeGrid};

use super::losses::{
    bce_with_logits, default_huber_constant, kl_gaussian, pseudo_huber, squared_error,
};
use super::{LossConfig, ObjectiveError, Variant};

/// Per-batch loss terms and the weights used to assemble them.
///
/// `total == lambda * (l_cm + lambda_d * l_d) + beta * l_kl`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossBreakdown {
    pub l_cm: f64,
    pub l_d: f64,
    pub l_kl: f64,
    pub total: f64,
    pub t_index: usize,
    pub t_value: f64,
    pub lambda: f64,
    pub lambda_d: f64,
    pub beta: f64,
}

impl LossBreakdown {
    pub fn assembled(&self) -> f64 {
        self.lambda * (self.l_cm + self.lambda_d * self.l_d) + self.beta * self.l_kl
    }
}

/// A loss value still attached to its tape.
pub struct LossOutput {
    pub breakdown: LossBreakdown,
    pub total: Var,
}

/// Random streams consumed by one loss evaluation.
#[derive(Clone, Debug)]
pub struct LossRng {
    pub time: RngState,
    pub noise: RngState,
    pub dropout: RngState,
}

impl LossRng {
    pub fn new(seed: u64) -> Self {
        Self {
            time: RngState::new(seed, streams::TIME),
            noise: RngState::new(seed, streams::NOISE),
            dropout: RngState::new(seed, streams::DROPOUT),
        }
    }
}

/// Draws shared by the prediction and the target of one step.
#[derive(Clone, Debug)]
pub struct Draws {
    pub index: usize,
    pub eps: Tensor,
    pub masks: Masks,
}

impl Draws {
    pub fn sample(rng: &mut LossRng, live: &BoundModel<'_>, grid: &TimeGrid, batch: usize) -> Self {
        let index = schedules::sample_time_index(&mut rng.time, grid);
        let eps = rng.noise.gaussian_sample(vec![batch, live.spec.latent_dim]);
        let masks = live.spec.sample_masks(&mut rng.dropout, batch);
        Self { index, eps, masks }
    }
}

fn scalar(tape: &Tape, v: Var) -> f64 {
    tape.value(v).data()[0]
}

#[allow(clippy::too_many_arguments)]
fn assemble(
    tape: &mut Tape,
    l_cm: Option<Var>,
    l_d: Option<Var>,
    l_kl: Option<Var>,
    lambda: f64,
    lambda_d: f64,
    beta: f64,
    t_index: usize,
    t_value: f64,
) -> Result<LossOutput, ObjectiveError> {
    let zero = tape.constant(Tensor::scalar(0.0));
    let (cm, d, kl) = (l_cm.unwrap_or(zero), l_d.unwrap_or(zero), l_kl.unwrap_or(zero));
    let wd = tape.scale(d, lambda_d);
    let rec = tape.add(cm, wd)?;
    let rec = tape.scale(rec, lambda);
    let wkl = tape.scale(kl, beta);
    let total = tape.add(rec, wkl)?;
    let breakdown = LossBreakdown {
        l_cm: scalar(tape, cm),
        l_d: scalar(tape, d),
        l_kl: scalar(tape, kl),
        total: scalar(tape, total),
        t_index,
        t_value,
        lambda,
        lambda_d,
        beta,
    };
    for (term, v) in [
        ("consistency", breakdown.l_cm),
        ("average decoder", breakdown.l_d),
        ("kl", breakdown.l_kl),
        ("total", breakdown.total),
    ] {
        if !v.is_finite() {
            return Err(ObjectiveError::NonFiniteLoss { term });
        }
    }
    Ok(LossOutput { breakdown, total })
}

fn reconstruction(
    tape: &mut Tape,
    likelihood: Likelihood,
    pred: Var,
    x: Var,
) -> Result<Var, ObjectiveError> {
    Ok(match likelihood {
        Likelihood::Gaussian => squared_error(tape, pred, x)?,
        Likelihood::Bernoulli => bce_with_logits(tape, pred, x)?,
    })
}

fn check_batch(x: &Tensor) -> Result<(), ObjectiveError> {
    if x.rows() == 0 || x.is_empty() {
        return Err(ObjectiveError::EmptyBatch);
    }
    Ok(())
}

/// Consistency loss for `x` at grid index `draws.index`.
///
/// The prediction uses the live parameters at `t_i`; the target is the
/// frozen model's output at `t_{i-1}` from the same noise and dropout
/// masks, computed without gradient. At `i == 1` the target is `x` itself.
#[allow(clippy::too_many_arguments)]
pub fn covae_loss_with(
    tape: &mut Tape,
    x: &Tensor,
    draws: &Draws,
    live: &BoundModel<'_>,
    frozen: &BoundModel<'_>,
    grid: &TimeGrid,
    cfg: &LossConfig,
) -> Result<LossOutput, ObjectiveError> {
    check_batch(x)?;
    let spec = live.spec;
    let i = draws.index;
    let (t_i, t_prev) = grid.pair(i);
    let xv = tape.constant(x.clone());
    let eps = tape.constant(draws.eps.clone());
    let masks = Some(&draws.masks);

    let (mu, sigma) = live.encode(tape, xv, t_i, masks)?;
    let z = reparameterize(tape, mu, sigma, eps)?;
    let (pred, xhat) = if spec.boundary {
        live.covae_decode(tape, z, t_i, masks)?
    } else {
        let (raw, _) = live.decode_heads(tape, z, t_i, masks)?;
        (raw, raw)
    };

    let target = if i == 1 {
        xv
    } else {
        tape.no_grad(|tape| -> Result<Var, ObjectiveError> {
            let (mu, sigma) = frozen.encode(tape, xv, t_prev, masks)?;
            let z = reparameterize(tape, mu, sigma, eps)?;
            let out = frozen.generate(tape, z, t_prev, masks)?;
            Ok(match spec.likelihood {
                Likelihood::Gaussian => out,
                Likelihood::Bernoulli => tape.sigmoid(out),
            })
        })?
    };

    let l_cm = match spec.likelihood {
        Likelihood::Gaussian => {
            let c = cfg.huber_c.unwrap_or_else(|| default_huber_constant(spec.data_dim));
            pseudo_huber(tape, pred, target, c)?
        }
        Likelihood::Bernoulli => bce_with_logits(tape, pred, target)?,
    };
    let l_d = if spec.boundary {
        Some(reconstruction(tape, spec.likelihood, xhat, xv)?)
    } else {
        None
    };
    let l_kl = kl_gaussian(tape, mu, sigma)?;

    let lambda = schedules::lambda_weight(t_i)?;
    let lambda_d = schedules::lambda_d(t_i, &spec.schedule)?;
    let beta = schedules::beta_weight(t_i);
    assemble(tape, Some(l_cm), l_d, Some(l_kl), lambda, lambda_d, beta, i, t_i)
}

/// Consistency loss with the VE-kernel latent process and a time-free encoder.
///
/// The encoder runs once; both latents reuse the encoding and `eps`.
#[allow(clippy::too_many_arguments)]
pub fn scovae_loss_with(
    tape: &mut Tape,
    x: &Tensor,
    draws: &Draws,
    live: &BoundModel<'_>,
    frozen: &BoundModel<'_>,
    grid: &TimeGrid,
    cfg: &LossConfig,
) -> Result<LossOutput, ObjectiveError> {
    check_batch(x)?;
    let spec = live.spec;
    let i = draws.index;
    let (t_i, t_prev) = grid.pair(i);
    let xv = tape.constant(x.clone());
    let eps = tape.constant(draws.eps.clone());
    let masks = Some(&draws.masks);

    let e = live.encode_timefree(tape, xv, masks)?;
    let kernel = |tape: &mut Tape, e: Var, t: f64| -> Result<Var, ObjectiveError> {
        let (a, b) = schedules::ve_kernel(t);
        let ea = tape.scale(e, a);
        let nb = tape.scale(eps, b);
        Ok(tape.add(ea, nb)?)
    };
    let z = kernel(tape, e, t_i)?;
    let (pred, xhat) = live.covae_decode(tape, z, t_i, masks)?;

    let target = if i == 1 {
        xv
    } else {
        tape.no_grad(|tape| -> Result<Var, ObjectiveError> {
            let e_frozen = tape.detach(e);
            let z = kernel(tape, e_frozen, t_prev)?;
            Ok(frozen.generate(tape, z, t_prev, masks)?)
        })?
    };

    let c = cfg.huber_c.unwrap_or_else(|| default_huber_constant(spec.data_dim));
    let l_cm = pseudo_huber(tape, pred, target, c)?;
    let l_d = squared_error(tape, xhat, xv)?;
    let batch = tape.value(e).rows() as f64;
    let e2 = tape.square(e);
    let e2 = tape.sum(e2);
    let l_kl = tape.scale(e2, 1.0 / batch);

    let pre = schedules::scovae_precond(t_i, &spec.schedule);
    let lambda = schedules::lambda_weight(t_i)?;
    let gamma = if spec.normalize_latent {
        0.0
    } else {
        spec.schedule.gamma
    };
    assemble(
        tape,
        Some(l_cm),
        Some(l_d),
        Some(l_kl),
        lambda,
        pre.lambda_d,
        gamma,
        i,
        t_i,
    )
}

/// Reconstruction plus `beta`-weighted KL at a single time `t`.
fn vae_at(
    tape: &mut Tape,
    x: &Tensor,
    draws: &Draws,
    live: &BoundModel<'_>,
    t: f64,
    beta: f64,
    t_index: usize,
) -> Result<LossOutput, ObjectiveError> {
    check_batch(x)?;
    let xv = tape.constant(x.clone());
    let eps = tape.constant(draws.eps.clone());
    let masks = Some(&draws.masks);
    let (mu, sigma) = live.encode(tape, xv, t, masks)?;
    let z = reparameterize(tape, mu, sigma, eps)?;
    let (xhat, _) = live.decode_heads(tape, z, t, masks)?;
    let rec = reconstruction(tape, live.spec.likelihood, xhat, xv)?;
    let kl = kl_gaussian(tape, mu, sigma)?;
    assemble(tape, None, Some(rec), Some(kl), 1.0, 1.0, beta, t_index, t)
}

/// Classic (beta-)VAE loss at the model's fixed time token.
pub fn vae_loss_with(
    tape: &mut Tape,
    x: &Tensor,
    draws: &Draws,
    live: &BoundModel<'_>,
    beta: f64,
) -> Result<LossOutput, ObjectiveError> {
    vae_at(tape, x, draws, live, live.spec.vae_time, beta, 0)
}

/// Time-dependent VAE loss: reconstruction plus `beta(t) * KL` at `t_i`.
pub fn t_vae_loss_with(
    tape: &mut Tape,
    x: &Tensor,
    draws: &Draws,
    live: &BoundModel<'_>,
    grid: &TimeGrid,
) -> Result<LossOutput, ObjectiveError> {
    let t = grid.time(draws.index);
    vae_at(tape, x, draws, live, t, schedules::beta_weight(t), draws.index)
}

/// Draws randomness and evaluates the loss selected by `cfg.variant`.
///
/// `frozen` must hold the same parameter values as `live`; it is only used
/// inside stop-gradient scopes.
#[allow(clippy::too_many_arguments)]
pub fn compute_loss(
    tape: &mut Tape,
    x: &Tensor,
    rng: &mut LossRng,
    live: &BoundModel<'_>,
    frozen: &BoundModel<'_>,
    grid: &TimeGrid,
    cfg: &LossConfig,
) -> Result<LossOutput, ObjectiveError> {
    check_batch(x)?;
    let expected = cfg.variant.model_kind();
    if live.spec.kind != expected {
        return Err(ObjectiveError::KindMismatch {
            variant: cfg.variant,
            kind: live.spec.kind,
        });
    }
    let draws = Draws::sample(rng, live, grid, x.rows());
    match cfg.variant {
        Variant::Covae | Variant::CovaeBernoulli => {
            covae_loss_with(tape, x, &draws, live, frozen, grid, cfg)
        }
        Variant::Scovae | Variant::ScovaeNorm => {
            scovae_loss_with(tape, x, &draws, live, frozen, grid, cfg)
        }
        Variant::Vae => vae_loss_with(tape, x, &draws, live, 1.0),
        Variant::BetaVae => vae_loss_with(tape, x, &draws, live, cfg.beta),
        Variant::TVae => t_vae_loss_with(tape, x, &draws, live, grid),
    }
}

impl Variant {
    pub fn model_kind(self) -> ModelKind {
        match self {
            Variant::Covae | Variant::CovaeBernoulli => ModelKind::Covae,
            Variant::Scovae | Variant::ScovaeNorm => ModelKind::Scovae,
            Variant::Vae | Variant::BetaVae => ModelKind::Vae,
            Variant::TVae => ModelKind::TimeVae,
        }
    }
}

//! Losses, the consistency VAE objective and its baselines, and the optimizer.

mod covae;
mod losses;
mod optim;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelError, ModelKind};
use crate::numerics::NumericsError;
use crate::schedules::ScheduleError;

pub use covae::{
    compute_loss, covae_loss_with, scovae_loss_with, t_vae_loss_with, vae_loss_with, Draws,
    LossBreakdown, LossOutput, LossRng,
};
pub use losses::{
    bce_with_logits, bernoulli_recon, default_huber_constant, kl_gaussian, kl_gaussian_value,
    pseudo_huber, pseudo_huber_value, squared_error,
};
pub use optim::{clip_global_norm, global_norm, Optimizer, OptimizerConfig, OptimizerKind};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ObjectiveError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("encoder scale must be positive")]
    NonPositiveSigma,
    #[error("bernoulli targets must be 0 or 1")]
    NonBinaryTarget,
    #[error("empty batch")]
    EmptyBatch,
    #[error("non-finite {term} loss")]
    NonFiniteLoss { term: &'static str },
    #[error("loss {variant:?} cannot train a {kind:?} model")]
    KindMismatch { variant: Variant, kind: ModelKind },
    #[error("training diverged: {0}")]
    Divergence(String),
}

/// Which training objective to optimize.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "covae")]
    Covae,
    #[serde(rename = "s-covae")]
    Scovae,
    /// Time-free encoder with layer-norm/tanh latents instead of the penalty.
    #[serde(rename = "s-covae-norm")]
    ScovaeNorm,
    #[serde(rename = "vae")]
    Vae,
    #[serde(rename = "beta-vae")]
    BetaVae,
    #[serde(rename = "t-vae")]
    TVae,
    #[serde(rename = "covae-bernoulli")]
    CovaeBernoulli,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Covae => "covae",
            Variant::Scovae => "s-covae",
            Variant::ScovaeNorm => "s-covae-norm",
            Variant::Vae => "vae",
            Variant::BetaVae => "beta-vae",
            Variant::TVae => "t-vae",
            Variant::CovaeBernoulli => "covae-bernoulli",
        }
    }

    /// Whether the objective samples times from the training grid.
    pub fn uses_grid(self) -> bool {
        !matches!(self, Variant::Vae | Variant::BetaVae)
    }
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    /// KL weight of `beta-vae`.
    pub beta: f64,
    /// Pseudo-Huber constant; `0.00054 * sqrt(D)` when unset.
    pub huber_c: Option<f64>,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Covae,
            beta: 1.0,
            huber_c: None,
        }
    }
}

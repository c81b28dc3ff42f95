//! Benchmark fixtures shared by the criterion targets.

use covae_core::model::{Likelihood, ModelBundle, ModelKind, ModelSpec};
use covae_core::schedules::ScheduleConfig;

/// Small MLP model of the requested shape.
pub fn bundle(kind: ModelKind, data_dim: usize, latent_dim: usize, hidden: &[usize]) -> ModelBundle {
    let spec = ModelSpec {
        kind,
        likelihood: Likelihood::Gaussian,
        data_dim,
        latent_dim,
        hidden: hidden.to_vec(),
        time_features: 16,
        dropout: 0.0,
        boundary: true,
        normalize_latent: false,
        vae_time: 1.0,
        schedule: ScheduleConfig::default(),
    };
    ModelBundle::init(spec, 0, 0.999).expect("valid bench spec")
}

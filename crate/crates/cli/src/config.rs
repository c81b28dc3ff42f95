//! Run configuration: JSON document plus dotted command-line overrides.

use std::path::PathBuf;

use covae_core::model::{Likelihood, ModelSpec};
use covae_core::objective::Variant;
use covae_core::schedules::ScheduleConfig;
use covae_core::train::TrainConfig;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::CliError;

/// Default training seed.
pub const TRAIN_SEED: u64 = 42;
/// Default evaluation seed.
pub const EVAL_SEED: u64 = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    /// `gaussians8`, `two_moons`, `checkerboard` or `mnist`.
    pub kind: String,
    /// Directory holding the IDX files for `mnist`.
    pub path: Option<PathBuf>,
    /// Images kept from the IDX file.
    pub subset_size: usize,
    /// Training points drawn for synthetic data.
    pub n: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            kind: "gaussians8".into(),
            path: None,
            subset_size: 4096,
            n: 10_000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub hidden: Vec<usize>,
    pub latent_dim: usize,
    pub time_features: usize,
    pub dropout: f64,
    /// Skip/residual decoder with the average-decoder term.
    pub boundary: bool,
    /// Time token used by `vae` and `beta-vae`.
    pub vae_time: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            hidden: vec![128, 128],
            latent_dim: 2,
            time_features: 16,
            dropout: 0.0,
            boundary: true,
            vae_time: 1.0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    /// Generated samples per metric.
    pub n_samples: usize,
    /// Held-out reference points per metric.
    pub n_reference: usize,
    /// Evaluate every this many steps; 0 evaluates only at the end.
    pub eval_every: u64,
    /// Loss rows are logged every this many steps.
    pub log_every: u64,
    /// Sampling step counts evaluated.
    pub steps: Vec<usize>,
    /// Grid size for the greedy search of intermediate times.
    pub search_points: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            n_samples: 2000,
            n_reference: 2000,
            eval_every: 0,
            log_every: 100,
            steps: vec![1, 2],
            search_points: 32,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub schedule: ScheduleConfig,
    pub train: TrainConfig,
    pub eval: EvalConfig,
    pub seed: u64,
    pub eval_seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            data: DataConfig::default(),
            model: ModelConfig::default(),
            schedule: ScheduleConfig::default(),
            train: TrainConfig::default(),
            eval: EvalConfig::default(),
            seed: TRAIN_SEED,
            eval_seed: EVAL_SEED,
        }
    }
}

impl RunConfig {
    /// Parses a JSON document (empty means all defaults), applies
    /// `--a.b=value` overrides and validates the result.
    pub fn from_json(text: &str, overrides: &[String]) -> Result<Self, CliError> {
        let mut doc: Value = if text.trim().is_empty() {
            Value::Object(Default::default())
        } else {
            serde_json::from_str(text).map_err(|e| CliError::Config(e.to_string()))?
        };
        for o in overrides {
            apply_override(&mut doc, o)?;
        }
        let cfg: RunConfig =
            serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        let bad = |m: String| Err(CliError::Config(m));
        self.model_spec(0)
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        self.train
            .validate()
            .map_err(|e| CliError::Config(e.to_string()))?;
        match self.data.kind.as_str() {
            "mnist" => {
                if self.data.path.is_none() {
                    return bad("data.path is required for mnist".into());
                }
            }
            other => {
                other
                    .parse::<covae_core::datakit::Toy2d>()
                    .map_err(|e| CliError::Config(e.to_string()))?;
                if self.data.n < 2 {
                    return bad("data.n must be at least 2".into());
                }
            }
        }
        if self.eval.n_samples < 2 || self.eval.n_reference < 2 {
            return bad("eval sample sizes must be at least 2".into());
        }
        if self.eval.steps.contains(&0) {
            return bad("eval.steps entries must be positive".into());
        }
        if self.eval.log_every == 0 {
            return bad("eval.log_every must be positive".into());
        }
        Ok(())
    }

    pub fn is_image(&self) -> bool {
        self.data.kind == "mnist"
    }

    /// Network description implied by the data and loss variant.
    pub fn model_spec(&self, data_dim: usize) -> ModelSpec {
        let variant = self.train.loss.variant;
        ModelSpec {
            kind: variant.model_kind(),
            likelihood: if variant == Variant::CovaeBernoulli {
                Likelihood::Bernoulli
            } else {
                Likelihood::Gaussian
            },
            data_dim: if data_dim == 0 { self.data_dim() } else { data_dim },
            latent_dim: self.model.latent_dim,
            hidden: self.model.hidden.clone(),
            time_features: self.model.time_features,
            dropout: self.model.dropout,
            boundary: self.model.boundary,
            normalize_latent: variant == Variant::ScovaeNorm,
            vae_time: self.model.vae_time,
            schedule: self.schedule.clone(),
        }
    }

    /// Dimension of one example.
    pub fn data_dim(&self) -> usize {
        if self.is_image() {
            784
        } else {
            2
        }
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    /// SHA-256 of the compact JSON encoding, hex encoded.
    pub fn hash(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex::encode(Sha256::digest(&bytes))
    }
}

/// Applies one `--a.b.c=value` override. The value is parsed as JSON when
/// possible and taken as a string otherwise.
pub fn apply_override(doc: &mut Value, arg: &str) -> Result<(), CliError> {
    let body = arg
        .strip_prefix("--")
        .ok_or_else(|| CliError::Config(format!("override {arg:?} must start with --")))?;
    let (path, raw) = body
        .split_once('=')
        .ok_or_else(|| CliError::Config(format!("override {arg:?} needs =value")))?;
    let value = serde_json::from_str(raw).unwrap_or_else(|_| Value::String(raw.to_string()));
    let keys: Vec<&str> = path.split('.').collect();
    if keys.iter().any(|k| k.is_empty()) {
        return Err(CliError::Config(format!("bad override path {path:?}")));
    }
    let mut cur = doc;
    for key in &keys[..keys.len() - 1] {
        let obj = cur
            .as_object_mut()
            .ok_or_else(|| CliError::Config(format!("{path}: {key} is not a section")))?;
        cur = obj
            .entry(key.to_string())
            .or_insert_with(|| Value::Object(Default::default()));
    }
    let obj = cur
        .as_object_mut()
        .ok_or_else(|| CliError::Config(format!("{path}: parent is not a section")))?;
    obj.insert(keys[keys.len() - 1].to_string(), value);
    Ok(())
}

//! Training driver: curriculum, minibatching, optimizer and EMA updates.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{ModelBundle, ModelError};
use crate::numerics::{streams, RngState, Tape, Tensor};
use crate::objective::{
    compute_loss, LossBreakdown, LossConfig, LossRng, ObjectiveError, Optimizer, OptimizerConfig,
};
use crate::schedules::{self, ScheduleError, TimeGrid};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Objective(#[from] ObjectiveError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("invalid training config: {0}")]
    InvalidConfig(String),
    #[error("diverged at step {step} after {bad} consecutive non-finite steps: {last}")]
    Diverged { step: u64, bad: u32, last: String },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub ema_rate: f64,
    pub loss: LossConfig,
    /// Consecutive non-finite steps tolerated before aborting.
    pub max_bad_steps: u32,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_size: 128,
            optimizer: OptimizerConfig::default(),
            ema_rate: 0.9999,
            loss: LossConfig::default(),
            max_bad_steps: 10,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::InvalidConfig(m.into()));
        if self.batch_size < 2 {
            return bad("batch_size must be at least 2");
        }
        if !(self.optimizer.lr > 0.0) {
            return bad("learning rate must be positive");
        }
        if !(0.0..1.0).contains(&self.ema_rate) {
            return bad("ema_rate must be in [0, 1)");
        }
        if !(self.optimizer.grad_clip > 0.0) {
            return bad("grad_clip must be positive");
        }
        if self.max_bad_steps == 0 {
            return bad("max_bad_steps must be positive");
        }
        Ok(())
    }
}

/// Outcome of one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub enum StepOutcome {
    Updated {
        breakdown: LossBreakdown,
        grad_norm: f64,
    },
    /// Loss or gradient was non-finite; parameters were left untouched.
    Skipped { reason: String },
}

#[derive(Clone, Debug, PartialEq)]
pub struct StepReport {
    /// Zero-based iteration index `k`.
    pub step: u64,
    /// Current number of non-zero grid times.
    pub grid_steps: usize,
    pub outcome: StepOutcome,
}

/// Mutable training state around a [`ModelBundle`].
pub struct Trainer {
    pub bundle: ModelBundle,
    pub config: TrainConfig,
    optimizer: Optimizer,
    loss_rng: LossRng,
    data_rng: RngState,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
    grid: Option<TimeGrid>,
    bad_steps: u32,
}

impl Trainer {
    pub fn new(mut bundle: ModelBundle, config: TrainConfig, seed: u64) -> Result<Self, TrainError> {
        config.validate()?;
        bundle.spec.validate()?;
        let expected = config.loss.variant.model_kind();
        if bundle.spec.kind != expected {
            return Err(ObjectiveError::KindMismatch {
                variant: config.loss.variant,
                kind: bundle.spec.kind,
            }
            .into());
        }
        bundle.ema.rate = config.ema_rate;
        let optimizer = Optimizer::new(config.optimizer.clone(), &bundle.params);
        Ok(Self {
            bundle,
            config,
            optimizer,
            loss_rng: LossRng::new(seed),
            data_rng: RngState::new(seed, streams::DATA),
            order: Vec::new(),
            cursor: 0,
            step: 0,
            grid: None,
            bad_steps: 0,
        })
    }

    pub fn step_index(&self) -> u64 {
        self.step
    }

    /// Training grid for the current iteration, rebuilt when the curriculum
    /// advances.
    pub fn grid(&mut self) -> Result<&TimeGrid, TrainError> {
        let cfg = &self.bundle.spec.schedule;
        let n = schedules::curriculum_steps(self.step, cfg) - 1;
        if self.grid.as_ref().map(|g| g.steps()) != Some(n) {
            self.grid = Some(schedules::karras_grid(n, cfg)?);
        }
        Ok(self.grid.as_ref().unwrap())
    }

    fn next_batch(&mut self, data: &Tensor) -> Tensor {
        let n = data.rows();
        let b = self.config.batch_size.min(n);
        let mut idx = Vec::with_capacity(b);
        while idx.len() < b {
            if self.cursor >= self.order.len() {
                self.order = self.data_rng.permutation(n);
                self.cursor = 0;
            }
            idx.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        data.gather_rows(&idx)
    }

    /// One minibatch update. Non-finite losses or gradients skip the update;
    /// too many in a row abort with [`TrainError::Diverged`].
    pub fn step(&mut self, data: &Tensor) -> Result<StepReport, TrainError> {
        if data.rows() == 0 {
            return Err(ObjectiveError::EmptyBatch.into());
        }
        let grid = self.grid()?.clone();
        let x = self.next_batch(data);
        let step = self.step;
        self.step += 1;

        let outcome = match self.try_update(&x, &grid) {
            Ok((breakdown, grad_norm)) => {
                self.bad_steps = 0;
                self.bundle.ema.update(&self.bundle.params);
                StepOutcome::Updated {
                    breakdown,
                    grad_norm,
                }
            }
            Err(e @ (ObjectiveError::NonFiniteLoss { .. }
            | ObjectiveError::NonPositiveSigma
            | ObjectiveError::Divergence(_)
            | ObjectiveError::Numerics(_))) => {
                self.bad_steps += 1;
                if self.bad_steps >= self.config.max_bad_steps {
                    return Err(TrainError::Diverged {
                        step,
                        bad: self.bad_steps,
                        last: e.to_string(),
                    });
                }
                StepOutcome::Skipped {
                    reason: e.to_string(),
                }
            }
            Err(e) => return Err(e.into()),
        };
        Ok(StepReport {
            step,
            grid_steps: grid.steps(),
            outcome,
        })
    }

    fn try_update(&mut self, x: &Tensor, grid: &TimeGrid) -> Result<(LossBreakdown, f64), ObjectiveError> {
        let (breakdown, grads) = {
            let mut tape = Tape::new();
            let live_model = self.bundle.live();
            let live = live_model.bind(&mut tape, true);
            let frozen = live_model.bind(&mut tape, false);
            let out = compute_loss(
                &mut tape,
                x,
                &mut self.loss_rng,
                &live,
                &frozen,
                grid,
                &self.config.loss,
            )?;
            let g = tape.backward(out.total)?;
            let grads = live
                .vars
                .iter()
                .map(|&v| g.get(v))
                .collect::<Result<Vec<_>, _>>()?;
            (out.breakdown, grads)
        };
        let norm = self.optimizer.step(&mut self.bundle.params, grads)?;
        Ok((breakdown, norm))
    }

    /// Runs until `iterations` total steps have been taken, calling
    /// `observe` after each.
    pub fn run(
        &mut self,
        data: &Tensor,
        iterations: u64,
        mut observe: impl FnMut(&Trainer, &StepReport),
    ) -> Result<(), TrainError> {
        while self.step < iterations {
            let report = self.step(data)?;
            observe(self, &report);
        }
        Ok(())
    }

    pub fn into_bundle(self) -> ModelBundle {
        self.bundle
    }
}

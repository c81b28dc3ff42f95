//! Consistency-trained variational autoencoders.
//!
//! A time-conditioned VAE whose decoder is trained with a consistency loss
//! across a discretized latent noising process, so that samples can be drawn
//! in one decoder pass or refined in a few encode/decode rounds.
//!
//! The crate is self-contained: [`numerics`] provides the tensors and
//! reverse-mode differentiation everything else is built on.

// `!(x > 0.0)` style checks are deliberate: they also reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod datakit;
pub mod evaluation;
pub mod model;
pub mod numerics;
pub mod objective;
pub mod sampler;
pub mod schedules;
pub mod train;

pub use model::{Likelihood, ModelBundle, ModelError, ModelKind, ModelSpec, Params};
pub use numerics::{NumericsError, RngState, Tape, Tensor, Var};
pub use objective::{LossBreakdown, LossConfig, ObjectiveError, Variant};
pub use schedules::{ScheduleConfig, ScheduleError, TimeGrid};

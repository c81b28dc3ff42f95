//! Time-conditioned encoder/decoder MLPs and the boundary-preserving decoder
//! parametrization.
//!
//! The decoder emits `2 * D` values per example: the first half is the
//! average-decoder head `x_hat`, the second half the residual head `r`.
//! The generator output is `stop_grad(x_hat) + c_out(t) * r`, so at
//! `t = sigma_min` it is exactly the average head.

use std::sync::atomic::{AtomicU64, Ordering};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::numerics::{streams, DropoutMask, NumericsError, RngState, Tape, Tensor, Var};
use crate::schedules::{self, ScheduleConfig, ScheduleError};

/// Added to the softplus of the scale head.
pub const SIGMA_FLOOR: f64 = 1e-6;
/// Layer normalization epsilon.
pub const LN_EPS: f64 = 1e-5;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error(transparent)]
    Numerics(#[from] NumericsError),
    #[error(transparent)]
    Schedule(#[from] ScheduleError),
    #[error("network evaluated at t = {t} below sigma_min = {sigma_min}")]
    TimeBelowMin { t: f64, sigma_min: f64 },
    #[error("invalid model config: {0}")]
    InvalidConfig(String),
    #[error("parameter layout mismatch: {0}")]
    Layout(String),
}

/// Which encoder/decoder wiring the model uses.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    /// Time-conditioned encoder, consistency decoder.
    Covae,
    /// Time-free encoder with a VE kernel in latent space.
    Scovae,
    /// Time-conditioned encoder, average-head decoder (t-VAE).
    TimeVae,
    /// Classic VAE evaluated at a fixed time token.
    Vae,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Likelihood {
    Gaussian,
    /// Decoder heads are logits.
    Bernoulli,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub kind: ModelKind,
    pub likelihood: Likelihood,
    pub data_dim: usize,
    pub latent_dim: usize,
    pub hidden: Vec<usize>,
    pub time_features: usize,
    pub dropout: f64,
    /// Use the skip/residual decoder parametrization. When false the
    /// generator output is the raw first head.
    pub boundary: bool,
    /// Normalize time-free encodings with layer norm followed by tanh.
    pub normalize_latent: bool,
    /// Time at which `Vae` models are evaluated.
    pub vae_time: f64,
    pub schedule: ScheduleConfig,
}

impl ModelSpec {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.into()));
        if self.data_dim == 0 || self.latent_dim == 0 {
            return bad("data_dim and latent_dim must be positive");
        }
        if self.hidden.contains(&0) {
            return bad("hidden widths must be positive");
        }
        if !self.time_features.is_multiple_of(2) {
            return bad("time_features must be even");
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad("dropout must be in [0, 1)");
        }
        self.schedule.validate()?;
        Ok(())
    }

    fn encoder_time_features(&self) -> usize {
        if self.kind == ModelKind::Scovae {
            0
        } else {
            self.time_features
        }
    }

    fn encoder_out(&self) -> usize {
        if self.kind == ModelKind::Scovae {
            self.latent_dim
        } else {
            2 * self.latent_dim
        }
    }

    fn layer_dims(&self, input: usize, output: usize) -> Vec<(usize, usize)> {
        let mut dims = Vec::new();
        let mut prev = input;
        for &h in &self.hidden {
            dims.push((prev, h));
            prev = h;
        }
        dims.push((prev, output));
        dims
    }

    fn encoder_dims(&self) -> Vec<(usize, usize)> {
        self.layer_dims(
            self.data_dim + self.encoder_time_features(),
            self.encoder_out(),
        )
    }

    fn decoder_dims(&self) -> Vec<(usize, usize)> {
        self.layer_dims(self.latent_dim + self.time_features, 2 * self.data_dim)
    }

    /// `(name, shape)` of every parameter tensor, in storage order.
    pub fn layout(&self) -> Vec<(String, Vec<usize>)> {
        let mut out = Vec::new();
        for (net, dims) in [("encoder", self.encoder_dims()), ("decoder", self.decoder_dims())] {
            for (l, (i, o)) in dims.into_iter().enumerate() {
                out.push((format!("{net}.{l}.weight"), vec![i, o]));
                out.push((format!("{net}.{l}.bias"), vec![o]));
            }
        }
        out
    }

    fn encoder_layers(&self) -> usize {
        self.hidden.len() + 1
    }

    /// Checks `t` against `sigma_min` for time-conditioned networks.
    pub fn check_time(&self, t: f64) -> Result<(), ModelError> {
        if t < self.schedule.sigma_min {
            return Err(ModelError::TimeBelowMin {
                t,
                sigma_min: self.schedule.sigma_min,
            });
        }
        Ok(())
    }

    /// Fourier features of `ln(t)/4` with log-spaced frequencies in `[1, 32]`.
    pub fn time_embedding(&self, t: f64) -> Result<Vec<f64>, ModelError> {
        let half = self.time_features / 2;
        if half == 0 {
            return Ok(Vec::new());
        }
        let c = schedules::time_transform(t)?;
        let mut feats = Vec::with_capacity(self.time_features);
        for k in 0..half {
            let frac = if half > 1 { k as f64 / (half - 1) as f64 } else { 0.0 };
            let freq = (frac * 32f64.ln()).exp();
            feats.push((freq * c).sin());
            feats.push((freq * c).cos());
        }
        Ok(feats)
    }

    /// Fresh dropout masks for one forward pair.
    pub fn sample_masks(&self, rng: &mut RngState, batch: usize) -> Masks {
        let gen = |rng: &mut RngState| -> Vec<DropoutMask> {
            self.hidden
                .iter()
                .map(|&h| rng.dropout_mask(vec![batch, h], self.dropout))
                .collect()
        };
        let encoder = gen(rng);
        let decoder = gen(rng);
        Masks { encoder, decoder }
    }
}

/// Per-hidden-layer dropout masks for encoder and decoder.
#[derive(Clone, Debug, Default)]
pub struct Masks {
    pub encoder: Vec<DropoutMask>,
    pub decoder: Vec<DropoutMask>,
}

/// Flat list of parameter tensors following [`ModelSpec::layout`].
#[derive(Clone, Debug, PartialEq)]
pub struct Params {
    pub tensors: Vec<Tensor>,
}

impl Params {
    /// Fan-in scaled Gaussian weights, zero biases, zero residual head.
    pub fn init(spec: &ModelSpec, seed: u64) -> Self {
        let mut rng = RngState::new(seed, streams::INIT);
        let layout = spec.layout();
        let n_dec_last = layout.len() - 2;
        let mut tensors = Vec::with_capacity(layout.len());
        for (i, (name, shape)) in layout.iter().enumerate() {
            if name.ends_with("bias") {
                tensors.push(Tensor::zeros(shape.clone()));
                continue;
            }
            let (fan_in, fan_out) = (shape[0], shape[1]);
            let std = 1.0 / (fan_in as f64).sqrt();
            let mut w: Vec<f64> = rng
                .gaussian_sample(shape.clone())
                .data()
                .iter()
                .map(|v| v * std)
                .collect();
            if i == n_dec_last {
                // residual half of the final decoder layer
                for row in w.chunks_mut(fan_out) {
                    row[spec.data_dim..].iter_mut().for_each(|v| *v = 0.0);
                }
            }
            tensors.push(Tensor::from_parts(shape.clone(), w));
        }
        Self { tensors }
    }

    pub fn check_layout(&self, spec: &ModelSpec) -> Result<(), ModelError> {
        let layout = spec.layout();
        if layout.len() != self.tensors.len() {
            return Err(ModelError::Layout(format!(
                "expected {} tensors, got {}",
                layout.len(),
                self.tensors.len()
            )));
        }
        for ((name, shape), t) in layout.iter().zip(&self.tensors) {
            if t.shape() != shape.as_slice() {
                return Err(ModelError::Layout(format!(
                    "{name}: expected {shape:?}, got {:?}",
                    t.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.tensors.iter().map(Tensor::len).sum()
    }
}

/// Shadow copy of the parameters updated as an exponential moving average.
#[derive(Clone, Debug, PartialEq)]
pub struct EmaState {
    pub shadow: Params,
    pub rate: f64,
}

impl EmaState {
    pub fn new(params: &Params, rate: f64) -> Self {
        Self {
            shadow: params.clone(),
            rate,
        }
    }

    /// `shadow <- rate * shadow + (1 - rate) * params`.
    pub fn update(&mut self, params: &Params) {
        let r = self.rate;
        for (s, p) in self.shadow.tensors.iter_mut().zip(&params.tensors) {
            *s = s.zip_map(p, |a, b| r * a + (1.0 - r) * b).expect("ema shapes");
        }
    }
}

/// Number of forward passes through each network, and rows processed.
#[derive(Debug, Default)]
pub struct EvalCounters {
    encoder_calls: AtomicU64,
    encoder_rows: AtomicU64,
    decoder_calls: AtomicU64,
    decoder_rows: AtomicU64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct CounterSnapshot {
    pub encoder_calls: u64,
    pub encoder_rows: u64,
    pub decoder_calls: u64,
    pub decoder_rows: u64,
}

impl CounterSnapshot {
    /// Forward passes between two snapshots.
    pub fn since(&self, earlier: &CounterSnapshot) -> CounterSnapshot {
        CounterSnapshot {
            encoder_calls: self.encoder_calls - earlier.encoder_calls,
            encoder_rows: self.encoder_rows - earlier.encoder_rows,
            decoder_calls: self.decoder_calls - earlier.decoder_calls,
            decoder_rows: self.decoder_rows - earlier.decoder_rows,
        }
    }

    pub fn nfe(&self) -> u64 {
        self.encoder_calls + self.decoder_calls
    }
}

impl EvalCounters {
    fn record_encoder(&self, rows: usize) {
        self.encoder_calls.fetch_add(1, Ordering::Relaxed);
        self.encoder_rows.fetch_add(rows as u64, Ordering::Relaxed);
    }

    fn record_decoder(&self, rows: usize) {
        self.decoder_calls.fetch_add(1, Ordering::Relaxed);
        self.decoder_rows.fetch_add(rows as u64, Ordering::Relaxed);
    }

    pub fn snapshot(&self) -> CounterSnapshot {
        CounterSnapshot {
            encoder_calls: self.encoder_calls.load(Ordering::Relaxed),
            encoder_rows: self.encoder_rows.load(Ordering::Relaxed),
            decoder_calls: self.decoder_calls.load(Ordering::Relaxed),
            decoder_rows: self.decoder_rows.load(Ordering::Relaxed),
        }
    }
}

/// Live parameters, EMA shadow and instrumentation for one model.
///
/// Clones start with fresh counters.
#[derive(Debug)]
pub struct ModelBundle {
    pub spec: ModelSpec,
    pub params: Params,
    pub ema: EmaState,
    pub counters: EvalCounters,
}

impl Clone for ModelBundle {
    fn clone(&self) -> Self {
        Self {
            spec: self.spec.clone(),
            params: self.params.clone(),
            ema: self.ema.clone(),
            counters: EvalCounters::default(),
        }
    }
}

impl ModelBundle {
    pub fn init(spec: ModelSpec, seed: u64, ema_rate: f64) -> Result<Self, ModelError> {
        spec.validate()?;
        let params = Params::init(&spec, seed);
        let ema = EmaState::new(&params, ema_rate);
        Ok(Self {
            spec,
            params,
            ema,
            counters: EvalCounters::default(),
        })
    }

    pub fn from_parts(spec: ModelSpec, params: Params, ema: EmaState) -> Result<Self, ModelError> {
        spec.validate()?;
        params.check_layout(&spec)?;
        ema.shadow.check_layout(&spec)?;
        Ok(Self {
            spec,
            params,
            ema,
            counters: EvalCounters::default(),
        })
    }

    pub fn live(&self) -> Model<'_> {
        Model {
            spec: &self.spec,
            params: &self.params,
            counters: &self.counters,
        }
    }

    /// Evaluation model backed by the EMA weights.
    pub fn ema_model(&self) -> Model<'_> {
        Model {
            spec: &self.spec,
            params: &self.ema.shadow,
            counters: &self.counters,
        }
    }
}

/// Borrowed view of a parameter set.
#[derive(Clone, Copy)]
pub struct Model<'a> {
    pub spec: &'a ModelSpec,
    pub params: &'a Params,
    pub counters: &'a EvalCounters,
}

/// Parameters placed on a tape.
pub struct BoundModel<'a> {
    pub spec: &'a ModelSpec,
    pub vars: Vec<Var>,
    counters: &'a EvalCounters,
}

impl<'a> Model<'a> {
    /// Places every parameter on the tape, as leaves when `trainable`.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundModel<'a> {
        let vars = self
            .params
            .tensors
            .iter()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundModel {
            spec: self.spec,
            vars,
            counters: self.counters,
        }
    }

    fn eval<R>(&self, f: impl FnOnce(&mut Tape, &BoundModel<'_>) -> Result<R, ModelError>) -> Result<R, ModelError> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        tape.no_grad(|t| f(t, &bound))
    }

    /// `(mu, sigma)` for time-conditioned encoders.
    pub fn encode(&self, x: &Tensor, t: f64) -> Result<(Tensor, Tensor), ModelError> {
        self.eval(|tape, b| {
            let xv = tape.constant(x.clone());
            let (mu, sigma) = b.encode(tape, xv, t, None)?;
            Ok((tape.value(mu).clone(), tape.value(sigma).clone()))
        })
    }

    /// Time-free encoding of the VE-kernel variant.
    pub fn encode_timefree(&self, x: &Tensor) -> Result<Tensor, ModelError> {
        self.eval(|tape, b| {
            let xv = tape.constant(x.clone());
            let e = b.encode_timefree(tape, xv, None)?;
            Ok(tape.value(e).clone())
        })
    }

    /// `(x_hat, r)` decoder heads at time `t`.
    pub fn decode_heads(&self, z: &Tensor, t: f64) -> Result<(Tensor, Tensor), ModelError> {
        self.eval(|tape, b| {
            let zv = tape.constant(z.clone());
            let (xh, r) = b.decode_heads(tape, zv, t, None)?;
            Ok((tape.value(xh).clone(), tape.value(r).clone()))
        })
    }

    /// Latent at time `t` for noise `eps` (one encoder pass).
    pub fn encode_latent(&self, x: &Tensor, t: f64, eps: &Tensor) -> Result<Tensor, ModelError> {
        self.eval(|tape, b| {
            let xv = tape.constant(x.clone());
            let ev = tape.constant(eps.clone());
            let z = b.latent(tape, xv, t, ev, None)?;
            Ok(tape.value(z).clone())
        })
    }

    /// Generator output in the model's output space (logits for Bernoulli).
    pub fn generate(&self, z: &Tensor, t: f64) -> Result<Tensor, ModelError> {
        self.eval(|tape, b| {
            let zv = tape.constant(z.clone());
            let y = b.generate(tape, zv, t, None)?;
            Ok(tape.value(y).clone())
        })
    }

    /// Generator output mapped to data space (probabilities for Bernoulli).
    pub fn decode_to_data(&self, z: &Tensor, t: f64) -> Result<Tensor, ModelError> {
        let y = self.generate(z, t)?;
        Ok(match self.spec.likelihood {
            Likelihood::Gaussian => y,
            Likelihood::Bernoulli => y.map(|v| 1.0 / (1.0 + (-v).exp())),
        })
    }

    /// Standard deviation of the prior latent at `sigma_max`.
    pub fn prior_scale(&self) -> f64 {
        match self.spec.kind {
            ModelKind::Scovae => self.spec.schedule.sigma_max,
            _ => 1.0,
        }
    }

    /// Time a sample is drawn at: `vae_time` for `Vae`, else `sigma_max`.
    pub fn generation_time(&self) -> f64 {
        match self.spec.kind {
            ModelKind::Vae => self.spec.vae_time,
            _ => self.spec.schedule.sigma_max,
        }
    }
}

impl BoundModel<'_> {
    fn mlp(
        &self,
        tape: &mut Tape,
        offset: usize,
        layers: usize,
        mut h: Var,
        masks: Option<&[DropoutMask]>,
    ) -> Result<Var, ModelError> {
        for l in 0..layers {
            let (w, b) = (self.vars[offset + 2 * l], self.vars[offset + 2 * l + 1]);
            h = tape.affine(h, w, b)?;
            if l + 1 < layers {
                h = tape.silu(h);
                if let Some(m) = masks {
                    h = tape.dropout(h, &m[l])?;
                }
            }
        }
        Ok(h)
    }

    fn with_time(&self, tape: &mut Tape, x: Var, t: f64) -> Result<Var, ModelError> {
        let emb = self.spec.time_embedding(t)?;
        if emb.is_empty() {
            return Ok(x);
        }
        let rows = tape.value(x).rows();
        let mut data = Vec::with_capacity(rows * emb.len());
        for _ in 0..rows {
            data.extend_from_slice(&emb);
        }
        let e = tape.constant(Tensor::new(vec![rows, emb.len()], data)?);
        Ok(tape.concat_cols(x, e)?)
    }

    fn encoder_net(&self, tape: &mut Tape, input: Var, masks: Option<&Masks>) -> Result<Var, ModelError> {
        let rows = tape.value(input).rows();
        self.counters.record_encoder(rows);
        let layers = self.spec.encoder_layers();
        self.mlp(tape, 0, layers, input, masks.map(|m| m.encoder.as_slice()))
    }

    /// Time-conditioned encoder: `(mu, sigma)` with `sigma = softplus + floor`.
    pub fn encode(
        &self,
        tape: &mut Tape,
        x: Var,
        t: f64,
        masks: Option<&Masks>,
    ) -> Result<(Var, Var), ModelError> {
        self.spec.check_time(t)?;
        let input = self.with_time(tape, x, t)?;
        let out = self.encoder_net(tape, input, masks)?;
        let d = self.spec.latent_dim;
        let mu = tape.slice_cols(out, 0, d)?;
        let raw = tape.slice_cols(out, d, 2 * d)?;
        let sp = tape.softplus(raw);
        let sigma = tape.add_scalar(sp, SIGMA_FLOOR);
        Ok((mu, sigma))
    }

    /// Time-free encoder; optionally layer-normalized and squashed by tanh.
    pub fn encode_timefree(
        &self,
        tape: &mut Tape,
        x: Var,
        masks: Option<&Masks>,
    ) -> Result<Var, ModelError> {
        let out = self.encoder_net(tape, x, masks)?;
        if self.spec.normalize_latent {
            let n = tape.layer_norm(out, LN_EPS);
            Ok(tape.tanh(n))
        } else {
            Ok(out)
        }
    }

    /// `(x_hat, r)` from one decoder pass.
    pub fn decode_heads(
        &self,
        tape: &mut Tape,
        z: Var,
        t: f64,
        masks: Option<&Masks>,
    ) -> Result<(Var, Var), ModelError> {
        self.spec.check_time(t)?;
        let z = if self.spec.kind == ModelKind::Scovae {
            let c_in = schedules::scovae_precond(t, &self.spec.schedule).c_in;
            tape.scale(z, c_in)
        } else {
            z
        };
        let input = self.with_time(tape, z, t)?;
        self.counters.record_decoder(tape.value(input).rows());
        let offset = 2 * self.spec.encoder_layers();
        let layers = self.spec.hidden.len() + 1;
        let out = self.mlp(tape, offset, layers, input, masks.map(|m| m.decoder.as_slice()))?;
        let dd = self.spec.data_dim;
        let xh = tape.slice_cols(out, 0, dd)?;
        let r = tape.slice_cols(out, dd, 2 * dd)?;
        Ok((xh, r))
    }

    /// Output scale of the residual head at `t`.
    pub fn residual_scale(&self, t: f64) -> Result<f64, ModelError> {
        Ok(match self.spec.kind {
            ModelKind::Scovae => schedules::scovae_precond(t, &self.spec.schedule).c_out,
            _ => schedules::c_out(t, &self.spec.schedule)?,
        })
    }

    /// `stop_grad(x_hat) + c_out(t) * r`, also returning the live `x_hat`.
    pub fn covae_decode(
        &self,
        tape: &mut Tape,
        z: Var,
        t: f64,
        masks: Option<&Masks>,
    ) -> Result<(Var, Var), ModelError> {
        let (xh, r) = self.decode_heads(tape, z, t, masks)?;
        let scale = self.residual_scale(t)?;
        let frozen = tape.detach(xh);
        let scaled = tape.scale(r, scale);
        Ok((tape.add(frozen, scaled)?, xh))
    }

    /// Reparameterized latent at time `t`.
    pub fn latent(
        &self,
        tape: &mut Tape,
        x: Var,
        t: f64,
        eps: Var,
        masks: Option<&Masks>,
    ) -> Result<Var, ModelError> {
        match self.spec.kind {
            ModelKind::Scovae => {
                let e = self.encode_timefree(tape, x, masks)?;
                let (a, b) = schedules::ve_kernel(t);
                let ea = tape.scale(e, a);
                let nb = tape.scale(eps, b);
                Ok(tape.add(ea, nb)?)
            }
            ModelKind::Vae => {
                let (mu, sigma) = self.encode(tape, x, self.spec.vae_time, masks)?;
                Ok(reparameterize(tape, mu, sigma, eps)?)
            }
            ModelKind::Covae | ModelKind::TimeVae => {
                let (mu, sigma) = self.encode(tape, x, t, masks)?;
                Ok(reparameterize(tape, mu, sigma, eps)?)
            }
        }
    }

    /// Generator output for latent `z` at time `t`.
    pub fn generate(
        &self,
        tape: &mut Tape,
        z: Var,
        t: f64,
        masks: Option<&Masks>,
    ) -> Result<Var, ModelError> {
        match self.spec.kind {
            ModelKind::Covae | ModelKind::Scovae if self.spec.boundary => {
                Ok(self.covae_decode(tape, z, t, masks)?.0)
            }
            ModelKind::Vae => Ok(self.decode_heads(tape, z, self.spec.vae_time, masks)?.0),
            _ => Ok(self.decode_heads(tape, z, t, masks)?.0),
        }
    }
}

/// `mu + sigma * eps`.
pub fn reparameterize(tape: &mut Tape, mu: Var, sigma: Var, eps: Var) -> Result<Var, NumericsError> {
    let se = tape.mul(sigma, eps)?;
    tape.add(mu, se)
}

//! Data preparation, the training loop with logging and checkpointing, and
//! the evaluation suite.

use std::f64::consts::PI;
use std::path::Path;

use covae_core::datakit::{self, binarize, gen_2d, load_mnist, Dataset, PixelRange, Toy2d};
use covae_core::evaluation::{energy_distance, recon_error, snr_curve, spearman};
use covae_core::model::{Likelihood, Model, ModelBundle};
use covae_core::numerics::{streams, RngState, Tensor};
use covae_core::objective::Variant;
use covae_core::sampler::{greedy_step_search, sample, SampleSchedule, SamplerError};
use covae_core::schedules::karras_grid;
use covae_core::train::{StepOutcome, Trainer};

use crate::checkpoint::{quantize, Checkpoint};
use crate::config::RunConfig;
use crate::metrics::{MetricRow, MetricsLog};
use crate::CliError;

/// Stream for the held-out set used to pick multistep times.
const SEARCH_STREAM: u64 = 8;

/// Training set plus the held-out sets used by evaluation.
#[derive(Clone, Debug)]
pub struct Data {
    pub train: Dataset,
    /// Class label per training row: digit for images, angular octant for
    /// 2D points.
    pub labels: Vec<u8>,
    /// Reference set for reported metrics.
    pub reference: Tensor,
    /// Reference set for choosing sampling times.
    pub search_reference: Tensor,
}

/// Octant of the polar angle, 0..8.
pub fn octant(p: &[f64]) -> u8 {
    let a = p[1].atan2(p[0]).rem_euclid(2.0 * PI);
    (((a + PI / 8.0) / (PI / 4.0)).floor() as u8) % 8
}

pub fn load_data(cfg: &RunConfig) -> Result<Data, CliError> {
    if cfg.is_image() {
        let dir = cfg
            .data
            .path
            .as_deref()
            .ok_or_else(|| CliError::Config("data.path is required for mnist".into()))?;
        let (mut train, labels) = load_mnist(dir, Some(cfg.data.subset_size))?;
        if cfg.train.loss.variant == Variant::CovaeBernoulli {
            train.data = binarize(&train.data, PixelRange::Signed);
            train.normalization = datakit::Normalization {
                scale: 1.0 / 255.0,
                shift: 0.0,
            };
        }
        // Desk-scale image runs have no separate test split: both
        // references are drawn from the training subset.
        let n = cfg.eval.n_reference.min(train.len());
        let reference = train.data.slice_rows(0, n);
        let search_reference = train.data.slice_rows(train.len() - n, train.len());
        return Ok(Data {
            train,
            labels,
            reference,
            search_reference,
        });
    }
    let kind: Toy2d = cfg.data.kind.parse()?;
    let train = gen_2d(&mut RngState::new(cfg.seed, streams::SYNTH), kind, cfg.data.n)?;
    let reference = gen_2d(
        &mut RngState::new(cfg.eval_seed, streams::SYNTH),
        kind,
        cfg.eval.n_reference,
    )?
    .data;
    let search_reference = gen_2d(
        &mut RngState::new(cfg.eval_seed, SEARCH_STREAM),
        kind,
        cfg.eval.n_reference,
    )?
    .data;
    let labels = (0..train.len()).map(|r| octant(train.data.row(r))).collect();
    Ok(Data {
        train,
        labels,
        reference,
        search_reference,
    })
}

pub fn init_bundle(cfg: &RunConfig, data_dim: usize) -> Result<ModelBundle, CliError> {
    Ok(ModelBundle::init(
        cfg.model_spec(data_dim),
        cfg.seed,
        cfg.train.ema_rate,
    )?)
}

fn recon_metric(model: &Model<'_>) -> &'static str {
    match model.spec.likelihood {
        Likelihood::Gaussian => "recon_mse",
        Likelihood::Bernoulli => "recon_bce",
    }
}

/// Multistep schedules for `1..=max_steps`, chosen by greedy search
/// against the search reference.
pub fn search_schedules(
    cfg: &RunConfig,
    model: &Model<'_>,
    data: &Data,
    max_steps: usize,
) -> Result<(Vec<SampleSchedule>, Vec<f64>), CliError> {
    let one = SampleSchedule::one_step(&model.spec.schedule);
    if max_steps <= 1 {
        return Ok((vec![one], Vec::new()));
    }
    let grid = karras_grid(cfg.eval.search_points, &model.spec.schedule)
        .map_err(|e| CliError::Config(e.to_string()))?;
    let reference = &data.search_reference;
    let result = greedy_step_search(
        model,
        &grid,
        |x| energy_distance(x, reference).map_err(|e| SamplerError::Eval(e.to_string())),
        max_steps,
        cfg.eval.n_samples,
        cfg.eval_seed,
    )?;
    let times = result.schedule.times();
    let schedules = (1..=times.len())
        .map(|k| SampleSchedule::new(times[..k].to_vec(), &model.spec.schedule))
        .collect::<Result<Vec<_>, _>>()?;
    Ok((schedules, result.metrics))
}

/// Energy distance for each configured step count, reconstruction error at
/// `sigma_min`, and for images the SNR trend.
pub fn evaluate(
    cfg: &RunConfig,
    bundle: &ModelBundle,
    data: &Data,
    step: u64,
) -> Result<Vec<MetricRow>, CliError> {
    let model = bundle.ema_model();
    let variant = cfg.train.loss.variant.name();
    let row = |metric: &str, value: f64, nfe: u64| {
        MetricRow::new(step, variant, metric, value, cfg.eval_seed, nfe)
    };
    let mut rows = Vec::new();
    let max_steps = cfg.eval.steps.iter().copied().max().unwrap_or(1);
    let (schedules, _) = search_schedules(cfg, &model, data, max_steps)?;
    for &k in &cfg.eval.steps {
        let Some(schedule) = schedules.get(k - 1) else {
            continue;
        };
        let mut rng = RngState::new(cfg.eval_seed, streams::SAMPLE);
        let (x, nfe) = sample(&model, schedule, &mut rng, cfg.eval.n_samples)?;
        rows.push(row("energy_distance", energy_distance(&x, &data.reference)?, nfe));
        if k > 1 {
            rows.push(row("sample_time", schedule.times()[k - 1], nfe));
        }
    }
    let sigma_min = model.spec.schedule.sigma_min;
    let mut rng = RngState::new(cfg.eval_seed, streams::NOISE);
    let recon = recon_error(&model, &data.reference, sigma_min, &mut rng)?;
    rows.push(row(recon_metric(&model), recon, 2));
    if cfg.is_image() {
        let grid = karras_grid(cfg.eval.search_points, &model.spec.schedule)
            .map_err(|e| CliError::Config(e.to_string()))?;
        let curve = snr_curve(&model, &data.reference, &grid)?;
        let (ts, snr): (Vec<f64>, Vec<f64>) = curve.into_iter().unzip();
        rows.push(row("snr_spearman", spearman(&ts, &snr)?, 0));
        rows.push(row("snr_ratio", snr[0] / snr[snr.len() - 1], 0));
    }
    Ok(rows)
}

/// How [`train`] reports progress.
#[derive(Clone, Copy, Debug, Default)]
pub struct TrainOptions<'a> {
    /// Checkpoint written on every evaluation, at the end, and on divergence.
    pub checkpoint: Option<&'a Path>,
    /// Print loss lines to stderr.
    pub verbose: bool,
}

/// Runs `schedule.iterations` steps from a fresh initialization.
///
/// Returns the final checkpoint. Parameters are rounded to the stored
/// precision before the final evaluation, so the logged metrics match what
/// `eval` reports for the saved file.
pub fn train(
    cfg: &RunConfig,
    data: &Data,
    log: &mut MetricsLog,
    opts: TrainOptions<'_>,
) -> Result<Checkpoint, CliError> {
    let bundle = init_bundle(cfg, data.train.dim())?;
    let mut trainer = Trainer::new(bundle, cfg.train.clone(), cfg.seed)?;
    let variant = cfg.train.loss.variant.name();
    let total = cfg.schedule.iterations;
    let snapshot = |trainer: &Trainer| Checkpoint {
        config: cfg.clone(),
        iteration: trainer.step_index(),
        bundle: trainer.bundle.clone(),
    };

    while trainer.step_index() < total {
        let report = match trainer.step(&data.train.data) {
            Ok(r) => r,
            Err(e) => {
                if let Some(path) = opts.checkpoint {
                    // skipped steps leave the parameters untouched, so the
                    // current state is the last good one
                    snapshot(&trainer).save(path)?;
                }
                log.flush()?;
                return Err(e.into());
            }
        };
        let k = report.step;
        let row = |metric: &str, value: f64| MetricRow::new(k, variant, metric, value, cfg.seed, 0);
        match &report.outcome {
            StepOutcome::Updated {
                breakdown,
                grad_norm,
            } => {
                if k % cfg.eval.log_every == 0 || k + 1 == total {
                    log.extend([
                        row("loss_total", breakdown.total),
                        row("l_cm", breakdown.l_cm),
                        row("l_d", breakdown.l_d),
                        row("l_kl", breakdown.l_kl),
                        row("grad_norm", *grad_norm),
                        row("grid_steps", report.grid_steps as f64),
                    ])?;
                    if opts.verbose {
                        eprintln!(
                            "step {k:>7}  N={:<4} loss {:.5}  cm {:.5}  d {:.5}  kl {:.5}  |g| {:.3}",
                            report.grid_steps,
                            breakdown.total,
                            breakdown.l_cm,
                            breakdown.l_d,
                            breakdown.l_kl,
                            grad_norm
                        );
                    }
                }
            }
            StepOutcome::Skipped { reason } => {
                log.push(row("skipped_step", 1.0))?;
                if opts.verbose {
                    eprintln!("step {k:>7}  skipped: {reason}");
                }
            }
        }
        let done = trainer.step_index();
        if cfg.eval.eval_every > 0 && done % cfg.eval.eval_every == 0 && done < total {
            log.extend(evaluate(cfg, &trainer.bundle, data, done)?)?;
            if let Some(path) = opts.checkpoint {
                snapshot(&trainer).save(path)?;
            }
        }
    }

    let mut ck = snapshot(&trainer);
    ck.bundle = quantize(&ck.bundle);
    if let Some(path) = opts.checkpoint {
        ck.save(path)?;
    }
    log.extend(evaluate(cfg, &ck.bundle, data, total)?)?;
    log.flush()?;
    Ok(ck)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn smoke(extra: &[&str]) -> RunConfig {
        let mut o: Vec<String> = [
            "--schedule.iterations=40",
            "--model.hidden=[16,16]",
            "--train.batch_size=32",
            "--train.optimizer.lr=0.001",
            "--data.n=256",
            "--eval.n_samples=64",
            "--eval.n_reference=64",
            "--eval.search_points=4",
            "--eval.log_every=10",
        ]
        .iter()
        .map(|s| s.to_string())
        .collect();
        o.extend(extra.iter().map(|s| s.to_string()));
        RunConfig::from_json("", &o).unwrap()
    }

    #[test]
    fn octants() {
        assert_eq!(octant(&[1.0, 0.0]), 0);
        assert_eq!(octant(&[1.0, 1.0]), 1);
        assert_eq!(octant(&[0.0, 1.0]), 2);
        assert_eq!(octant(&[-1.0, 0.0]), 4);
        assert_eq!(octant(&[1.0, -0.01]), 0);
        assert_eq!(octant(&[0.0, -1.0]), 6);
    }

    #[test]
    fn toy_data_sets_are_independent_and_reproducible() {
        let cfg = smoke(&[]);
        let a = load_data(&cfg).unwrap();
        let b = load_data(&cfg).unwrap();
        assert_eq!(a.train, b.train);
        assert_eq!(a.reference, b.reference);
        assert_ne!(a.reference, a.search_reference);
        assert_ne!(a.train.data.slice_rows(0, 64), a.reference);
        assert_eq!(a.labels.len(), 256);
    }

    #[test]
    fn train_logs_and_evaluates() {
        let cfg = smoke(&["--eval.eval_every=20"]);
        let data = load_data(&cfg).unwrap();
        let mut log = MetricsLog::in_memory();
        let ck = train(&cfg, &data, &mut log, TrainOptions::default()).unwrap();
        assert_eq!(ck.iteration, 40);
        let losses = log.rows().iter().filter(|r| r.metric == "loss_total").count();
        assert_eq!(losses, 5); // steps 0, 10, 20, 30, 39
        let evals: Vec<_> = log
            .rows()
            .iter()
            .filter(|r| r.metric == "energy_distance")
            .map(|r| (r.step, r.nfe))
            .collect();
        assert_eq!(evals, vec![(20, 1), (20, 3), (40, 1), (40, 3)]);
        assert!(log.last("recon_mse", 2).is_some());
        let again = evaluate(&cfg, &ck.bundle, &data, 40).unwrap();
        let tail = &log.rows()[log.rows().len() - again.len()..];
        assert_eq!(tail, again.as_slice());
    }
}

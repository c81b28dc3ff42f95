//! Subcommands of the `covae` binary.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use covae_core::datakit::write_ppm_grid;
use covae_core::model::{Likelihood, Model};
use covae_core::numerics::{streams, RngState, Tensor};
use covae_core::sampler::{attribute_edit, interpolate, sample, SampleSchedule};
use covae_core::schedules::karras_grid;

use crate::checkpoint::Checkpoint;
use crate::config::{apply_override, RunConfig};
use crate::experiment::{self, Data, TrainOptions};
use crate::metrics::{MetricRow, MetricsLog};
use crate::CliError;

#[derive(Debug, Parser)]
#[command(
    name = "covae",
    version,
    about = "Train and sample consistency-trained variational autoencoders",
    after_help = "Config keys can be overridden with dotted flags, e.g. --schedule.sigma_min=0.05 or --seed=7."
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train a model; writes checkpoint.bin, metrics.csv and config.json.
    Train(TrainArgs),
    /// Draw samples from a checkpoint's EMA weights.
    Sample(SampleArgs),
    /// Evaluate a checkpoint on its configured data.
    Eval(EvalArgs),
    /// Greedy search for multistep sampling times.
    SearchSteps(SearchArgs),
    /// Decode along the latent line between two training examples.
    Interp(InterpArgs),
    /// Shift an example along a label-defined latent direction.
    Edit(EditArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, default_value = "run")]
    pub out: PathBuf,
    /// Suppress per-step loss lines.
    #[arg(long)]
    pub quiet: bool,
}

#[derive(Debug, Args)]
pub struct SampleArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Number of steps; times follow the Karras grid from sigma_max down.
    #[arg(long, default_value_t = 1, conflicts_with = "times")]
    pub steps: usize,
    /// Explicit re-noising times after sigma_max, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub times: Option<Vec<f64>>,
    #[arg(long, default_value_t = 64)]
    pub n: usize,
    #[arg(long = "rng-seed", default_value_t = crate::config::EVAL_SEED)]
    pub rng_seed: u64,
    /// `.ppm` writes an image grid, anything else CSV rows.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Metrics CSV to write; rows are printed either way.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SearchArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 2)]
    pub max_steps: usize,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InterpArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index of the first training example.
    #[arg(long)]
    pub from: usize,
    /// Index of the second training example.
    #[arg(long)]
    pub to: usize,
    #[arg(long, default_value_t = 8)]
    pub frames: usize,
    /// Encoding time; defaults to sigma_min.
    #[arg(long)]
    pub time: Option<f64>,
    #[arg(long = "rng-seed", default_value_t = crate::config::EVAL_SEED)]
    pub rng_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EditArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Index of the training example to edit.
    #[arg(long)]
    pub index: usize,
    /// Label whose examples define the positive set.
    #[arg(long)]
    pub positive: u8,
    /// Label whose examples define the negative set.
    #[arg(long)]
    pub negative: u8,
    /// Edit strengths, comma separated.
    #[arg(long, value_delimiter = ',', default_value = "0,0.5,1")]
    pub psi: Vec<f64>,
    /// Encoding time; defaults to sigma_min.
    #[arg(long)]
    pub time: Option<f64>,
    /// Examples per attribute set.
    #[arg(long, default_value_t = 512)]
    pub set_size: usize,
    #[arg(long = "rng-seed", default_value_t = crate::config::EVAL_SEED)]
    pub rng_seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

/// Splits dotted config overrides (`--a.b=v`, `--seed=v`, `--eval_seed=v`)
/// from the arguments clap parses.
pub fn split_overrides(args: impl IntoIterator<Item = String>) -> (Vec<String>, Vec<String>) {
    let mut plain = Vec::new();
    let mut overrides = Vec::new();
    for a in args {
        let key = a.strip_prefix("--").and_then(|b| b.split_once('=')).map(|(k, _)| k);
        match key {
            Some(k) if k.contains('.') || k == "seed" || k == "eval_seed" => overrides.push(a),
            _ => plain.push(a),
        }
    }
    (plain, overrides)
}

pub fn run(cli: Cli, overrides: &[String], out: &mut impl Write) -> Result<(), CliError> {
    match cli.command {
        Command::Train(a) => cmd_train(a, overrides, out),
        Command::Sample(a) => no_overrides(overrides).and_then(|_| cmd_sample(a, out)),
        Command::Eval(a) => cmd_eval(a, overrides, out),
        Command::SearchSteps(a) => cmd_search(a, overrides, out),
        Command::Interp(a) => cmd_interp(a, overrides, out),
        Command::Edit(a) => cmd_edit(a, overrides, out),
    }
}

fn no_overrides(overrides: &[String]) -> Result<(), CliError> {
    match overrides.first() {
        Some(o) => Err(CliError::Config(format!("{o}: this command takes no config overrides"))),
        None => Ok(()),
    }
}

fn emit(out: &mut impl Write, line: std::fmt::Arguments<'_>) -> Result<(), CliError> {
    writeln!(out, "{line}").map_err(|e| CliError::io("stdout", e))
}

pub fn cmd_train(a: TrainArgs, overrides: &[String], out: &mut impl Write) -> Result<(), CliError> {
    let text = match &a.config {
        Some(p) => fs::read_to_string(p).map_err(|e| CliError::io(p, e))?,
        None => String::new(),
    };
    let cfg = RunConfig::from_json(&text, overrides)?;
    fs::create_dir_all(&a.out).map_err(|e| CliError::io(&a.out, e))?;
    let cfg_path = a.out.join("config.json");
    fs::write(&cfg_path, cfg.to_json()).map_err(|e| CliError::io(&cfg_path, e))?;
    let data = experiment::load_data(&cfg)?;
    let mut log = MetricsLog::create(&a.out.join("metrics.csv"))?;
    let ck_path = a.out.join("checkpoint.bin");
    let opts = TrainOptions {
        checkpoint: Some(&ck_path),
        verbose: !a.quiet,
    };
    let ck = experiment::train(&cfg, &data, &mut log, opts)?;
    emit(out, format_args!("trained {} iterations; checkpoint {}", ck.iteration, ck_path.display()))?;
    for r in log.rows().iter().filter(|r| r.step == ck.iteration && r.nfe > 0) {
        emit(out, format_args!("{} nfe={} {}", r.metric, r.nfe, r.value))?;
    }
    Ok(())
}

/// Checkpoint plus its config with evaluation-side overrides applied.
fn load_for_eval(path: &Path, overrides: &[String]) -> Result<(Checkpoint, RunConfig), CliError> {
    let ck = Checkpoint::load(path)?;
    let mut doc = serde_json::to_value(&ck.config).expect("config serializes");
    for o in overrides {
        let allowed = ["--eval.", "--eval_seed=", "--data.path="];
        if !allowed.iter().any(|p| o.starts_with(p)) {
            return Err(CliError::Config(format!(
                "{o}: only eval.*, eval_seed and data.path can be overridden on a checkpoint"
            )));
        }
        apply_override(&mut doc, o)?;
    }
    let cfg: RunConfig = serde_json::from_value(doc).map_err(|e| CliError::Config(e.to_string()))?;
    cfg.validate()?;
    Ok((ck, cfg))
}

/// Samples as data-scale rows in `[-1, 1]` for images.
fn to_image_range(model: &Model<'_>, x: &Tensor) -> Tensor {
    match model.spec.likelihood {
        Likelihood::Bernoulli => x.map(|p| 2.0 * p - 1.0),
        Likelihood::Gaussian => x.clone(),
    }
}

/// Writes rows to `.ppm` (square images, padded grid) or CSV.
pub fn write_rows(model: &Model<'_>, x: &Tensor, path: &Path) -> Result<(), CliError> {
    if path.extension().is_some_and(|e| e == "ppm") {
        let n = x.rows();
        let cols = (n as f64).sqrt().ceil().max(1.0) as usize;
        let rows = n.div_ceil(cols);
        let img = to_image_range(model, x);
        let pad = Tensor::full(vec![rows * cols - n, x.cols()], -1.0);
        let grid = if pad.rows() > 0 {
            Tensor::vstack(&[img, pad]).map_err(covae_core::datakit::DataError::from)?
        } else {
            img
        };
        write_ppm_grid(&grid, rows, cols, path)?;
        return Ok(());
    }
    let mut w = csv::Writer::from_path(path)?;
    let header: Vec<String> = (0..x.cols()).map(|j| format!("x{j}")).collect();
    w.write_record(&header)?;
    for r in 0..x.rows() {
        w.write_record(x.row(r).iter().map(|v| v.to_string()))?;
    }
    w.flush().map_err(|e| CliError::io(path, e))?;
    Ok(())
}

/// `sigma_max` followed by the Karras grid downwards, `steps` times in all.
pub fn default_schedule(model: &Model<'_>, steps: usize) -> Result<SampleSchedule, CliError> {
    let cfg = &model.spec.schedule;
    if steps == 0 {
        return Err(CliError::Config("--steps must be positive".into()));
    }
    if steps == 1 {
        return Ok(SampleSchedule::one_step(cfg));
    }
    let grid = karras_grid(steps, cfg).map_err(|e| CliError::Config(e.to_string()))?;
    let times = grid.times()[1..].iter().rev().copied().collect();
    Ok(SampleSchedule::new(times, cfg)?)
}

pub fn cmd_sample(a: SampleArgs, out: &mut impl Write) -> Result<(), CliError> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let model = ck.bundle.ema_model();
    let schedule = match &a.times {
        Some(rest) => SampleSchedule::with_times(rest, &model.spec.schedule)?,
        None => default_schedule(&model, a.steps)?,
    };
    let mut rng = RngState::new(a.rng_seed, streams::SAMPLE);
    let (x, nfe) = sample(&model, &schedule, &mut rng, a.n)?;
    write_rows(&model, &x, &a.out)?;
    let times: Vec<String> = schedule.times().iter().map(|t| t.to_string()).collect();
    emit(out, format_args!("times={}", times.join(",")))?;
    emit(out, format_args!("nfe={nfe}"))?;
    emit(out, format_args!("wrote {} samples to {}", x.rows(), a.out.display()))
}

fn finish_rows(rows: &[MetricRow], path: Option<&Path>, out: &mut impl Write) -> Result<(), CliError> {
    if let Some(p) = path {
        let mut log = MetricsLog::create(p)?;
        log.extend(rows.iter().cloned())?;
        log.flush()?;
    }
    for r in rows {
        emit(out, format_args!("{} nfe={} {}", r.metric, r.nfe, r.value))?;
    }
    Ok(())
}

pub fn cmd_eval(a: EvalArgs, overrides: &[String], out: &mut impl Write) -> Result<(), CliError> {
    let (ck, cfg) = load_for_eval(&a.checkpoint, overrides)?;
    let data = experiment::load_data(&cfg)?;
    let rows = experiment::evaluate(&cfg, &ck.bundle, &data, ck.iteration)?;
    finish_rows(&rows, a.out.as_deref(), out)
}

pub fn cmd_search(a: SearchArgs, overrides: &[String], out: &mut impl Write) -> Result<(), CliError> {
    let (ck, cfg) = load_for_eval(&a.checkpoint, overrides)?;
    let data = experiment::load_data(&cfg)?;
    let model = ck.bundle.ema_model();
    let (schedules, metrics) = experiment::search_schedules(&cfg, &model, &data, a.max_steps)?;
    let variant = cfg.train.loss.variant.name();
    let mut rows = Vec::new();
    for (s, m) in schedules.iter().zip(&metrics) {
        let nfe = s.nfe();
        rows.push(MetricRow::new(ck.iteration, variant, "search_energy_distance", *m, cfg.eval_seed, nfe));
        rows.push(MetricRow::new(ck.iteration, variant, "sample_time", s.times()[s.len() - 1], cfg.eval_seed, nfe));
    }
    let best = schedules.last().expect("at least one schedule");
    let times: Vec<String> = best.times().iter().map(|t| t.to_string()).collect();
    emit(out, format_args!("times={}", times.join(",")))?;
    finish_rows(&rows, a.out.as_deref(), out)
}

fn example(data: &Data, i: usize) -> Result<Tensor, CliError> {
    if i >= data.train.len() {
        return Err(CliError::Config(format!(
            "example {i} out of range; dataset has {} rows",
            data.train.len()
        )));
    }
    Ok(data.train.data.slice_rows(i, i + 1))
}

pub fn cmd_interp(a: InterpArgs, overrides: &[String], out: &mut impl Write) -> Result<(), CliError> {
    let (ck, cfg) = load_for_eval(&a.checkpoint, overrides)?;
    let data = experiment::load_data(&cfg)?;
    let model = ck.bundle.ema_model();
    let (x0, x1) = (example(&data, a.from)?, example(&data, a.to)?);
    let t = a.time.unwrap_or(model.spec.schedule.sigma_min);
    let frames = a.frames.max(2);
    let mut parts = Vec::with_capacity(frames);
    for f in 0..frames {
        let alpha = f as f64 / (frames - 1) as f64;
        // the same noise for every frame
        let mut rng = RngState::new(a.rng_seed, streams::SAMPLE);
        parts.push(interpolate(&model, &x0, &x1, t, alpha, &mut rng)?);
    }
    let x = Tensor::vstack(&parts).map_err(covae_core::datakit::DataError::from)?;
    write_rows(&model, &x, &a.out)?;
    emit(out, format_args!("wrote {frames} frames to {}", a.out.display()))
}

/// Training rows with the given label, at most `limit`.
fn label_set(data: &Data, label: u8, limit: usize) -> Tensor {
    let idx: Vec<usize> = data
        .labels
        .iter()
        .enumerate()
        .filter(|(_, &l)| l == label)
        .map(|(i, _)| i)
        .take(limit)
        .collect();
    data.train.data.gather_rows(&idx)
}

/// One output row per `psi`. Each edit draws its noise from a fresh
/// generator, so `psi = 0` is exactly the reconstruction with that seed.
#[allow(clippy::too_many_arguments)]
pub fn edit_rows(
    model: &Model<'_>,
    data: &Data,
    index: usize,
    positive: u8,
    negative: u8,
    psi: &[f64],
    t: f64,
    set_size: usize,
    seed: u64,
) -> Result<Tensor, CliError> {
    let x = example(data, index)?;
    let pos = label_set(data, positive, set_size);
    let neg = label_set(data, negative, set_size);
    let mut parts = Vec::with_capacity(psi.len());
    for &p in psi {
        let mut rng = RngState::new(seed, streams::SAMPLE);
        parts.push(attribute_edit(model, &x, &pos, &neg, p, t, &mut rng)?);
    }
    Ok(Tensor::vstack(&parts).map_err(covae_core::datakit::DataError::from)?)
}

pub fn cmd_edit(a: EditArgs, overrides: &[String], out: &mut impl Write) -> Result<(), CliError> {
    let (ck, cfg) = load_for_eval(&a.checkpoint, overrides)?;
    let data = experiment::load_data(&cfg)?;
    let model = ck.bundle.ema_model();
    let t = a.time.unwrap_or(model.spec.schedule.sigma_min);
    let x = edit_rows(
        &model, &data, a.index, a.positive, a.negative, &a.psi, t, a.set_size, a.rng_seed,
    )?;
    write_rows(&model, &x, &a.out)?;
    emit(out, format_args!("wrote {} edits to {}", x.rows(), a.out.display()))
}

//! End-to-end acceptance checks. Every check writes one PASS/FAIL line to
//! stderr (uncaptured) and then asserts.
//!
//! The toy and image training runs are shared between checks and computed
//! once per process.

use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use covae_cli::experiment::{self, Data, TrainOptions};
use covae_cli::{Checkpoint, MetricsLog, RunConfig};
use covae_core::evaluation::{median, recon_error, snr_curve, spearman};
use covae_core::model::{BoundModel, Likelihood, ModelBundle, ModelKind, ModelSpec};
use covae_core::numerics::{grad_check, grad_check_with, DropoutMask, NumericsError, RngState, Tape, Tensor, Var};
use covae_core::objective::{
    covae_loss_with, kl_gaussian_value, pseudo_huber_value, scovae_loss_with, Draws, LossConfig,
    LossRng, ObjectiveError, Optimizer, OptimizerConfig, OptimizerKind,
};
use covae_core::schedules::{
    c_out, curriculum_steps, karras_grid, lambda_d, scovae_precond, ScheduleConfig, TimeGrid,
};
use covae_core::train::{StepOutcome, TrainConfig, Trainer};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let line = format!(
        "acceptance {id:>2} {} {name}: {detail}\n",
        if pass { "PASS" } else { "FAIL" }
    );
    let _ = std::io::stderr().write_all(line.as_bytes());
    assert!(pass, "{line}");
}

fn workspace_root() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../..")
}

// ---------------------------------------------------------------- 1

const PRIM_H: f64 = 1e-4;

fn uniform(rng: &mut RngState, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect()).unwrap()
}

fn weighted_sum(t: &mut Tape, y: Var) -> Result<Var, NumericsError> {
    if t.value(y).len() == 1 {
        return Ok(y);
    }
    let shape = t.value(y).shape().to_vec();
    let n = t.value(y).len();
    let w = t.constant(Tensor::new(shape, (0..n).map(|i| 0.5 + (i % 7) as f64 * 0.15).collect())?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

type Prim = Box<dyn Fn(&mut Tape, Var) -> Result<Var, NumericsError>>;

fn primitive_table() -> Vec<(&'static str, Vec<usize>, f64, f64, Prim)> {
    let c34 = |seed: f64| {
        Tensor::new(vec![3, 4], (0..12).map(|i| 0.5 + 0.1 * i as f64 + seed).collect()).unwrap()
    };
    let w42 = Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64 * 0.91).cos()).collect()).unwrap();
    let x34 = Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let b2 = Tensor::new(vec![2], vec![0.1, -0.2]).unwrap();
    let row4 = Tensor::new(vec![4], vec![0.2, -0.4, 0.6, 1.0]).unwrap();
    let side = Tensor::new(vec![3, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let mask = DropoutMask {
        bits: Tensor::new(vec![3, 4], (0..12).map(|i| f64::from(i % 3 != 0)).collect()).unwrap(),
        scale: 1.25,
    };
    let s = vec![3, 4];
    let mut t: Vec<(&'static str, Vec<usize>, f64, f64, Prim)> = vec![
        ("tanh", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.tanh(v)))),
        ("sigmoid", s.clone(), -3.0, 3.0, Box::new(|t, v| Ok(t.sigmoid(v)))),
        ("softplus", s.clone(), -3.0, 3.0, Box::new(|t, v| Ok(t.softplus(v)))),
        ("silu", s.clone(), -1.0, 3.0, Box::new(|t, v| Ok(t.silu(v)))),
        ("exp", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.exp(v)))),
        ("log", s.clone(), 0.2, 3.0, Box::new(|t, v| Ok(t.log(v)))),
        ("square", s.clone(), 0.1, 2.0, Box::new(|t, v| Ok(t.square(v)))),
        ("sqrt", s.clone(), 0.2, 3.0, Box::new(|t, v| Ok(t.sqrt(v)))),
        ("scale", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.scale(v, -1.7)))),
        ("add_scalar", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.add_scalar(v, 0.3)))),
        ("sum", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.sum(v)))),
        ("mean", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.mean(v)))),
        ("row_sum", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.row_sum(v)))),
        ("slice_cols", s.clone(), -1.0, 1.0, Box::new(|t, v| t.slice_cols(v, 1, 3))),
        ("layer_norm", s.clone(), -2.0, 2.0, Box::new(|t, v| Ok(t.layer_norm(v, 1e-5)))),
        ("dropout", s.clone(), -2.0, 2.0, Box::new(move |t, v| t.dropout(v, &mask))),
    ];
    for (k, name) in [(0, "add"), (1, "sub"), (2, "mul")] {
        for left in [true, false] {
            let o = c34(0.0);
            t.push((
                name,
                s.clone(),
                0.3,
                2.0,
                Box::new(move |t, v| {
                    let c = t.constant(o.clone());
                    let (a, b) = if left { (v, c) } else { (c, v) };
                    match k {
                        0 => t.add(a, b),
                        1 => t.sub(a, b),
                        _ => t.mul(a, b),
                    }
                }),
            ));
        }
    }
    let (w, b) = (w42.clone(), b2.clone());
    t.push(("affine/x", s.clone(), -1.0, 1.0, Box::new(move |t, v| {
        let (w, b) = (t.constant(w.clone()), t.constant(b.clone()));
        t.affine(v, w, b)
    })));
    let (x, b) = (x34.clone(), b2.clone());
    t.push(("affine/w", vec![4, 2], -1.0, 1.0, Box::new(move |t, v| {
        let (x, b) = (t.constant(x.clone()), t.constant(b.clone()));
        t.affine(x, v, b)
    })));
    let (x, w) = (x34.clone(), w42.clone());
    t.push(("affine/b", vec![2], -1.0, 1.0, Box::new(move |t, v| {
        let (x, w) = (t.constant(x.clone()), t.constant(w.clone()));
        t.affine(x, w, v)
    })));
    let w = w42.clone();
    t.push(("matmul/a", s.clone(), -1.0, 1.0, Box::new(move |t, v| {
        let w = t.constant(w.clone());
        t.matmul(v, w)
    })));
    let x = x34.clone();
    t.push(("matmul/b", vec![4, 2], -1.0, 1.0, Box::new(move |t, v| {
        let a = t.constant(x.clone());
        t.matmul(a, v)
    })));
    let r = row4.clone();
    t.push(("add_row/a", s.clone(), -1.0, 1.0, Box::new(move |t, v| {
        let r = t.constant(r.clone());
        t.add_row(v, r)
    })));
    let base = c34(0.0);
    t.push(("add_row/row", vec![4], -1.0, 1.0, Box::new(move |t, v| {
        let a = t.constant(base.clone());
        t.add_row(a, v)
    })));
    let sd = side.clone();
    t.push(("concat/left", s.clone(), -1.0, 1.0, Box::new(move |t, v| {
        let c = t.constant(sd.clone());
        t.concat_cols(v, c)
    })));
    t.push(("concat/right", s.clone(), -1.0, 1.0, Box::new(move |t, v| {
        let c = t.constant(side.clone());
        t.concat_cols(c, v)
    })));
    t
}

fn loss_bundle(kind: ModelKind, likelihood: Likelihood, seed: u64) -> ModelBundle {
    let spec = ModelSpec {
        kind,
        likelihood,
        data_dim: 3,
        latent_dim: 2,
        hidden: vec![6, 6],
        time_features: 4,
        dropout: 0.1,
        boundary: true,
        normalize_latent: false,
        vae_time: 1.0,
        schedule: ScheduleConfig::default(),
    };
    let mut b = ModelBundle::init(spec, seed, 0.99).unwrap();
    let mut rng = RngState::new(seed + 100, 0);
    for t in b.params.tensors.iter_mut() {
        let noise = rng.gaussian_sample(t.shape().to_vec());
        *t = t.zip_map(&noise, |a, n| a + 0.1 * n).unwrap();
    }
    b.ema.shadow = b.params.clone();
    b
}

type LossFn = fn(
    &mut Tape,
    &Tensor,
    &Draws,
    &BoundModel<'_>,
    &BoundModel<'_>,
    &TimeGrid,
    &LossConfig,
) -> Result<covae_core::objective::LossOutput, ObjectiveError>;

fn full_loss_error(kind: ModelKind, likelihood: Likelihood, index: usize) -> f64 {
    let b = loss_bundle(kind, likelihood, 11 + index as u64);
    let grid = karras_grid(10, &ScheduleConfig::default()).unwrap();
    let mut x = RngState::new(12, 7).gaussian_sample(vec![4, 3]);
    if likelihood == Likelihood::Bernoulli {
        x = x.map(|v| f64::from(v > 0.0));
    }
    let draws = {
        let mut rng = LossRng::new(13);
        let mut tape = Tape::new();
        let live = b.live().bind(&mut tape, false);
        let mut d = Draws::sample(&mut rng, &live, &grid, 4);
        d.index = index;
        d
    };
    let cfg = LossConfig::default();
    let f: LossFn = match kind {
        ModelKind::Scovae => scovae_loss_with,
        _ => covae_loss_with,
    };
    let mut worst: f64 = 0.0;
    for j in 0..b.params.tensors.len() {
        let err = grad_check_with(
            |tape: &mut Tape, v| -> Result<_, ObjectiveError> {
                let mut live = b.live().bind(tape, false);
                live.vars[j] = v;
                let frozen = b.ema_model().bind(tape, false);
                Ok(f(tape, &x, &draws, &live, &frozen, &grid, &cfg)?.total)
            },
            &b.params.tensors[j],
            PRIM_H,
            |_| None,
        )
        .unwrap();
        worst = worst.max(err);
    }
    worst
}

#[test]
fn c01_gradient_oracle() {
    let start = Instant::now();
    let mut worst_prim: (f64, &str) = (0.0, "");
    for (k, (name, shape, lo, hi, f)) in primitive_table().into_iter().enumerate() {
        let mut rng = RngState::new(100 + k as u64, 0);
        for _ in 0..20 {
            let x = uniform(&mut rng, &shape, lo, hi);
            let err = grad_check(
                |t, v| {
                    let y = f(t, v)?;
                    weighted_sum(t, y)
                },
                &x,
                PRIM_H,
            )
            .unwrap();
            if err > worst_prim.0 {
                worst_prim = (err, name);
            }
        }
    }
    let mut worst_loss: (f64, String) = (0.0, String::new());
    for index in [1, 4, 10] {
        for (kind, lik, label) in [
            (ModelKind::Covae, Likelihood::Gaussian, "covae"),
            (ModelKind::Scovae, Likelihood::Gaussian, "s-covae"),
            (ModelKind::Covae, Likelihood::Bernoulli, "covae-bernoulli"),
        ] {
            let err = full_loss_error(kind, lik, index);
            if err > worst_loss.0 {
                worst_loss = (err, format!("{label} i={index}"));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        1,
        "gradient oracle",
        worst_prim.0 < 1e-6 && worst_loss.0 < 1e-4 && secs < 60.0,
        format!(
            "primitives max rel err {:.2e} ({}), full loss {:.2e} ({}), {secs:.1}s",
            worst_prim.0, worst_prim.1, worst_loss.0, worst_loss.1
        ),
    );
}

// ---------------------------------------------------------------- 2

#[test]
fn c02_closed_form_kl() {
    let start = Instant::now();
    let mut rng = RngState::new(2, 0);
    let dim = 3;
    let n = 1_000_000;
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let mu: Vec<f64> = (0..dim).map(|_| rng.gaussian()).collect();
        let sigma: Vec<f64> = (0..dim).map(|_| (rng.uniform() * 2.0 - 1.0).exp()).collect();
        let closed = kl_gaussian_value(
            &Tensor::new(vec![1, dim], mu.clone()).unwrap(),
            &Tensor::new(vec![1, dim], sigma.clone()).unwrap(),
        )
        .unwrap();
        // log q(z) - log p(z) with z = mu + sigma * eps
        let mut acc = 0.0;
        for _ in 0..n {
            for j in 0..dim {
                let e = rng.gaussian();
                let z = mu[j] + sigma[j] * e;
                acc += -sigma[j].ln() - 0.5 * e * e + 0.5 * z * z;
            }
        }
        let mc = acc / n as f64;
        worst = worst.max((mc - closed).abs() / closed);
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        2,
        "closed-form KL",
        worst < 0.01 && secs < 30.0,
        format!("max relative gap to 1e6-sample Monte Carlo {:.3}% over 20 draws, {secs:.1}s", 100.0 * worst),
    );
}

// ---------------------------------------------------------------- 3

/// Fits `x_hat = w_j * z_j` with `z_j = x + t_j eps` for every grid time at
/// once, returning the Polyak average of the second half of the iterates.
fn fit_linear_decoder(sigma_data: f64, times: &[f64], seed: u64) -> Vec<f64> {
    let (batch, steps) = (4096, 3000);
    let k = times.len();
    let mut params = covae_core::Params {
        tensors: vec![Tensor::zeros(vec![1, k])],
    };
    let mut opt = Optimizer::new(
        OptimizerConfig {
            kind: OptimizerKind::Adam,
            lr: 0.01,
            ..Default::default()
        },
        &params,
    );
    let mut rng = RngState::new(seed, 3);
    let ones = Tensor::ones(vec![batch, 1]);
    let mut avg = vec![0.0; k];
    for step in 0..steps {
        let mut x = Vec::with_capacity(batch * k);
        let mut z = Vec::with_capacity(batch * k);
        for _ in 0..batch {
            let xi = sigma_data * rng.gaussian();
            for &t in times {
                x.push(xi);
                z.push(xi + t * rng.gaussian());
            }
        }
        let mut tape = Tape::new();
        let w = tape.leaf(params.tensors[0].clone());
        let o = tape.constant(ones.clone());
        let wb = tape.matmul(o, w).unwrap();
        let zv = tape.constant(Tensor::new(vec![batch, k], z).unwrap());
        let xv = tape.constant(Tensor::new(vec![batch, k], x).unwrap());
        let pred = tape.mul(zv, wb).unwrap();
        let d = tape.sub(pred, xv).unwrap();
        let d2 = tape.square(d);
        let loss = tape.mean(d2);
        let g = tape.backward(loss).unwrap().get(w).unwrap();
        opt.step(&mut params, vec![g]).unwrap();
        if step >= steps / 2 {
            for (a, v) in avg.iter_mut().zip(params.tensors[0].data()) {
                *a += v / (steps - steps / 2) as f64;
            }
        }
    }
    avg
}

#[test]
fn c03_linear_decoder_oracle() {
    let start = Instant::now();
    let grid = karras_grid(8, &ScheduleConfig::default()).unwrap();
    let times = &grid.times()[1..];
    let mut worst: (f64, f64, f64) = (0.0, 0.0, 0.0);
    for (s, sd) in [0.5, 1.0, 2.0].into_iter().enumerate() {
        let w = fit_linear_decoder(sd, times, 30 + s as u64);
        for (&t, &wt) in times.iter().zip(&w) {
            let exact = sd * sd / (sd * sd + t * t);
            let rel = (wt - exact).abs() / exact;
            if rel > worst.0 {
                worst = (rel, sd, t);
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    report(
        3,
        "linear decoder oracle",
        worst.0 < 0.02 && secs < 300.0,
        format!(
            "max relative error {:.3}% (sigma_data {}, t {:.3}) over 8 grid times x 3 data scales, {secs:.1}s",
            100.0 * worst.0,
            worst.1,
            worst.2
        ),
    );
}

// ---------------------------------------------------------------- 4

#[test]
fn c04_boundary_reduction() {
    let mut b = loss_bundle(ModelKind::Covae, Likelihood::Gaussian, 4);
    b.spec.dropout = 0.0;
    let grid = karras_grid(10, &ScheduleConfig::default()).unwrap();
    let x = RngState::new(40, 7).gaussian_sample(vec![5, 3]);
    let mut rng = LossRng::new(41);
    let mut tape = Tape::new();
    let live = b.live().bind(&mut tape, false);
    let mut draws = Draws::sample(&mut rng, &live, &grid, 5);
    draws.index = 1;
    let cfg = LossConfig::default();
    let out = covae_loss_with(&mut tape, &x, &draws, &live, &live, &grid, &cfg).unwrap();

    let model = b.live();
    let t1 = grid.time(1);
    let z = model.encode_latent(&x, t1, &draws.eps).unwrap();
    let decoded = model.generate(&z, t1).unwrap();
    let c = covae_core::objective::default_huber_constant(3);
    let direct = pseudo_huber_value(&decoded, &x, c).unwrap();
    report(
        4,
        "boundary reduction",
        out.breakdown.l_cm == direct && out.breakdown.t_value == ScheduleConfig::default().sigma_min,
        format!("consistency term {} vs pseudo-Huber(decode, x) {}", out.breakdown.l_cm, direct),
    );
}

// ------------------------------------------------------- toy training runs

const SEEDS: [u64; 3] = [42, 43, 44];
const BETAS: [f64; 3] = [0.1, 0.5, 1.0];
const TOY_DATA: [&str; 2] = ["gaussians8", "two_moons"];

/// Training overrides shared by every toy run.
fn toy_config(kind: &str, variant: &str, beta: f64, seed: u64) -> RunConfig {
    let o: Vec<String> = [
        format!("--data.kind={kind}"),
        "--data.n=10000".into(),
        format!("--train.loss.variant={variant}"),
        format!("--train.loss.beta={beta}"),
        format!("--seed={seed}"),
        "--schedule.iterations=20000".into(),
        "--train.batch_size=256".into(),
        "--model.hidden=[64,64]".into(),
        "--train.optimizer.lr=0.001".into(),
        "--train.ema_rate=0.999".into(),
        "--eval.steps=[1,2]".into(),
        "--eval.log_every=1000".into(),
    ]
    .into_iter()
    .chain(scovae_overrides(variant).iter().map(|s| s.to_string()))
    .collect();
    RunConfig::from_json("", &o).unwrap()
}

/// The VE latent kernel needs `sigma_max` well above the encoder output
/// scale, and a layer norm over a 2D latent has only two possible outputs.
fn scovae_overrides(variant: &str) -> &'static [&'static str] {
    match variant {
        "s-covae" => &["--schedule.sigma_max=10"],
        "s-covae-norm" => &["--schedule.sigma_max=10", "--model.latent_dim=8"],
        _ => &[],
    }
}

#[derive(Clone, Debug)]
struct ToyRun {
    ed1: f64,
    ed2: f64,
    nfe2: u64,
    skipped: usize,
}

fn run_toy(kind: &str, variant: &str, beta: f64, seed: u64) -> Result<ToyRun, String> {
    let cfg = toy_config(kind, variant, beta, seed);
    let data = experiment::load_data(&cfg).map_err(|e| e.to_string())?;
    let mut log = MetricsLog::in_memory();
    experiment::train(&cfg, &data, &mut log, TrainOptions::default()).map_err(|e| e.to_string())?;
    let ed2_row = log
        .rows()
        .iter()
        .rev()
        .find(|r| r.metric == "energy_distance" && r.nfe != 1)
        .ok_or("missing 2-step metric")?;
    Ok(ToyRun {
        ed1: log.last("energy_distance", 1).ok_or("missing 1-step metric")?,
        ed2: ed2_row.value,
        nfe2: ed2_row.nfe,
        skipped: log.rows().iter().filter(|r| r.metric == "skipped_step").count(),
    })
}

struct ToyResults {
    /// `[dataset][beta index]` medians for the VAE family.
    beta_vae: Vec<Vec<f64>>,
    covae: Vec<Vec<ToyRun>>,
}

fn toy_results() -> &'static ToyResults {
    static CELL: OnceLock<ToyResults> = OnceLock::new();
    CELL.get_or_init(|| {
        let mut beta_vae = Vec::new();
        let mut covae = Vec::new();
        for kind in TOY_DATA {
            let mut per_beta = Vec::new();
            for beta in BETAS {
                let variant = if beta == 1.0 { "vae" } else { "beta-vae" };
                let eds: Vec<f64> = SEEDS
                    .iter()
                    .map(|&s| run_toy(kind, variant, beta, s).unwrap().ed1)
                    .collect();
                per_beta.push(median(&eds));
            }
            beta_vae.push(per_beta);
            covae.push(SEEDS.iter().map(|&s| run_toy(kind, "covae", 1.0, s).unwrap()).collect());
        }
        ToyResults { beta_vae, covae }
    })
}

#[test]
fn c05_ordering_reproduction() {
    let res = toy_results();
    let mut pass = true;
    let mut parts = Vec::new();
    for (d, kind) in TOY_DATA.iter().enumerate() {
        let co = median(&res.covae[d].iter().map(|r| r.ed1).collect::<Vec<_>>());
        let vae = res.beta_vae[d][2];
        let (bi, best) = res.beta_vae[d]
            .iter()
            .copied()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(&b.1))
            .unwrap();
        let gain = 1.0 - co / vae;
        pass &= co < best && best <= vae && gain >= 0.25;
        parts.push(format!(
            "{kind}: covae {co:.4} | beta-vae best {best:.4} (beta {}) | vae {vae:.4} | gain over vae {:.0}%",
            BETAS[bi],
            100.0 * gain
        ));
    }
    report(5, "ordering reproduction", pass, parts.join("; "));
}

#[test]
fn c06_multistep_gain() {
    let res = toy_results();
    let mut pass = true;
    let mut parts = Vec::new();
    for (d, kind) in TOY_DATA.iter().enumerate() {
        let runs = &res.covae[d];
        let one = median(&runs.iter().map(|r| r.ed1).collect::<Vec<_>>());
        let two = median(&runs.iter().map(|r| r.ed2).collect::<Vec<_>>());
        let nfe_ok = runs.iter().all(|r| r.nfe2 == 3);
        pass &= two <= one && nfe_ok;
        parts.push(format!("{kind}: 1-step {one:.4}, 2-step {two:.4}, 2-step nfe {}", runs[0].nfe2));
    }
    report(6, "multistep gain", pass, parts.join("; "));
}

// ---------------------------------------------------------------- 7, 8

fn mnist_config() -> RunConfig {
    let dir = workspace_root().join("data/mnist-subset");
    let o: Vec<String> = [
        "--data.kind=mnist".to_string(),
        format!("--data.path={:?}", dir.to_str().unwrap()),
        "--data.subset_size=4096".into(),
        "--train.loss.variant=covae-bernoulli".into(),
        "--schedule.iterations=20000".into(),
        "--train.batch_size=128".into(),
        "--model.hidden=[256,256]".into(),
        "--model.latent_dim=16".into(),
        "--train.optimizer.lr=0.001".into(),
        "--train.ema_rate=0.999".into(),
        "--eval.steps=[1]".into(),
        "--eval.n_samples=500".into(),
        "--eval.n_reference=2000".into(),
        "--eval.log_every=1000".into(),
    ]
    .into_iter()
    .collect();
    RunConfig::from_json("", &o).unwrap()
}

struct MnistRun {
    result: Result<Checkpoint, String>,
    data: Data,
    config: RunConfig,
    secs: f64,
}

fn mnist_run() -> &'static MnistRun {
    static CELL: OnceLock<MnistRun> = OnceLock::new();
    CELL.get_or_init(|| {
        let config = mnist_config();
        let data = experiment::load_data(&config).unwrap();
        let start = Instant::now();
        let mut log = MetricsLog::in_memory();
        let result = experiment::train(&config, &data, &mut log, TrainOptions::default())
            .map_err(|e| e.to_string());
        MnistRun {
            result,
            data,
            config,
            secs: start.elapsed().as_secs_f64(),
        }
    })
}

#[test]
fn c07_snr_trend() {
    let run = mnist_run();
    let ck = match &run.result {
        Ok(ck) => ck,
        Err(e) => return report(7, "SNR trend", false, format!("training failed: {e}")),
    };
    let model = ck.bundle.ema_model();
    let grid = karras_grid(run.config.eval.search_points, &model.spec.schedule).unwrap();
    let curve = snr_curve(&model, &run.data.reference, &grid).unwrap();
    let (ts, snr): (Vec<f64>, Vec<f64>) = curve.into_iter().unzip();
    let rho = spearman(&ts, &snr).unwrap();
    let ratio = snr[0] / snr[snr.len() - 1];
    report(
        7,
        "SNR trend",
        rho <= -0.9 && ratio >= 100.0,
        format!(
            "spearman(t, SNR) {rho:.3}, SNR(sigma_min)/SNR(sigma_max) {ratio:.1} ({:.3} / {:.5})",
            snr[0],
            snr[snr.len() - 1]
        ),
    );
}

#[test]
fn c08_binary_variant() {
    let run = mnist_run();
    let ck = match &run.result {
        Ok(ck) => ck,
        Err(e) => return report(8, "binary variant", false, format!("training failed: {e}")),
    };
    let model = ck.bundle.ema_model();
    let sigma_min = model.spec.schedule.sigma_min;
    let mut rng = RngState::new(run.config.eval_seed, 3);
    let bce = recon_error(&model, &run.data.reference, sigma_min, &mut rng).unwrap();
    report(
        8,
        "binary variant",
        bce <= 0.08 && run.secs < 3600.0,
        format!(
            "per-pixel BCE at sigma_min {bce:.4} nats on {} binarized images after {} iterations, {:.0}s",
            run.data.train.len(),
            ck.iteration,
            run.secs
        ),
    );
}

// ---------------------------------------------------------------- 9

#[test]
fn c09_scovae_parity() {
    // encoder evaluated once per example per step
    let cfg = toy_config("gaussians8", "s-covae", 1.0, 42);
    let bundle = experiment::init_bundle(&cfg, 2).unwrap();
    let train_cfg = TrainConfig {
        batch_size: 32,
        ..cfg.train.clone()
    };
    let mut trainer = Trainer::new(bundle, train_cfg, 42).unwrap();
    let data = RngState::new(9, 7).gaussian_sample(vec![64, 2]);
    let before = trainer.bundle.counters.snapshot();
    let rep = trainer.step(&data).unwrap();
    let used = trainer.bundle.counters.snapshot().since(&before);
    let once = used.encoder_calls == 1 && used.encoder_rows == 32;
    assert!(matches!(rep.outcome, StepOutcome::Updated { .. }));

    let res = toy_results();
    let covae = median(&res.covae[0].iter().map(|r| r.ed1).collect::<Vec<_>>());
    let mut pass = once;
    let mut parts = vec![format!(
        "encoder calls/rows per step {}/{} for batch 32",
        used.encoder_calls, used.encoder_rows
    )];
    for variant in ["s-covae", "s-covae-norm"] {
        let eds: Vec<Result<ToyRun, String>> = SEEDS.iter().map(|&s| run_toy("gaussians8", variant, 1.0, s)).collect();
        match eds.into_iter().collect::<Result<Vec<_>, _>>() {
            Ok(runs) => {
                let ed = median(&runs.iter().map(|r| r.ed1).collect::<Vec<_>>());
                let skipped: usize = runs.iter().map(|r| r.skipped).sum();
                pass &= ed <= 2.0 * covae;
                parts.push(format!("{variant} {ed:.4} ({skipped} skipped steps)"));
            }
            Err(e) => {
                pass = false;
                parts.push(format!("{variant} failed: {e}"));
            }
        }
    }
    parts.push(format!("covae {covae:.4}"));
    report(9, "s-CoVAE parity", pass, parts.join("; "));
}

// ---------------------------------------------------------------- 10

#[test]
fn c10_schedules() {
    let mut failures = Vec::new();
    let mut check = |ok: bool, what: String| {
        if !ok {
            failures.push(what);
        }
    };
    let d = ScheduleConfig::default();
    check(karras_grid(2, &d).unwrap().times() == [0.0, 0.05, 3.0], "N=2 endpoints".into());
    let lin = ScheduleConfig { sigma_min: 1.0, sigma_max: 3.0, rho: 1.0, ..d.clone() };
    check(karras_grid(3, &lin).unwrap().times() == [0.0, 1.0, 2.0, 3.0], "linear case".into());
    let sq = ScheduleConfig { sigma_min: 1.0, sigma_max: 9.0, rho: 2.0, ..d.clone() };
    let g = karras_grid(3, &sq).unwrap();
    check((g.time(2) - 4.0).abs() < 1e-12, "rho=2 midpoint".into());
    let mut rng = RngState::new(10, 0);
    let mut cases = 0;
    for _ in 0..500 {
        let lo = 0.001 + rng.uniform();
        let cfg = ScheduleConfig {
            sigma_min: lo,
            sigma_max: lo * (1.01 + 50.0 * rng.uniform()),
            rho: 1.0 + 9.0 * rng.uniform(),
            ..d.clone()
        };
        let n = 2 + rng.below(300);
        let g = karras_grid(n, &cfg).unwrap();
        let t = g.times();
        check(t[0] == 0.0 && t[1] == cfg.sigma_min && t[n] == cfg.sigma_max, format!("endpoints {cfg:?}"));
        check(t.windows(2).all(|w| w[0] < w[1]), format!("monotone {cfg:?}"));
        check(c_out(cfg.sigma_min, &cfg).unwrap() == 0.0, "c_out(sigma_min)".into());
        check(lambda_d(cfg.sigma_min, &cfg).unwrap() == 1.0, "lambda_d(sigma_min)".into());
        let tt = 0.001 + 50.0 * rng.uniform();
        let sdc = ScheduleConfig { sigma_data: 0.05 + 3.0 * rng.uniform(), ..d.clone() };
        let p = scovae_precond(tt, &sdc);
        let sd2 = sdc.sigma_data * sdc.sigma_data;
        let (lhs, rhs) = (p.c_out * p.c_out * (sd2 + tt * tt), tt * tt * sd2);
        check((lhs - rhs).abs() <= 1e-12 * rhs.max(1.0), format!("precond identity t={tt}"));
        let iters = 1 + rng.below(100_000) as u64;
        let cc = ScheduleConfig { s0: 1 + rng.below(8) as u64, iterations: iters, ..d.clone() };
        let cc = ScheduleConfig { s1: cc.s0 + rng.below(300) as u64, ..cc };
        check(curriculum_steps(0, &cc) == cc.s0 as usize + 1, "curriculum start".into());
        let mut prev = 0;
        for j in 0..=20 {
            let n = curriculum_steps(iters * j / 21, &cc);
            check(n >= prev && n <= cc.s1 as usize + 1, format!("curriculum monotone {cc:?}"));
            prev = n;
        }
        cases += 1;
    }
    let k800 = ScheduleConfig { iterations: 800, ..d.clone() };
    let (a, b, c) = (curriculum_steps(0, &k800), curriculum_steps(350, &k800), curriculum_steps(799, &k800));
    check((a, b, c) == (3, 17, 257), format!("curriculum values {a} {b} {c}"));
    report(
        10,
        "schedules",
        failures.is_empty(),
        format!(
            "{cases} random configs; N(0)={a}, N(350)={b}, N(799)={c} for K=800; failures: {:?}",
            failures.iter().take(3).collect::<Vec<_>>()
        ),
    );
}

// ---------------------------------------------------------------- 11, 12

const SMOKE: [&str; 8] = [
    "--data.kind=two_moons",
    "--data.n=2000",
    "--schedule.iterations=2000",
    "--model.hidden=[32,32]",
    "--train.batch_size=64",
    "--train.optimizer.lr=0.001",
    "--eval.n_samples=500",
    "--eval.n_reference=500",
];

/// Runs the binary with a wall-clock limit; returns exit code and stderr.
fn covae(args: &[String], limit: Duration) -> (Option<i32>, String) {
    let mut child = Command::new(env!("CARGO_BIN_EXE_covae"))
        .args(args)
        .stdout(Stdio::null())
        .stderr(Stdio::piped())
        .spawn()
        .unwrap();
    let start = Instant::now();
    loop {
        if let Some(status) = child.try_wait().unwrap() {
            let mut err = String::new();
            use std::io::Read;
            child.stderr.take().unwrap().read_to_string(&mut err).unwrap();
            return (status.code(), err);
        }
        if start.elapsed() > limit {
            let _ = child.kill();
            let _ = child.wait();
            return (None, "timed out".into());
        }
        std::thread::sleep(Duration::from_millis(50));
    }
}

fn train_args(out: &Path, extra: &[&str]) -> Vec<String> {
    let mut a = vec!["train".to_string(), "--quiet".into(), "--out".into(), out.display().to_string()];
    a.extend(SMOKE.iter().map(|s| s.to_string()));
    a.extend(extra.iter().map(|s| s.to_string()));
    a
}

#[test]
fn c11_determinism() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let start = Instant::now();
    let (ca, _) = covae(&train_args(&a, &[]), Duration::from_secs(300));
    let secs = start.elapsed().as_secs_f64();
    let (cb, _) = covae(&train_args(&b, &[]), Duration::from_secs(300));
    let read = |p: &Path| std::fs::read(p).unwrap_or_default();
    let metrics_same = read(&a.join("metrics.csv")) == read(&b.join("metrics.csv"));
    let ckpt_same = read(&a.join("checkpoint.bin")) == read(&b.join("checkpoint.bin"));
    let rows = String::from_utf8(read(&a.join("metrics.csv"))).unwrap().lines().count() - 1;
    report(
        11,
        "determinism",
        ca == Some(0) && cb == Some(0) && metrics_same && ckpt_same && rows >= 20 && secs < 300.0,
        format!(
            "smoke run {secs:.1}s, {rows} metric rows; metrics identical {metrics_same}, checkpoints identical {ckpt_same}"
        ),
    );
}

#[test]
fn c12_stability_ablation() {
    let dir = tempfile::tempdir().unwrap();
    let limit = Duration::from_secs(600);
    let ablated = ["--model.boundary=false", "--train.optimizer.lr=0.003"];
    let (code, err) = covae(&train_args(&dir.path().join("ablated"), &ablated), limit);
    let ablated_ok = match code {
        Some(0) => true,
        Some(3) => err.contains("diverged"),
        _ => false,
    };
    let outcome = match code {
        Some(0) => "completed".to_string(),
        Some(3) => "aborted with divergence error".to_string(),
        Some(c) => format!("exit {c}: {}", err.lines().last().unwrap_or("")),
        None => format!("no exit code ({err})"),
    };
    let (dcode, _) = covae(&train_args(&dir.path().join("default"), &[]), limit);
    report(
        12,
        "stability ablation",
        ablated_ok && dcode == Some(0),
        format!("pseudo-Huber only without boundary: {outcome}; default config exit {dcode:?}"),
    );
}

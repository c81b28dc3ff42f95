use criterion::{black_box, criterion_group, criterion_main, Criterion};

use covae_bench::bundle;
use covae_core::evaluation::energy_distance;
use covae_core::model::ModelKind;
use covae_core::numerics::RngState;
use covae_core::objective::{LossConfig, OptimizerConfig, Variant};
use covae_core::sampler::{sample, SampleSchedule};
use covae_core::schedules::karras_grid;
use covae_core::train::{TrainConfig, Trainer};

fn train_step(c: &mut Criterion) {
    for (name, kind, variant, dim, hidden, batch) in [
        ("covae_2d_64x2_b256", ModelKind::Covae, Variant::Covae, 2, vec![64, 64], 256),
        ("scovae_2d_64x2_b256", ModelKind::Scovae, Variant::Scovae, 2, vec![64, 64], 256),
        ("covae_784d_256x2_b128", ModelKind::Covae, Variant::Covae, 784, vec![256, 256], 128),
    ] {
        let b = bundle(kind, dim, if dim == 2 { 2 } else { 16 }, &hidden);
        let cfg = TrainConfig {
            batch_size: batch,
            optimizer: OptimizerConfig::default(),
            loss: LossConfig {
                variant,
                ..Default::default()
            },
            ..Default::default()
        };
        let mut trainer = Trainer::new(b, cfg, 1).unwrap();
        let data = RngState::new(2, 7).gaussian_sample(vec![4 * batch, dim]);
        c.bench_function(&format!("train_step/{name}"), |bch| {
            bch.iter(|| trainer.step(black_box(&data)).unwrap())
        });
    }
}

fn sampling(c: &mut Criterion) {
    let b = bundle(ModelKind::Covae, 2, 2, &[64, 64]);
    let model = b.ema_model();
    let one = SampleSchedule::one_step(&model.spec.schedule);
    let two = SampleSchedule::with_times(&[0.8], &model.spec.schedule).unwrap();
    c.bench_function("sample/2d_1step_n2000", |bch| {
        bch.iter(|| sample(&model, &one, &mut RngState::new(3, 6), 2000).unwrap())
    });
    c.bench_function("sample/2d_2step_n2000", |bch| {
        bch.iter(|| sample(&model, &two, &mut RngState::new(3, 6), 2000).unwrap())
    });
}

fn metrics(c: &mut Criterion) {
    let x = RngState::new(4, 7).gaussian_sample(vec![2000, 2]);
    let y = RngState::new(5, 7).gaussian_sample(vec![2000, 2]);
    c.bench_function("energy_distance/2000x2000_2d", |bch| {
        bch.iter(|| energy_distance(black_box(&x), black_box(&y)).unwrap())
    });
    let cfg = covae_core::ScheduleConfig::default();
    c.bench_function("karras_grid/257", |bch| bch.iter(|| karras_grid(black_box(256), &cfg).unwrap()));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(20);
    targets = train_step, sampling, metrics
}
criterion_main!(benches);

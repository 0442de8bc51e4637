use criterion::{criterion_group, criterion_main, BatchSize, Criterion, Throughput};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use cmdcm_bench::fixture;
use cmdcm_core::autodiff::{Adagrad, Tape, Tensor};
use cmdcm_core::causal::{dr_ate, DrRow};
use cmdcm_core::data::EncodedSample;
use cmdcm_core::eval::auc;

fn bench_auc(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let pos: Vec<f64> = (0..2_000).map(|_| rng.random::<f64>() + 0.1).collect();
    let neg: Vec<f64> = (0..98_000).map(|_| rng.random::<f64>()).collect();
    let mut g = c.benchmark_group("auc");
    g.throughput(Throughput::Elements(100_000));
    g.bench_function("100k", |b| b.iter(|| auc(&pos, &neg).unwrap()));
    g.finish();
}

fn bench_dr(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let rows: Vec<DrRow> = (0..100_000)
        .map(|_| DrRow {
            a: f64::from(u8::from(rng.random::<bool>())),
            y: f64::from(u8::from(rng.random::<f64>() < 0.03)),
            mu0: rng.random_range(0.0..0.1),
            mu1: rng.random_range(0.0..0.2),
            p_a: rng.random_range(0.05..0.95),
        })
        .collect();
    c.bench_function("dr_ate/100k", |b| b.iter(|| dr_ate(&rows).unwrap()));
}

fn bench_tower(c: &mut Criterion) {
    let fx = fixture(20_000);
    let batch: Vec<&EncodedSample> = fx.samples.iter().take(256).collect();
    let targets = Tensor::column(fx.mu1[..256].to_vec());

    let mut g = c.benchmark_group("tower");
    g.throughput(Throughput::Elements(256));
    g.bench_function("forward_256", |b| {
        b.iter(|| {
            let mut tape = Tape::new();
            fx.tower.forward_tape(&mut tape, &fx.pre, &batch).unwrap()
        })
    });
    g.bench_function("train_step_256", |b| {
        b.iter_batched(
            || (fx.tower.clone(), Adagrad::new(0.02, 1e-10)),
            |(mut tower, mut opt)| {
                let mut tape = Tape::new();
                let f = tower.forward_tape(&mut tape, &fx.pre, &batch).unwrap();
                let t = tape.constant(targets.clone());
                let loss = tower.loss_nodes(&mut tape, &f, &batch, Some(t)).unwrap();
                let grads = tape.backward(loss.total).unwrap();
                opt.step(&mut tower.store, &grads);
                tower
            },
            BatchSize::LargeInput,
        )
    });
    g.finish();

    c.bench_function("tower/predict_20k", |b| b.iter(|| fx.tower.predict(&fx.pre, &fx.samples).unwrap()));
}

criterion_group!(benches, bench_auc, bench_dr, bench_tower);
criterion_main!(benches);

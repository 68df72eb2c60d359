use criterion::{black_box, criterion_group, criterion_main, BatchSize, Criterion};
use geossl::geocluster::fit_kmeans;
use geossl::loss::{info_nce, info_nce_grad, loss_gradients};
use geossl::model::Encoder;
use geossl::queue::NegativeQueue;
use geossl_bench::{points, rng, training_step, uniform, unit_rows};

fn contrastive(c: &mut Criterion) {
    let mut r = rng(1);
    let z = unit_rows(64, 64, &mut r);
    let pos = unit_rows(64, 64, &mut r);
    let negatives = unit_rows(1024, 64, &mut r);
    c.bench_function("info_nce b64 n1024 d64", |b| {
        b.iter(|| info_nce(z.view(), pos.view(), negatives.view(), 0.2).unwrap())
    });
    c.bench_function("info_nce_grad b64 n1024 d64", |b| {
        b.iter(|| info_nce_grad(z.view(), pos.view(), negatives.view(), 0.2).unwrap())
    });
}

fn encoder(c: &mut Criterion) {
    let (state, batch, cfg) = training_step(64, 1024, 100);
    c.bench_function("encoder forward b64 32x32x3", |b| {
        b.iter(|| Encoder::forward(&state.query, &batch.query).unwrap())
    });
    let trace = Encoder::forward(&state.query, &batch.query).unwrap();
    let grad = uniform(64, 64, &mut rng(2));
    c.bench_function("encoder backward b64 32x32x3", |b| {
        b.iter(|| Encoder::backward(&state.query, &trace, Some(grad.view()), None))
    });
    c.bench_function("combined loss gradients b64 n1024 K100", |b| {
        b.iter(|| loss_gradients(&state, &batch, &cfg).unwrap())
    });
}

fn kmeans(c: &mut Criterion) {
    let pts = points(2000, &mut rng(3));
    let mut group = c.benchmark_group("kmeans");
    group.sample_size(10);
    group.bench_function("2000 points K100", |b| {
        b.iter(|| fit_kmeans(black_box(&pts), 100, 0, 300, 1e-9).unwrap())
    });
    group.finish();
}

fn queue(c: &mut Criterion) {
    let keys = unit_rows(64, 64, &mut rng(4));
    let mut full = NegativeQueue::new(1024, 64).unwrap();
    for _ in 0..16 {
        full.enqueue_batch(keys.view()).unwrap();
    }
    c.bench_function("queue enqueue 64 into 1024", |b| {
        b.iter_batched_ref(
            || full.clone(),
            |q| q.enqueue_batch(keys.view()).unwrap(),
            BatchSize::SmallInput,
        )
    });
    c.bench_function("queue snapshot 1024x64", |b| {
        b.iter(|| full.snapshot().unwrap())
    });
}

criterion_group!(benches, contrastive, encoder, kmeans, queue);
criterion_main!(benches);

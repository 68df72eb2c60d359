//! Seeded fixtures shared by the benchmarks.

use geossl::loss::{LossConfig, PretrainBatch};
use geossl::model::{EncoderConfig, FeatureSource, MoCoState};
use ndarray::{Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.random_range(-1.0..1.0))
}

pub fn unit_rows(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Array2<f64> {
    let x = uniform(rows, cols, rng);
    let norms = x
        .map_axis(Axis(1), |r| r.dot(&r).sqrt())
        .insert_axis(Axis(1));
    x / &norms
}

pub fn points(n: usize, rng: &mut ChaCha8Rng) -> Vec<(f64, f64)> {
    (0..n)
        .map(|_| {
            (
                rng.random_range(-60.0..60.0),
                rng.random_range(-180.0..180.0),
            )
        })
        .collect()
}

/// Desk-default encoder with a full queue and a geo head, plus one batch.
pub fn training_step(
    batch: usize,
    queue: usize,
    k: usize,
) -> (MoCoState, PretrainBatch, LossConfig) {
    let mut r = rng(0);
    let cfg = EncoderConfig::default();
    let mut state =
        MoCoState::init(&cfg, Some((FeatureSource::Projection, k)), queue, &mut r).unwrap();
    state
        .queue
        .enqueue_batch(unit_rows(queue, cfg.embed_dim, &mut r).view())
        .unwrap();
    let dim = cfg.geometry.len();
    let step = PretrainBatch {
        query: uniform(batch, dim, &mut r).mapv(|v| 0.5 + 0.5 * v),
        key: uniform(batch, dim, &mut r).mapv(|v| 0.5 + 0.5 * v),
        geo_labels: Some((0..batch).map(|i| i % k).collect()),
    };
    let loss = LossConfig {
        n_clusters: k,
        ..LossConfig::default()
    };
    (state, step, loss)
}

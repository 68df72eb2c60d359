//! Acceptance criteria 1-10. Criterion 11 (pipeline smoke test) lives in the
//! cli crate. Prints one PASS/FAIL line per criterion.

use std::collections::VecDeque;
use std::time::Instant;

use geossl::data::{generate_synthetic, DatasetManifest, ImageGeometry, SyntheticSpec};
use geossl::eval::{evaluate_frozen, geo_head_accuracy, ProbeConfig, TemporalRule};
use geossl::geocluster::{fit_kmeans, GeoClusterModel};
use geossl::loss::{
    classifier_gradients, classifier_objective, combined_loss, combined_objective,
    geo_cross_entropy, info_nce, loss_gradients, PretrainBatch,
};
use geossl::model::{
    axpy, scale_params, Dense, Encoder, EncoderConfig, EncoderParams, FeatureSource, MoCoState,
    ParamSet,
};
use geossl::queue::NegativeQueue;
use geossl::trainer::{flatten_params, pretrain, TrainConfig, Trainer, Variant};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn unit_rows(rows: &[Vec<f64>]) -> Array2<f64> {
    let d = rows[0].len();
    Array2::from_shape_fn((rows.len(), d), |(i, j)| {
        let n = rows[i].iter().map(|v| v * v).sum::<f64>().sqrt();
        rows[i][j] / n
    })
}

fn loss_identities() -> Outcome {
    let mut worst = 0.0f64;
    let z = unit_rows(&[vec![1.0, 0.0, 0.0]]);
    let pos = unit_rows(&[vec![0.6, 0.8, 0.0]]);
    let neg = unit_rows(&[vec![0.6, 0.0, 0.8]]);
    for j in [1usize, 3, 7, 31] {
        let negs = ndarray::concatenate(ndarray::Axis(0), &vec![neg.view(); j]).unwrap();
        let l = info_nce(z.view(), pos.view(), negs.view(), 0.2)
            .unwrap()
            .mean;
        worst = worst.max((l - ((1 + j) as f64).ln()).abs());
    }
    for k in [2usize, 100] {
        let l = geo_cross_entropy(&Array2::zeros((3, k)), &[0, 1, k - 1])
            .unwrap()
            .mean;
        worst = worst.max((l - (k as f64).ln()).abs());
    }
    let mut linear = true;
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..100 {
        let (lc, lg) = (rng.random_range(0.0..10.0), rng.random_range(0.0..10.0));
        let (a, b) = (rng.random_range(0.0..3.0), rng.random_range(0.0..3.0));
        let s = rng.random_range(0.0..4.0);
        let lf = combined_loss(lc, lg, a, b).unwrap();
        linear &= lf == a * lc + b * lg;
        linear &= combined_loss(lc, lg, s * a, s * b).unwrap() == s * a * lc + s * b * lg;
        linear &= combined_loss(lc, lg, a, 0.0).unwrap() == a * lc;
    }
    outcome(
        worst < 1e-9 && linear,
        format!("max |L - ln(.)| = {worst:.1e}, combined loss linear: {linear}"),
    )
}

fn perturbed<P: ParamSet + Clone>(p: &P, array: usize, index: usize, delta: f64) -> P {
    let mut q = p.clone();
    *q.arrays_mut()[array].iter_mut().nth(index).unwrap() += delta;
    q
}

/// Largest `|a - n| / max(|a|, |n|, 1e-8)` over every parameter entry.
fn gradient_error<P: ParamSet + Clone>(params: &P, analytic: &P, f: impl Fn(&P) -> f64) -> f64 {
    const H: f64 = 1e-5;
    let grads: Vec<Vec<f64>> = analytic
        .arrays()
        .iter()
        .map(|(_, a)| a.iter().copied().collect())
        .collect();
    let mut worst = 0.0f64;
    for (ai, g) in grads.iter().enumerate() {
        for (j, &a) in g.iter().enumerate() {
            let n =
                (f(&perturbed(params, ai, j, H)) - f(&perturbed(params, ai, j, -H))) / (2.0 * H);
            worst = worst.max((a - n).abs() / a.abs().max(n.abs()).max(1e-8));
        }
    }
    worst
}

fn tiny_encoder(rng: &mut ChaCha8Rng) -> EncoderConfig {
    EncoderConfig {
        geometry: ImageGeometry::new(2, 2, 2),
        pool: 1,
        hidden: vec![rng.random_range(4..8), rng.random_range(4..8)],
        embed_dim: 8,
        proj_depth: 2,
    }
}

fn gradient_check() -> Outcome {
    let mut worst = 0.0f64;
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc = tiny_encoder(&mut rng);
        let k = rng.random_range(2..6);
        let x = |n: usize, rng: &mut ChaCha8Rng| {
            Array2::from_shape_fn((n, 8), |_| rng.random_range(-0.5..0.5))
        };
        let labels: Vec<usize> = (0..4).map(|_| rng.random_range(0..k)).collect();
        for variant in Variant::ALL {
            let source = if seed % 2 == 0 {
                FeatureSource::Projection
            } else {
                FeatureSource::Backbone
            };
            let cfg = TrainConfig {
                variant,
                alpha: 1.0,
                beta: 1.0,
                n_clusters: k,
                geo_features: source,
                queue_size: 16,
                batch_size: 4,
                encoder: enc.clone(),
                ..TrainConfig::default()
            };
            if variant.is_contrastive() {
                let head = variant.uses_geo().then_some((source, k));
                let mut st = MoCoState::init(&enc, head, 16, &mut rng).unwrap();
                st.key = EncoderParams::init(&enc, &mut rng).unwrap();
                let fill = Encoder::encode(&st.key, &x(16, &mut rng)).unwrap();
                st.queue.enqueue_batch(fill.view()).unwrap();
                let batch = PretrainBatch {
                    query: x(4, &mut rng),
                    key: x(4, &mut rng),
                    geo_labels: variant.uses_geo().then(|| labels.clone()),
                };
                let lc = cfg.loss_config();
                let g = loss_gradients(&st, &batch, &lc).unwrap();
                let with_query = |q: &EncoderParams| {
                    let mut s = st.clone();
                    s.query = q.clone();
                    combined_objective(&s, &batch, &lc).unwrap()
                };
                worst = worst.max(gradient_error(&st.query, &g.query, with_query));
                if let (Some(h), Some(gh)) = (&st.geo_head, &g.geo_head) {
                    let with_head = |h: &Dense| {
                        let mut s = st.clone();
                        s.geo_head = Some(h.clone());
                        combined_objective(&s, &batch, &lc).unwrap()
                    };
                    worst = worst.max(gradient_error(h, gh, with_head));
                }
            } else {
                let source = if variant == Variant::Supervised {
                    FeatureSource::Backbone
                } else {
                    source
                };
                let params = EncoderParams::init(&enc, &mut rng).unwrap();
                let head = Dense::init(params.source_dim(source), k, &mut rng);
                let xb = x(4, &mut rng);
                let g = classifier_gradients(&params, &head, &xb, &labels, source).unwrap();
                let by_encoder = |p: &EncoderParams| {
                    classifier_objective(p, &head, &xb, &labels, source).unwrap()
                };
                let by_head =
                    |h: &Dense| classifier_objective(&params, h, &xb, &labels, source).unwrap();
                worst = worst.max(gradient_error(&params, &g.encoder, by_encoder));
                worst = worst.max(gradient_error(&head, &g.head, by_head));
            }
        }
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.2e} over 20 instances x 6 variants"),
    )
}

fn small_spec(n_areas: usize, views: usize) -> SyntheticSpec {
    SyntheticSpec {
        n_areas,
        min_views: views,
        max_views: views,
        ..SyntheticSpec::default()
    }
}

fn structural_equivalence() -> Outcome {
    let m = generate_synthetic(&small_spec(256, 1), 3).unwrap();
    let cfg = |variant| TrainConfig {
        variant,
        epochs: 2,
        queue_size: 256,
        ..TrainConfig::default()
    };
    let a = pretrain(&m, None, &cfg(Variant::Moco)).unwrap();
    let b = pretrain(&m, None, &cfg(Variant::MocoTp)).unwrap();
    let same_len = a.trace.rows.len() == b.trace.rows.len() && !a.trace.rows.is_empty();
    let gap = a
        .trace
        .rows
        .iter()
        .zip(&b.trace.rows)
        .map(|(x, y)| (x.total - y.total).abs())
        .fold(0.0, f64::max);
    outcome(
        same_len && gap < 1e-9,
        format!(
            "{} steps, max trace difference {gap:.1e}",
            a.trace.rows.len()
        ),
    )
}

fn queue_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (cap, d) = (37, 4);
    let mut q = NegativeQueue::new(cap, d).unwrap();
    let mut oracle: VecDeque<Vec<f64>> = VecDeque::new();
    let mut ok = true;
    for op in 0..1000 {
        if rng.random_bool(0.6) {
            let b = rng.random_range(1..=cap);
            let rows: Vec<Vec<f64>> = (0..b)
                .map(|_| (0..d).map(|_| rng.random_range(-1.0..1.0)).collect())
                .collect();
            let rows = unit_rows(&rows);
            q.enqueue_batch(rows.view()).unwrap();
            for r in rows.outer_iter() {
                oracle.push_back(r.to_vec());
                if oracle.len() > cap {
                    oracle.pop_front();
                }
            }
        } else {
            match q.snapshot() {
                Ok(s) => {
                    ok &= s
                        .outer_iter()
                        .map(|r| r.to_vec())
                        .eq(oracle.iter().cloned())
                }
                Err(_) => ok &= oracle.is_empty() && op < cap,
            }
        }
        ok &= q.len() == oracle.len()
            && q.len() <= q.capacity()
            && q.is_full() == (oracle.len() == cap);
    }
    outcome(
        ok,
        "1000 random enqueue/snapshot operations vs VecDeque oracle",
    )
}

fn ema_replay() -> Outcome {
    let m = generate_synthetic(&small_spec(400, 2), 5).unwrap();
    let cfg = TrainConfig {
        variant: Variant::MocoTp,
        epochs: 1,
        batch_size: 8,
        queue_size: 64,
        ema_momentum: 0.99,
        ..TrainConfig::default()
    };
    let mut trainer = Trainer::new(&m, None, cfg.clone()).unwrap();
    let mut key = trainer.state().key.clone();
    let mut history = Vec::new();
    trainer
        .run_epoch_with(|s, _| history.push(s.query.clone()))
        .unwrap();
    for q in &history {
        scale_params(&mut key, cfg.ema_momentum);
        axpy(&mut key, 1.0 - cfg.ema_momentum, q);
    }
    let fin = flatten_params(&trainer.state().key);
    let rep = flatten_params(&key);
    let num: f64 = fin
        .iter()
        .zip(&rep)
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt();
    let den: f64 = fin.iter().map(|a| a * a).sum::<f64>().sqrt();
    let moved = flatten_params(&history[0]) != fin;
    let rel = num / den;
    outcome(
        history.len() == 50 && rel < 1e-6 && moved,
        format!(
            "{} iterations, relative replay error {rel:.1e}",
            history.len()
        ),
    )
}

fn brute_force_inertia(points: &[(f64, f64)], k: usize) -> f64 {
    let n = points.len();
    let mut best = f64::INFINITY;
    let mut assign = vec![0usize; n];
    loop {
        let mut total = 0.0;
        for c in 0..k {
            let members: Vec<&(f64, f64)> = points
                .iter()
                .zip(&assign)
                .filter(|(_, &a)| a == c)
                .map(|(p, _)| p)
                .collect();
            if members.is_empty() {
                continue;
            }
            let m = members.len() as f64;
            let (cx, cy) = members
                .iter()
                .fold((0.0, 0.0), |(x, y), p| (x + p.0, y + p.1));
            let (cx, cy) = (cx / m, cy / m);
            total += members
                .iter()
                .map(|p| (p.0 - cx).powi(2) + (p.1 - cy).powi(2))
                .sum::<f64>();
        }
        best = best.min(total);
        let mut i = 0;
        loop {
            if i == n {
                return best;
            }
            assign[i] += 1;
            if assign[i] < k {
                break;
            }
            assign[i] = 0;
            i += 1;
        }
    }
}

fn kmeans_optimality() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut worst = 0.0f64;
    let mut monotone = true;
    for _ in 0..10 {
        let k = rng.random_range(1..=3);
        let n = rng.random_range(k.max(2)..=8);
        let points: Vec<(f64, f64)> = (0..n)
            .map(|_| (rng.random_range(-10.0..10.0), rng.random_range(-10.0..10.0)))
            .collect();
        let optimum = brute_force_inertia(&points, k);
        let mut best = f64::INFINITY;
        for seed in 0..10 {
            let model: GeoClusterModel = fit_kmeans(&points, k, seed, 100, 0.0).unwrap();
            monotone &= model.inertia_trace.windows(2).all(|w| w[1] <= w[0]);
            best = best.min(model.inertia);
        }
        worst = worst.max((best - optimum).abs());
    }
    outcome(
        worst < 1e-9 && monotone,
        format!("max |best-of-10 - optimum| = {worst:.1e}, traces monotone: {monotone}"),
    )
}

struct Split {
    train: DatasetManifest,
    test: DatasetManifest,
    geo: GeoClusterModel,
}

fn learnability_split(seed: u64) -> Split {
    let spec = SyntheticSpec {
        n_areas: 2000,
        min_views: 3,
        max_views: 3,
        geo_class_corr: 0.9,
        temporal_noise: 1.0,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, seed).unwrap();
    let (train, test) = data.split_areas(0.2, seed).unwrap();
    let geo = fit_kmeans(
        &train.coordinates(),
        TrainConfig::default().n_clusters,
        seed,
        100,
        1e-9,
    )
    .unwrap();
    Split { train, test, geo }
}

struct ProbeResult {
    single: f64,
    temporal: f64,
}

fn probe_after(split: &Split, variant: Variant, seed: u64, epochs: usize) -> ProbeResult {
    let cfg = TrainConfig {
        variant,
        seed,
        epochs,
        ..TrainConfig::default()
    };
    let geo = variant.uses_geo().then_some(&split.geo);
    let ckpt = if epochs == 0 {
        Trainer::new(&split.train, geo, TrainConfig { epochs: 1, ..cfg })
            .unwrap()
            .checkpoint()
    } else {
        pretrain(&split.train, geo, &cfg).unwrap().checkpoint
    };
    let ev = evaluate_frozen(
        &ckpt,
        &split.train,
        &split.test,
        &ProbeConfig::default(),
        TemporalRule::Mean,
    )
    .unwrap();
    ProbeResult {
        single: ev.single.metrics.top1,
        temporal: ev.temporal.metrics.top1,
    }
}

fn fmt(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x:.3}"))
        .collect::<Vec<_>>()
        .join(", ")
}

fn geo_only_sanity() -> Outcome {
    let spec = SyntheticSpec {
        n_areas: 2000,
        min_views: 3,
        max_views: 3,
        geo_class_corr: 1.0,
        ..SyntheticSpec::default()
    };
    let data = generate_synthetic(&spec, 0).unwrap();
    let (train, test) = data.split_areas(0.2, 0).unwrap();
    let geo = fit_kmeans(&train.coordinates(), 8, 0, 100, 1e-9).unwrap();
    let cfg = TrainConfig {
        variant: Variant::GeoOnly,
        epochs: 10,
        n_clusters: 8,
        ..TrainConfig::default()
    };
    let out = pretrain(&train, Some(&geo), &cfg).unwrap();
    let acc = geo_head_accuracy(&out.checkpoint, &test, &geo).unwrap();
    outcome(
        acc >= 0.90,
        format!("held-out geo-cluster accuracy {acc:.3} (K = 8, 10 epochs)"),
    )
}

fn report(id: u32, name: &str, start: Instant, o: &Outcome, failures: &mut Vec<u32>) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    if !o.pass {
        failures.push(id);
    }
    println!(
        "criterion {id:>2} [{verdict}] {name}: {} ({:.1}s)",
        o.detail,
        start.elapsed().as_secs_f64()
    );
}

type Check = (u32, &'static str, fn() -> Outcome);

fn main() {
    let mut failures = Vec::new();
    let quick: [Check; 6] = [
        (1, "loss identities", loss_identities),
        (2, "gradient verification", gradient_check),
        (3, "structural equivalence", structural_equivalence),
        (4, "queue semantics", queue_semantics),
        (5, "EMA correctness", ema_replay),
        (6, "k-means optimality", kmeans_optimality),
    ];
    for (id, name, f) in quick {
        let t = Instant::now();
        let o = f();
        report(id, name, t, &o, &mut failures);
    }

    let t = Instant::now();
    let splits: Vec<Split> = (0..3).map(learnability_split).collect();
    let full: Vec<ProbeResult> = splits
        .iter()
        .zip(0u64..)
        .map(|(s, seed)| probe_after(s, Variant::MocoGeoTp, seed, 20))
        .collect();
    let single: Vec<f64> = full.iter().map(|r| r.single).collect();
    let temporal: Vec<f64> = full.iter().map(|r| r.temporal).collect();
    let med = median(single.clone());
    report(
        7,
        "synthetic learnability",
        t,
        &outcome(
            med >= 0.70,
            format!(
                "moco+geo+tp probe top-1 [{}], median {med:.3}",
                fmt(&single)
            ),
        ),
        &mut failures,
    );

    let t = Instant::now();
    let gains: Vec<f64> = temporal.iter().zip(&single).map(|(t, s)| t - s).collect();
    let med_gain = median(gains);
    report(
        8,
        "temporal-aggregation gain",
        t,
        &outcome(
            med_gain >= 0.0,
            format!(
                "temporal top-1 [{}], median gain {med_gain:+.3}",
                fmt(&temporal)
            ),
        ),
        &mut failures,
    );

    let t = Instant::now();
    let moco: Vec<f64> = splits
        .iter()
        .zip(0u64..)
        .map(|(s, seed)| probe_after(s, Variant::Moco, seed, 20).single)
        .collect();
    let tp: Vec<f64> = splits
        .iter()
        .zip(0u64..)
        .map(|(s, seed)| probe_after(s, Variant::MocoTp, seed, 20).single)
        .collect();
    let (m_moco, m_tp) = (median(moco.clone()), median(tp.clone()));
    report(
        9,
        "temporal-positive gain",
        t,
        &outcome(
            m_tp >= m_moco - 0.02,
            format!(
                "moco [{}] median {m_moco:.3}; moco+tp [{}] median {m_tp:.3}",
                fmt(&moco),
                fmt(&tp)
            ),
        ),
        &mut failures,
    );

    let t = Instant::now();
    let o = geo_only_sanity();
    report(10, "geo-only sanity", t, &o, &mut failures);

    let t = Instant::now();
    let random: Vec<f64> = splits
        .iter()
        .zip(0u64..)
        .map(|(s, seed)| probe_after(s, Variant::MocoGeoTp, seed, 0).single)
        .collect();
    println!(
        "reference: untrained encoder probe top-1 [{}], median {:.3} ({:.1}s)",
        fmt(&random),
        median(random.clone()),
        t.elapsed().as_secs_f64()
    );

    if failures.is_empty() {
        println!("acceptance: all 10 criteria passed");
    } else {
        println!("acceptance: failed criteria {failures:?}");
        std::process::exit(1);
    }
}

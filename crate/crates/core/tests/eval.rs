use geossl::data::{generate_synthetic, DatasetManifest, ImageGeometry, SyntheticSpec};
use geossl::eval::{
    argmax, evaluate_finetuned, evaluate_frozen, extract_features, finetune, per_class_csv,
    train_linear_probe, FinetuneConfig, FinetunedModel, Granularity, ProbeConfig, Protocol,
    TemporalRule,
};
use geossl::model::EncoderConfig;
use geossl::trainer::{pretrain, Checkpoint, TrainConfig, Variant};
use geossl::Error;

fn geometry() -> ImageGeometry {
    ImageGeometry::new(8, 8, 3)
}

fn data(n_areas: usize, seed: u64) -> DatasetManifest {
    let spec = SyntheticSpec {
        n_areas,
        n_classes: 4,
        n_geo: 4,
        min_views: 1,
        max_views: 3,
        geometry: geometry(),
        ..SyntheticSpec::default()
    };
    generate_synthetic(&spec, seed).unwrap()
}

fn checkpoint(variant: Variant, manifest: &DatasetManifest, epochs: usize) -> Checkpoint {
    let cfg = TrainConfig {
        variant,
        epochs,
        batch_size: 8,
        queue_size: 32,
        lr: 0.02,
        encoder: EncoderConfig {
            geometry: geometry(),
            pool: 2,
            hidden: vec![24, 16],
            embed_dim: 8,
            proj_depth: 2,
        },
        ..TrainConfig::default()
    };
    pretrain(manifest, None, &cfg).unwrap().checkpoint
}

#[test]
fn feature_extraction_is_deterministic_and_grouped_by_area() {
    let m = data(30, 1);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let a = extract_features(&ckpt, &m).unwrap();
    let b = extract_features(&ckpt, &m).unwrap();
    assert_eq!(a, b);
    assert_eq!(a.features.dim(), (m.n_samples(), 16));
    assert_eq!(a.labels.len(), m.n_samples());
    let mut row = 0;
    for (i, area) in m.areas.iter().enumerate() {
        for _ in &area.views {
            assert_eq!(a.area_index[row], i);
            assert_eq!(a.labels[row], area.label.unwrap());
            row += 1;
        }
    }
    assert_eq!(
        a.area_labels(),
        m.areas.iter().map(|x| x.label.unwrap()).collect::<Vec<_>>()
    );
}

#[test]
fn one_area_with_three_views_gives_three_rows() {
    let m = data(30, 1);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let mut single = m.subset(&[0]);
    let mut area = m.areas.iter().find(|a| a.n_views() == 3).unwrap().clone();
    area.area_id = "solo".into();
    for v in &mut area.views {
        v.area_id = "solo".into();
    }
    single.areas = vec![area];
    let fs = extract_features(&ckpt, &single).unwrap();
    assert_eq!(fs.features.nrows(), 3);
    assert_eq!(fs.area_index, vec![0, 0, 0]);
}

#[test]
fn duplicated_images_give_equal_rows() {
    let m = data(30, 1);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let mut dup = m.subset(&[0, 1]);
    let image = dup.areas[0].views[0].image.clone();
    dup.areas[1].views[0].image = image;
    let fs = extract_features(&ckpt, &dup).unwrap();
    let second = dup.areas[0].n_views();
    assert_eq!(fs.features.row(0), fs.features.row(second));
}

#[test]
fn unlabeled_manifest_is_rejected() {
    let m = data(30, 1);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let mut unlabeled = m.clone();
    unlabeled.n_classes = None;
    for a in &mut unlabeled.areas {
        a.label = None;
        for v in &mut a.views {
            v.label = None;
        }
    }
    assert!(matches!(
        extract_features(&ckpt, &unlabeled),
        Err(Error::Validation(_))
    ));
    assert!(matches!(
        finetune(&ckpt, &unlabeled, &FinetuneConfig::default()),
        Err(Error::Validation(_))
    ));
}

#[test]
fn frozen_evaluation_is_reproducible() {
    let m = data(60, 2);
    let (train, test) = m.split_areas(0.3, 0).unwrap();
    let ckpt = checkpoint(Variant::MocoTp, &train, 2);
    let run = || {
        evaluate_frozen(
            &ckpt,
            &train,
            &test,
            &ProbeConfig::default(),
            TemporalRule::Mean,
        )
        .unwrap()
    };
    let a = run();
    let b = run();
    assert_eq!(a.single.to_json().unwrap(), b.single.to_json().unwrap());
    assert_eq!(a.temporal.to_json().unwrap(), b.temporal.to_json().unwrap());
    assert_eq!(a.single.protocol, Protocol::FrozenProbe);
    assert_eq!(a.single.granularity, Granularity::Single);
    assert_eq!(a.temporal.granularity, Granularity::Temporal);
    assert_eq!(a.single.metrics.n_samples, test.n_samples());
    assert_eq!(a.temporal.metrics.n_samples, test.areas.len());
    for r in [&a.single, &a.temporal] {
        let m = &r.metrics;
        assert!((0.0..=1.0).contains(&m.top1) && (0.0..=1.0).contains(&m.macro_f1));
        assert!(m.top5.is_none());
    }
    let csv = per_class_csv(&a.single, &a.temporal);
    assert!(csv.starts_with("class,single_accuracy,temporal_accuracy\n"));
}

#[test]
fn zero_epoch_finetune_reproduces_the_probe() {
    let m = data(40, 3);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let cfg = FinetuneConfig {
        epochs: 0,
        ..FinetuneConfig::default()
    };
    let out = finetune(&ckpt, &m, &cfg).unwrap();
    assert_eq!(out.losses.len(), 1);
    assert_eq!(out.model.encoder, ckpt.state.query);

    let fs = extract_features(&ckpt, &m).unwrap();
    let fit = train_linear_probe(&fs.features, &fs.labels, 4, &cfg.probe).unwrap();
    let probe_probs = fit.probe.predict_proba(&fs.features).unwrap();
    let ft_probs = out.model.predict_proba(&m).unwrap();
    let gap = (&probe_probs - &ft_probs)
        .iter()
        .fold(0.0f64, |a, v| a.max(v.abs()));
    assert!(gap < 1e-9, "{gap}");
    let same = probe_probs
        .outer_iter()
        .zip(ft_probs.outer_iter())
        .all(|(p, q)| argmax(p) == argmax(q));
    assert!(same);
    assert_eq!(out.train_accuracy, fit.train_accuracy);
}

#[test]
fn finetune_lowers_training_loss() {
    let m = data(60, 4);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let cfg = FinetuneConfig {
        epochs: 5,
        batch_size: 16,
        lr: 0.005,
        ..FinetuneConfig::default()
    };
    let out = finetune(&ckpt, &m, &cfg).unwrap();
    assert_eq!(out.losses.len(), 6);
    assert!(
        out.losses.last().unwrap() < &out.losses[0],
        "{:?}",
        out.losses
    );
}

#[test]
fn finetuning_a_supervised_checkpoint_keeps_probe_accuracy() {
    let m = data(60, 5);
    let ckpt = checkpoint(Variant::Supervised, &m, 3);
    let cfg = FinetuneConfig {
        epochs: 3,
        lr: 0.005,
        ..FinetuneConfig::default()
    };
    let out = finetune(&ckpt, &m, &cfg).unwrap();
    assert!(
        out.train_accuracy >= out.probe_train_accuracy,
        "{} < {}",
        out.train_accuracy,
        out.probe_train_accuracy
    );
    let (single, temporal) =
        evaluate_finetuned(&out.model, &m, TemporalRule::MaxConfidence).unwrap();
    assert_eq!(single.protocol, Protocol::Finetune);
    assert_eq!(single.metrics.top1, out.train_accuracy);
    assert_eq!(temporal.metrics.n_samples, m.areas.len());
}

#[test]
fn finetuned_model_round_trips_through_archive() {
    let m = data(40, 6);
    let ckpt = checkpoint(Variant::Moco, &m, 1);
    let cfg = FinetuneConfig {
        epochs: 1,
        lr: 0.005,
        ..FinetuneConfig::default()
    };
    let model = finetune(&ckpt, &m, &cfg).unwrap().model;
    let mut bytes = std::io::Cursor::new(Vec::new());
    model.write_to(&mut bytes).unwrap();
    let back = FinetunedModel::read_from(std::io::Cursor::new(bytes.get_ref().clone())).unwrap();
    assert_eq!(back, model);
    let mut again = std::io::Cursor::new(Vec::new());
    back.write_to(&mut again).unwrap();
    assert_eq!(again.into_inner(), bytes.into_inner());
    assert!(matches!(
        FinetunedModel::read_from(std::io::Cursor::new(b"not a zip".to_vec())),
        Err(Error::Serde(_))
    ));
}

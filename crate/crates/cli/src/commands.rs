use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use geossl::data::{
    generate_synthetic, load_manifest, write_manifest, write_manifest_index, AugmentConfig,
    DatasetManifest, ImageGeometry, SyntheticSpec,
};
use geossl::eval::{
    evaluate_finetuned, extract_features, finetune as finetune_model, reports, train_linear_probe,
    EvalReport, FinetuneConfig, FinetunedModel, Granularity, LinearProbe, ProbeConfig, Protocol,
    TemporalRule,
};
use geossl::geocluster::{cluster_stats, fit_kmeans, ClusterStats, GeoClusterModel};
use geossl::model::EncoderConfig;
use geossl::trainer::{Checkpoint, LossTrace, TraceRow, TrainConfig, Trainer};
use serde::{Deserialize, Serialize};

use crate::config::{input, or, output_dir, RunConfig};
use crate::{plot, CliError};

fn write_text(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::runtime(format!("writing {}: {e}", path.display())))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).map_err(|e| CliError::runtime(e.to_string()))?;
    write_text(path, &(text + "\n"))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::runtime(format!("reading {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| CliError::usage(format!("{}: {e}", path.display())))
}

pub fn gen_data(mut cfg: RunConfig) -> Result<(), CliError> {
    let out = output_dir(&cfg)?;
    let d = SyntheticSpec::default();
    let g = ImageGeometry::default();
    let views = cfg.views;
    let spec = SyntheticSpec {
        n_areas: or(&mut cfg.areas, d.n_areas),
        n_classes: or(&mut cfg.classes, d.n_classes),
        n_geo: or(&mut cfg.geo_centers, d.n_geo),
        min_views: or(&mut cfg.min_views, views.unwrap_or(d.min_views)),
        max_views: or(&mut cfg.max_views, views.unwrap_or(d.max_views)),
        geometry: ImageGeometry::new(
            or(&mut cfg.height, g.h),
            or(&mut cfg.width, g.w),
            or(&mut cfg.channels, g.ch),
        ),
        geo_class_corr: or(&mut cfg.rho, d.geo_class_corr),
        temporal_noise: or(&mut cfg.temporal_noise, d.temporal_noise),
        area_noise: or(&mut cfg.area_noise, d.area_noise),
        coord_noise_deg: or(&mut cfg.coord_noise, d.coord_noise_deg),
        ..d
    };
    spec.validate()?;
    let seed = or(&mut cfg.seed, 0);
    let test_fraction = or(&mut cfg.test_fraction, 0.2);
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(CliError::usage(format!(
            "test_fraction must be in [0, 1), got {test_fraction}"
        )));
    }
    cfg.echo(&out)?;

    let manifest = generate_synthetic(&spec, seed)?;
    write_manifest(&manifest, out.join("manifest.jsonl"))?;
    let (train, test) = manifest.split_areas(test_fraction, seed)?;
    write_manifest_index(&train, out.join("train.jsonl"))?;
    write_manifest_index(&test, out.join("test.jsonl"))?;
    eprintln!(
        "wrote {} areas, {} images ({} train / {} test areas) to {}",
        manifest.areas.len(),
        manifest.n_samples(),
        train.areas.len(),
        test.areas.len(),
        out.display()
    );
    Ok(())
}

pub fn cluster(mut cfg: RunConfig) -> Result<(), CliError> {
    let manifest_path = input(&cfg.manifest, "manifest")?;
    let out = output_dir(&cfg)?;
    let k = or(&mut cfg.k, 100);
    let seed = or(&mut cfg.seed, 0);
    let max_iter = or(&mut cfg.max_iter, 300);
    let tol = or(&mut cfg.tol, 1e-9);
    cfg.echo(&out)?;

    let manifest = load_manifest(&manifest_path)?;
    let points = manifest.coordinates();
    let model = fit_kmeans(&points, k, seed, max_iter, tol)?;
    model.save(out.join("geo_model.json"))?;
    let assignment = model.assign_manifest(&manifest);
    plot::cluster_scatter(
        &out.join("clusters.svg"),
        &points,
        &assignment,
        &model.centroids,
    )?;
    if manifest.is_labeled() {
        write_json(
            &out.join("cluster_stats.json"),
            &cluster_stats(&manifest, &model)?,
        )?;
    }
    eprintln!(
        "K = {k}, inertia {:.6}, {} iterations",
        model.inertia, model.iterations
    );
    Ok(())
}

fn train_config(
    cfg: &mut RunConfig,
    manifest: &DatasetManifest,
    geo: Option<&GeoClusterModel>,
) -> TrainConfig {
    let d = TrainConfig::default();
    let e = EncoderConfig::default();
    let a = AugmentConfig::default();
    TrainConfig {
        variant: or(&mut cfg.variant, d.variant),
        epochs: or(&mut cfg.epochs, d.epochs),
        batch_size: or(&mut cfg.batch_size, d.batch_size),
        lr: or(&mut cfg.lr, d.lr),
        lr_floor: or(&mut cfg.lr_floor, d.lr_floor),
        schedule: or(&mut cfg.schedule, d.schedule),
        momentum: or(&mut cfg.momentum, d.momentum),
        weight_decay: or(&mut cfg.weight_decay, d.weight_decay),
        temperature: or(&mut cfg.temperature, d.temperature),
        alpha: or(&mut cfg.alpha, d.alpha),
        beta: or(&mut cfg.beta, d.beta),
        ema_momentum: or(&mut cfg.ema_momentum, d.ema_momentum),
        queue_size: or(&mut cfg.queue_size, d.queue_size),
        n_clusters: match geo {
            Some(g) => or(&mut cfg.k, g.k),
            None => cfg.k.unwrap_or(d.n_clusters),
        },
        geo_features: or(&mut cfg.geo_features, d.geo_features),
        seed: or(&mut cfg.seed, d.seed),
        encoder: EncoderConfig {
            geometry: manifest.geometry,
            pool: or(&mut cfg.pool, e.pool),
            hidden: or(&mut cfg.hidden, e.hidden),
            embed_dim: or(&mut cfg.embed_dim, e.embed_dim),
            proj_depth: or(&mut cfg.proj_depth, e.proj_depth),
        },
        augment: AugmentConfig {
            crop_scale: (
                or(&mut cfg.crop_min, a.crop_scale.0),
                or(&mut cfg.crop_max, a.crop_scale.1),
            ),
            flip_prob: or(&mut cfg.flip_prob, a.flip_prob),
            jitter_prob: or(&mut cfg.jitter_prob, a.jitter_prob),
            brightness: or(&mut cfg.brightness, a.brightness),
            contrast: or(&mut cfg.contrast, a.contrast),
            saturation: or(&mut cfg.saturation, a.saturation),
            grayscale_prob: or(&mut cfg.grayscale_prob, a.grayscale_prob),
        },
    }
}

fn read_loss_csv(path: &Path) -> Result<Vec<TraceRow>, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::usage(format!("reading {}: {e}", path.display())))?;
    let mut lines = text.lines();
    if lines.next() != Some(LossTrace::CSV_HEADER) {
        return Err(CliError::usage(format!(
            "{} is not a loss trace (expected header `{}`)",
            path.display(),
            LossTrace::CSV_HEADER
        )));
    }
    lines
        .enumerate()
        .map(|(i, line)| {
            let bad =
                || CliError::usage(format!("{} line {}: malformed row", path.display(), i + 2));
            let cells: Vec<&str> = line.split(',').collect();
            if cells.len() != 6 {
                return Err(bad());
            }
            let f = |j: usize| cells[j].parse::<f64>().map_err(|_| bad());
            Ok(TraceRow {
                epoch: cells[0].parse().map_err(|_| bad())?,
                iteration: cells[1].parse().map_err(|_| bad())?,
                contrastive: f(2)?,
                geo: f(3)?,
                total: f(4)?,
                lr: f(5)?,
            })
        })
        .collect()
}

pub fn pretrain(mut cfg: RunConfig) -> Result<(), CliError> {
    let manifest_path = input(&cfg.manifest, "manifest")?;
    let resume_path = cfg
        .resume
        .as_ref()
        .map(|_| input(&cfg.resume, "resume"))
        .transpose()?;
    let resumed = resume_path.as_deref().map(Checkpoint::load).transpose()?;
    let variant = match &resumed {
        Some(ckpt) => ckpt.config.variant,
        None => or(&mut cfg.variant, TrainConfig::default().variant),
    };
    let geo_path = match (variant.uses_geo(), &cfg.geo_model) {
        (true, None) => {
            return Err(CliError::usage(format!(
                "variant {variant} needs a geo-cluster model: pass --geo-model (written by `geossl cluster`)"
            )))
        }
        (true, Some(_)) => Some(input(&cfg.geo_model, "geo_model")?),
        (false, Some(p)) => {
            return Err(CliError::usage(format!(
                "variant {variant} does not use a geo-cluster model, but geo_model = {} was given",
                p.display()
            )))
        }
        (false, None) => None,
    };
    let out = output_dir(&cfg)?;
    let manifest = load_manifest(&manifest_path)?;
    let geo = geo_path.as_deref().map(GeoClusterModel::load).transpose()?;

    let (mut trainer, mut rows) = match resumed {
        Some(mut ckpt) => {
            if let Some(epochs) = cfg.epochs {
                ckpt.config.epochs = epochs;
            }
            let earlier = out.join("loss.csv");
            let rows = if earlier.is_file() {
                read_loss_csv(&earlier)?
                    .into_iter()
                    .filter(|r| r.epoch < ckpt.epoch)
                    .collect()
            } else {
                Vec::new()
            };
            eprintln!("resuming {} from epoch {}", ckpt.config.variant, ckpt.epoch);
            (
                Trainer::from_checkpoint(&manifest, geo.as_ref(), ckpt)?,
                rows,
            )
        }
        None => {
            let tc = train_config(&mut cfg, &manifest, geo.as_ref());
            (Trainer::new(&manifest, geo.as_ref(), tc)?, Vec::new())
        }
    };
    cfg.echo(&out)?;
    if let Some(p) = &geo_path {
        trainer.set_geo_model_path(Some(p.display().to_string()));
    }
    let total = trainer.config().epochs;
    let ckpt_path = out.join("checkpoint.zip");
    while !trainer.is_done() {
        trainer.run_epoch()?;
        trainer.checkpoint().save(&ckpt_path)?;
        let (epoch, mean) = *trainer.trace().epoch_means().last().expect("one epoch ran");
        eprintln!("epoch {}/{total}: mean L_f {mean:.5}", epoch + 1);
    }
    rows.extend(trainer.trace().rows.iter().copied());
    LossTrace { rows }.write_csv(out.join("loss.csv"))?;
    Ok(())
}

/// A fitted frozen probe with its training summary.
#[derive(Debug, Serialize, Deserialize)]
struct ProbeArtifact {
    n_classes: usize,
    feature_dim: usize,
    train_samples: usize,
    train_accuracy: f64,
    iterations: usize,
    final_loss: f64,
    config: ProbeConfig,
    probe: LinearProbe,
}

fn probe_config(cfg: &mut RunConfig, d: ProbeConfig) -> ProbeConfig {
    ProbeConfig {
        max_iter: or(&mut cfg.probe_max_iter, d.max_iter),
        tol: or(&mut cfg.probe_tol, d.tol),
        l2: or(&mut cfg.probe_l2, d.l2),
        standardize: d.standardize,
    }
}

pub fn probe(mut cfg: RunConfig) -> Result<(), CliError> {
    let ckpt_path = input(&cfg.checkpoint, "checkpoint")?;
    let manifest_path = input(&cfg.manifest, "manifest")?;
    let out = output_dir(&cfg)?;
    let d = ProbeConfig::default();
    let pc = ProbeConfig {
        standardize: or(&mut cfg.standardize, d.standardize),
        ..probe_config(&mut cfg, d)
    };
    pc.validate()?;
    cfg.echo(&out)?;

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let n_classes = manifest
        .class_count()
        .filter(|_| manifest.is_labeled())
        .ok_or_else(|| CliError::usage("probe needs a labeled manifest"))?;
    let fs = extract_features(&ckpt, &manifest)?;
    let fit = train_linear_probe(&fs.features, &fs.labels, n_classes, &pc)?;
    eprintln!(
        "probe: train accuracy {:.4} after {} iterations",
        fit.train_accuracy, fit.iterations
    );
    write_json(
        &out.join("probe.json"),
        &ProbeArtifact {
            n_classes,
            feature_dim: fs.features.ncols(),
            train_samples: fs.features.nrows(),
            train_accuracy: fit.train_accuracy,
            iterations: fit.iterations,
            final_loss: fit.final_loss,
            config: pc,
            probe: fit.probe,
        },
    )
}

#[derive(Debug, Serialize)]
struct FinetuneSummary {
    train_accuracy: f64,
    probe_train_accuracy: f64,
    losses: Vec<f64>,
}

pub fn finetune(mut cfg: RunConfig) -> Result<(), CliError> {
    let ckpt_path = input(&cfg.checkpoint, "checkpoint")?;
    let manifest_path = input(&cfg.manifest, "manifest")?;
    let out = output_dir(&cfg)?;
    let d = FinetuneConfig::default();
    let fc = FinetuneConfig {
        epochs: or(&mut cfg.finetune_epochs, d.epochs),
        batch_size: or(&mut cfg.finetune_batch_size, d.batch_size),
        lr: or(&mut cfg.finetune_lr, d.lr),
        momentum: or(&mut cfg.finetune_momentum, d.momentum),
        weight_decay: or(&mut cfg.finetune_weight_decay, d.weight_decay),
        seed: or(&mut cfg.seed, d.seed),
        probe: probe_config(&mut cfg, d.probe.clone()),
    };
    cfg.echo(&out)?;

    let ckpt = Checkpoint::load(&ckpt_path)?;
    let manifest = load_manifest(&manifest_path)?;
    let outcome = finetune_model(&ckpt, &manifest, &fc)?;
    outcome.model.save(out.join("finetuned.zip"))?;
    let mut csv = String::from("epoch,loss\n");
    for (epoch, loss) in outcome.losses.iter().enumerate() {
        csv.push_str(&format!("{epoch},{loss}\n"));
    }
    write_text(&out.join("finetune_loss.csv"), &csv)?;
    eprintln!(
        "finetune: train accuracy {:.4} (probe init {:.4})",
        outcome.train_accuracy, outcome.probe_train_accuracy
    );
    write_json(
        &out.join("finetune.json"),
        &FinetuneSummary {
            train_accuracy: outcome.train_accuracy,
            probe_train_accuracy: outcome.probe_train_accuracy,
            losses: outcome.losses,
        },
    )
}

#[derive(Debug, Serialize)]
struct EvalOutput {
    single: EvalReport,
    #[serde(skip_serializing_if = "Option::is_none")]
    temporal: Option<EvalReport>,
}

fn single_csv(single: &EvalReport) -> String {
    let mut out = String::from("class,single_accuracy\n");
    for (c, acc) in &single.metrics.per_class_accuracy {
        out.push_str(&format!("{c},{acc}\n"));
    }
    out
}

pub fn eval(mut cfg: RunConfig) -> Result<(), CliError> {
    let manifest_path = input(&cfg.manifest, "manifest")?;
    let frozen = match (&cfg.finetuned, &cfg.checkpoint, &cfg.probe) {
        (Some(_), None, None) => None,
        (None, Some(_), Some(_)) => Some((
            input(&cfg.checkpoint, "checkpoint")?,
            input(&cfg.probe, "probe")?,
        )),
        (Some(_), _, _) => {
            return Err(CliError::usage(
                "give either --finetuned or --checkpoint with --probe, not both",
            ))
        }
        _ => {
            return Err(CliError::usage(
                "eval needs --checkpoint and --probe (frozen protocol) or --finetuned",
            ))
        }
    };
    let finetuned_path = cfg
        .finetuned
        .as_ref()
        .map(|_| input(&cfg.finetuned, "finetuned"))
        .transpose()?;
    let out = output_dir(&cfg)?;
    let granularity = or(&mut cfg.granularity, Granularity::Temporal);
    let rule = or(&mut cfg.temporal_rule, TemporalRule::default());
    cfg.echo(&out)?;

    let manifest = load_manifest(&manifest_path)?;
    let (single, temporal) = match (frozen, finetuned_path) {
        (Some((ckpt_path, probe_path)), _) => {
            let ckpt = Checkpoint::load(&ckpt_path)?;
            let artifact: ProbeArtifact = read_json(&probe_path)?;
            let dim = ckpt.config.encoder.feature_dim();
            if dim != artifact.feature_dim {
                return Err(CliError::usage(format!(
                    "probe was fitted on {}-dim features but the checkpoint produces {dim}",
                    artifact.feature_dim
                )));
            }
            let fs = extract_features(&ckpt, &manifest)?;
            let probs = artifact.probe.predict_proba(&fs.features)?;
            reports(Protocol::FrozenProbe, &probs, &fs, artifact.n_classes, rule)?
        }
        (None, Some(path)) => {
            let model = FinetunedModel::load(&path)?;
            evaluate_finetuned(&model, &manifest, rule)?
        }
        (None, None) => unreachable!("protocol checked above"),
    };
    let csv = match granularity {
        Granularity::Single => single_csv(&single),
        Granularity::Temporal => geossl::eval::per_class_csv(&single, &temporal),
    };
    eprintln!("single top-1 {:.4}", single.metrics.top1);
    if granularity == Granularity::Temporal {
        eprintln!("temporal top-1 {:.4}", temporal.metrics.top1);
    }
    let report = EvalOutput {
        single,
        temporal: (granularity == Granularity::Temporal).then_some(temporal),
    };
    write_json(&out.join("eval_report.json"), &report)?;
    write_text(&out.join("per_class.csv"), &csv)
}

#[derive(Debug, Serialize)]
struct DatasetStats {
    n_areas: usize,
    n_samples: usize,
    n_classes: Option<usize>,
    height: usize,
    width: usize,
    channels: usize,
    /// Views per area → number of areas.
    views_per_area: BTreeMap<usize, usize>,
    /// Class → number of areas.
    #[serde(skip_serializing_if = "Option::is_none")]
    areas_per_class: Option<BTreeMap<usize, usize>>,
}

#[derive(Debug, Serialize)]
struct ClusterSummary {
    k: usize,
    inertia: f64,
    /// Clusters spanned by a class → number of classes.
    clusters_per_label_histogram: BTreeMap<usize, usize>,
    /// Classes inside a cluster → number of clusters.
    labels_per_cluster_histogram: BTreeMap<usize, usize>,
    stats: ClusterStats,
}

#[derive(Debug, Serialize)]
struct LossSummary {
    iterations: usize,
    epoch_means: Vec<(usize, f64)>,
}

#[derive(Debug, Serialize)]
struct Report {
    dataset: DatasetStats,
    #[serde(skip_serializing_if = "Option::is_none")]
    clusters: Option<ClusterSummary>,
    #[serde(skip_serializing_if = "Option::is_none")]
    loss: Option<LossSummary>,
    plots: Vec<String>,
}

fn histogram(values: impl Iterator<Item = usize>) -> BTreeMap<usize, usize> {
    let mut h = BTreeMap::new();
    for v in values {
        *h.entry(v).or_insert(0) += 1;
    }
    h
}

fn pairs(h: &BTreeMap<usize, usize>) -> Vec<(usize, usize)> {
    h.iter().map(|(&k, &v)| (k, v)).collect()
}

pub fn report(cfg: RunConfig) -> Result<(), CliError> {
    let manifest_path = input(&cfg.manifest, "manifest")?;
    let geo_path = cfg
        .geo_model
        .as_ref()
        .map(|_| input(&cfg.geo_model, "geo_model"))
        .transpose()?;
    let loss_path = cfg
        .loss_csv
        .as_ref()
        .map(|_| input(&cfg.loss_csv, "loss_csv"))
        .transpose()?;
    let out = output_dir(&cfg)?;
    cfg.echo(&out)?;

    let manifest = load_manifest(&manifest_path)?;
    let mut plots = Vec::new();
    let views_per_area = histogram(manifest.areas.iter().map(|a| a.n_views()));
    plot::bars(
        &out.join("views_per_area.svg"),
        "Images per area",
        "images per area",
        "areas",
        &pairs(&views_per_area),
    )?;
    plots.push("views_per_area.svg".to_string());
    let labeled = manifest.is_labeled();
    let dataset = DatasetStats {
        n_areas: manifest.areas.len(),
        n_samples: manifest.n_samples(),
        n_classes: manifest.class_count(),
        height: manifest.geometry.h,
        width: manifest.geometry.w,
        channels: manifest.geometry.ch,
        views_per_area,
        areas_per_class: labeled.then(|| histogram(manifest.areas.iter().filter_map(|a| a.label))),
    };

    let clusters = match geo_path {
        Some(path) if labeled => {
            let model = GeoClusterModel::load(&path)?;
            let stats = cluster_stats(&manifest, &model)?;
            let cpl = histogram(stats.clusters_per_label.values().copied());
            let lpc = histogram(stats.labels_per_cluster.values().copied());
            plot::bars(
                &out.join("clusters_per_label.svg"),
                "Geo-clusters spanned by each class",
                "clusters per class",
                "classes",
                &pairs(&cpl),
            )?;
            plot::bars(
                &out.join("labels_per_cluster.svg"),
                "Classes inside each geo-cluster",
                "classes per cluster",
                "clusters",
                &pairs(&lpc),
            )?;
            plots.push("clusters_per_label.svg".to_string());
            plots.push("labels_per_cluster.svg".to_string());
            Some(ClusterSummary {
                k: model.k,
                inertia: model.inertia,
                clusters_per_label_histogram: cpl,
                labels_per_cluster_histogram: lpc,
                stats,
            })
        }
        Some(_) => {
            eprintln!("manifest is unlabeled; skipping cluster/label histograms");
            None
        }
        None => None,
    };

    let loss = match loss_path {
        Some(path) => {
            let trace = LossTrace {
                rows: read_loss_csv(&path)?,
            };
            if trace.rows.is_empty() {
                return Err(CliError::usage(format!("{} has no rows", path.display())));
            }
            let per_iter = trace.rows.len() as f64 / trace.epoch_means().len() as f64;
            let steps: Vec<(f64, f64)> = trace
                .rows
                .iter()
                .enumerate()
                .map(|(i, r)| ((i as f64 + 1.0) / per_iter, r.total))
                .collect();
            let means: Vec<(f64, f64)> = trace
                .epoch_means()
                .iter()
                .map(|&(e, m)| (e as f64 + 1.0, m))
                .collect();
            plot::lines(
                &out.join("loss_curve.svg"),
                "Pretraining loss",
                "epoch",
                "L_f",
                &[("per iteration", steps), ("epoch mean", means)],
            )?;
            plots.push("loss_curve.svg".to_string());
            Some(LossSummary {
                iterations: trace.rows.len(),
                epoch_means: trace.epoch_means(),
            })
        }
        None => None,
    };

    write_json(
        &out.join("report.json"),
        &Report {
            dataset,
            clusters,
            loss,
            plots,
        },
    )
}

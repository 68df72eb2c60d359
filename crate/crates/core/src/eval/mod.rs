//! Frozen linear probe, end-to-end finetuning, temporal aggregation and
//! classification metrics.

mod metrics;
mod probe;

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use ndarray::{concatenate, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use metrics::{
    argmax, check_simplex, classify_temporal, metrics, metrics_from_predictions, per_class_csv,
    softmax_rows, top_k_accuracy, EvalReport, Granularity, Metrics, Protocol, TemporalPredictions,
    TemporalRule,
};
pub use probe::{train_linear_probe, LinearProbe, ProbeConfig, ProbeFit};

use crate::archive::{in_file, ArchiveReader, ArchiveWriter};
use crate::data::DatasetManifest;
use crate::error::{Error, Result};
use crate::geocluster::GeoClusterModel;
use crate::loss::{classifier_gradients, classifier_objective};
use crate::model::{
    geo_logits, images_to_matrix, Dense, Encoder, EncoderConfig, EncoderParams, FeatureSource,
};
use crate::trainer::{sgd_step, Checkpoint};

const ENCODE_CHUNK: usize = 256;

/// One feature row per view, grouped by area.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSet {
    pub features: Array2<f64>,
    pub labels: Vec<usize>,
    /// Position of each row's area in the manifest.
    pub area_index: Vec<usize>,
}

impl FeatureSet {
    /// Label of each area, in manifest order.
    pub fn area_labels(&self) -> Vec<usize> {
        let mut out: Vec<(usize, usize)> = Vec::new();
        for (&a, &y) in self.area_index.iter().zip(&self.labels) {
            if out.last().is_none_or(|&(prev, _)| prev != a) {
                out.push((a, y));
            }
        }
        out.into_iter().map(|(_, y)| y).collect()
    }
}

fn encode_views(
    params: &EncoderParams,
    manifest: &DatasetManifest,
    source: FeatureSource,
) -> Result<Array2<f64>> {
    let views: Vec<_> = manifest
        .areas
        .iter()
        .flat_map(|a| a.views.iter().map(|v| &v.image))
        .collect();
    if views.is_empty() {
        return Err(Error::Validation("manifest has no images".into()));
    }
    let mut blocks = Vec::new();
    for chunk in views.chunks(ENCODE_CHUNK) {
        let x = images_to_matrix(chunk.iter().copied(), manifest.geometry)?;
        let trace = Encoder::forward(params, &x)?;
        blocks.push(trace.source(source).clone());
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    Ok(concatenate(Axis(0), &views).expect("equal widths"))
}

fn labeled_rows(manifest: &DatasetManifest) -> Result<(Vec<usize>, Vec<usize>)> {
    if !manifest.is_labeled() {
        return Err(Error::Validation(
            "evaluation needs a labeled manifest".into(),
        ));
    }
    let mut labels = Vec::with_capacity(manifest.n_samples());
    let mut area_index = Vec::with_capacity(manifest.n_samples());
    for (i, a) in manifest.areas.iter().enumerate() {
        for _ in &a.views {
            labels.push(a.label.expect("labeled"));
            area_index.push(i);
        }
    }
    Ok((labels, area_index))
}

/// Un-augmented features of every view from the query encoder.
pub fn extract_features_from(
    params: &EncoderParams,
    manifest: &DatasetManifest,
    source: FeatureSource,
) -> Result<FeatureSet> {
    let (labels, area_index) = labeled_rows(manifest)?;
    Ok(FeatureSet {
        features: encode_views(params, manifest, source)?,
        labels,
        area_index,
    })
}

/// Backbone (pre-projection) features of the checkpoint's query encoder.
pub fn extract_features(ckpt: &Checkpoint, manifest: &DatasetManifest) -> Result<FeatureSet> {
    extract_features_from(&ckpt.state.query, manifest, FeatureSource::Backbone)
}

fn n_classes_of(manifests: &[&DatasetManifest]) -> Result<usize> {
    manifests
        .iter()
        .filter_map(|m| m.class_count())
        .max()
        .ok_or_else(|| Error::Validation("evaluation needs a labeled manifest".into()))
}

/// Single-view and temporal-aggregated reports from per-view distributions.
pub fn reports(
    protocol: Protocol,
    probs: &Array2<f64>,
    fs: &FeatureSet,
    n_classes: usize,
    rule: TemporalRule,
) -> Result<(EvalReport, EvalReport)> {
    let single = EvalReport {
        protocol,
        granularity: Granularity::Single,
        n_classes,
        metrics: metrics(probs, &fs.labels, n_classes)?,
    };
    let temporal = classify_temporal(probs, &fs.area_index, rule)?;
    let area_labels = fs.area_labels();
    let mut m = metrics_from_predictions(&temporal.predictions, &area_labels, n_classes)?;
    if n_classes > 5 {
        m.top5 = Some(top_k_accuracy(&temporal.probabilities, &area_labels, 5)?);
    }
    let temporal = EvalReport {
        protocol,
        granularity: Granularity::Temporal,
        n_classes,
        metrics: m,
    };
    Ok((single, temporal))
}

#[derive(Debug, Clone)]
pub struct ProbeEvaluation {
    pub fit: ProbeFit,
    pub single: EvalReport,
    pub temporal: EvalReport,
}

/// Fit a probe on frozen features of `train` and score it on `test`.
pub fn evaluate_frozen(
    ckpt: &Checkpoint,
    train: &DatasetManifest,
    test: &DatasetManifest,
    cfg: &ProbeConfig,
    rule: TemporalRule,
) -> Result<ProbeEvaluation> {
    let n_classes = n_classes_of(&[train, test])?;
    let train_fs = extract_features(ckpt, train)?;
    let fit = train_linear_probe(&train_fs.features, &train_fs.labels, n_classes, cfg)?;
    let test_fs = extract_features(ckpt, test)?;
    let probs = fit.probe.predict_proba(&test_fs.features)?;
    let (single, temporal) = reports(Protocol::FrozenProbe, &probs, &test_fs, n_classes, rule)?;
    Ok(ProbeEvaluation {
        fit,
        single,
        temporal,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FinetuneConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Probe fitted on frozen features to initialize the head. Unscaled by
    /// default: dividing by small feature deviations inflates the head weights
    /// and with them the backbone gradients.
    pub probe: ProbeConfig,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            epochs: 10,
            batch_size: 64,
            lr: 0.01,
            momentum: 0.9,
            weight_decay: 0.0,
            seed: 0,
            probe: ProbeConfig {
                standardize: false,
                ..ProbeConfig::default()
            },
        }
    }
}

pub const FINETUNED_VERSION: u32 = 1;

/// Encoder and linear head trained jointly on class labels.
#[derive(Debug, Clone, PartialEq)]
pub struct FinetunedModel {
    pub config: EncoderConfig,
    pub encoder: EncoderParams,
    pub head: Dense,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FinetunedMetadata {
    format_version: u32,
    encoder: EncoderConfig,
    n_classes: usize,
}

impl FinetunedModel {
    /// Zip archive of `.npy` arrays plus `metadata.json`, like a checkpoint.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| in_file(e, path))
    }

    pub fn write_to<W: Write + Seek>(&self, writer: W) -> Result<()> {
        let mut out = ArchiveWriter::new(writer);
        out.json(
            "metadata.json",
            &FinetunedMetadata {
                format_version: FINETUNED_VERSION,
                encoder: self.config.clone(),
                n_classes: self.head.fan_out(),
            },
        )?;
        out.params("encoder", &self.encoder)?;
        out.params("head", &self.head)?;
        out.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| in_file(e, path))
    }

    pub fn read_from<R: Read + Seek>(reader: R) -> Result<Self> {
        let mut archive = ArchiveReader::new(reader)?;
        let meta: FinetunedMetadata = archive.json("metadata.json")?;
        if meta.format_version != FINETUNED_VERSION {
            return Err(Error::Serde(format!(
                "finetuned model format version {} is not supported (expected {FINETUNED_VERSION})",
                meta.format_version
            )));
        }
        let mut encoder =
            EncoderParams::init(&meta.encoder, &mut ChaCha8Rng::seed_from_u64(0))?.zeros_like();
        archive.fill("encoder", &mut encoder)?;
        let mut head = Dense::zeros(meta.encoder.feature_dim(), meta.n_classes);
        archive.fill("head", &mut head)?;
        Ok(Self {
            config: meta.encoder,
            encoder,
            head,
        })
    }

    pub fn predict_proba(&self, manifest: &DatasetManifest) -> Result<Array2<f64>> {
        let features = encode_views(&self.encoder, manifest, FeatureSource::Backbone)?;
        Ok(softmax_rows(&self.head.forward(&features)))
    }
}

#[derive(Debug, Clone)]
pub struct FinetuneOutcome {
    pub model: FinetunedModel,
    /// Mean training loss before training and after each epoch.
    pub losses: Vec<f64>,
    pub train_accuracy: f64,
    /// Training accuracy of the frozen probe that initialized the head.
    pub probe_train_accuracy: f64,
}

/// Finetune backbone and head from the checkpoint, starting from the frozen
/// probe's solution.
pub fn finetune(
    ckpt: &Checkpoint,
    train: &DatasetManifest,
    cfg: &FinetuneConfig,
) -> Result<FinetuneOutcome> {
    if cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::config("finetune batch size and lr must be positive"));
    }
    let n_classes = n_classes_of(&[train])?;
    let fs = extract_features(ckpt, train)?;
    let fit = train_linear_probe(&fs.features, &fs.labels, n_classes, &cfg.probe)?;
    let mut model = FinetunedModel {
        config: ckpt.config.encoder.clone(),
        encoder: ckpt.state.query.clone(),
        head: fit.probe.to_dense(),
    };
    let views: Vec<_> = train
        .areas
        .iter()
        .flat_map(|a| a.views.iter().map(|v| &v.image))
        .collect();
    let x_all = images_to_matrix(views.iter().copied(), train.geometry)?;
    let objective = |m: &FinetunedModel| {
        classifier_objective(
            &m.encoder,
            &m.head,
            &x_all,
            &fs.labels,
            FeatureSource::Backbone,
        )
    };

    let mut losses = vec![objective(&model)?];
    let mut v_enc = model.encoder.zeros_like();
    let mut v_head = model.head.zeros_like();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..x_all.nrows()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = x_all.select(Axis(0), batch);
            let y: Vec<usize> = batch.iter().map(|&i| fs.labels[i]).collect();
            let g =
                classifier_gradients(&model.encoder, &model.head, &x, &y, FeatureSource::Backbone)?;
            sgd_step(
                &mut model.encoder,
                &g.encoder,
                &mut v_enc,
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
            sgd_step(
                &mut model.head,
                &g.head,
                &mut v_head,
                cfg.lr,
                cfg.momentum,
                cfg.weight_decay,
            )?;
        }
        losses.push(objective(&model)?);
    }
    let probs = model.predict_proba(train)?;
    let correct = probs
        .outer_iter()
        .zip(&fs.labels)
        .filter(|(row, &y)| argmax(row.view()) == y)
        .count();
    Ok(FinetuneOutcome {
        model,
        losses,
        train_accuracy: correct as f64 / fs.labels.len() as f64,
        probe_train_accuracy: fit.train_accuracy,
    })
}

/// Score a finetuned model on `test`.
pub fn evaluate_finetuned(
    model: &FinetunedModel,
    test: &DatasetManifest,
    rule: TemporalRule,
) -> Result<(EvalReport, EvalReport)> {
    let (labels, area_index) = labeled_rows(test)?;
    let n_classes = model.head.fan_out();
    let probs = model.predict_proba(test)?;
    let fs = FeatureSet {
        features: Array2::zeros((0, 0)),
        labels,
        area_index,
    };
    reports(Protocol::Finetune, &probs, &fs, n_classes, rule)
}

/// Per-view accuracy of the checkpoint's geo head at predicting the
/// geo-cluster of each view's area.
pub fn geo_head_accuracy(
    ckpt: &Checkpoint,
    manifest: &DatasetManifest,
    geo_model: &GeoClusterModel,
) -> Result<f64> {
    if !ckpt.config.variant.uses_geo() {
        return Err(Error::config(format!(
            "variant {} has no geo head",
            ckpt.config.variant
        )));
    }
    let head = ckpt
        .state
        .geo_head
        .as_ref()
        .expect("geo variants carry a head");
    let features = encode_views(&ckpt.state.query, manifest, ckpt.config.geo_features)?;
    let logits = geo_logits(head, &features)?;
    let targets: Vec<usize> = manifest
        .areas
        .iter()
        .flat_map(|a| std::iter::repeat_n(geo_model.assign(a.lat, a.lon), a.n_views()))
        .collect();
    let hits = logits
        .outer_iter()
        .zip(&targets)
        .filter(|(row, &t)| argmax(row.view()) == t)
        .count();
    Ok(hits as f64 / targets.len() as f64)
}

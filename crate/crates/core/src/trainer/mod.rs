//! Pretraining loop for the contrastive variants and the cross-entropy
//! baselines, plus SGD, the learning-rate schedule and checkpoints.

mod checkpoint;
mod config;
mod optim;

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use checkpoint::{Checkpoint, RngState, CHECKPOINT_VERSION};
pub use config::{Schedule, TrainConfig, Variant};
pub use optim::{learning_rate, sgd_step};

use crate::data::{augment, sample_temporal_pair, DatasetManifest, PairingMode};
use crate::error::{Error, Result};
use crate::geocluster::GeoClusterModel;
use crate::loss::{classifier_gradients, loss_gradients, PretrainBatch};
use crate::model::{
    images_to_matrix, momentum_update, Dense, EncoderParams, FeatureSource, MoCoState, ParamSet,
};
use crate::queue::NegativeQueue;

// Independent ChaCha streams so that adding a geo head does not shift the
// draws that initialize the encoder or drive augmentation.
const STREAM_ENCODER: u64 = 0;
const STREAM_HEAD: u64 = 1;
const STREAM_TRAIN: u64 = 2;

/// Loss values of one optimization step.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub epoch: usize,
    /// Iteration within the epoch.
    pub iteration: usize,
    pub contrastive: f64,
    pub geo: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossTrace {
    pub rows: Vec<TraceRow>,
}

impl LossTrace {
    pub const CSV_HEADER: &'static str = "epoch,iteration,L_contrastive,L_geo,L_f,lr";

    pub fn to_csv(&self) -> String {
        let mut out = String::from(Self::CSV_HEADER);
        out.push('\n');
        for r in &self.rows {
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                r.epoch, r.iteration, r.contrastive, r.geo, r.total, r.lr
            );
        }
        out
    }

    pub fn write_csv(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    /// Mean of `L_f` for each epoch present in the trace, in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut out: Vec<(usize, f64, usize)> = Vec::new();
        for r in &self.rows {
            match out.last_mut() {
                Some((e, sum, n)) if *e == r.epoch => {
                    *sum += r.total;
                    *n += 1;
                }
                _ => out.push((r.epoch, r.total, 1)),
            }
        }
        out.into_iter().map(|(e, s, n)| (e, s / n as f64)).collect()
    }
}

/// Final state and loss trace of a training run.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    pub trace: LossTrace,
}

/// Train from scratch for `cfg.epochs` epochs.
pub fn pretrain(
    manifest: &DatasetManifest,
    geo_model: Option<&GeoClusterModel>,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(manifest, geo_model, cfg.clone())?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// Continue a run from a checkpoint up to its configured epoch count.
pub fn resume(
    manifest: &DatasetManifest,
    geo_model: Option<&GeoClusterModel>,
    checkpoint: Checkpoint,
) -> Result<TrainOutcome> {
    let mut trainer = Trainer::from_checkpoint(manifest, geo_model, checkpoint)?;
    trainer.run()?;
    Ok(trainer.finish())
}

/// Stateful driver of one training run. Epochs are the unit of
/// checkpointing: [`Trainer::checkpoint`] captures everything needed to
/// continue bit-identically.
pub struct Trainer<'a> {
    cfg: TrainConfig,
    manifest: &'a DatasetManifest,
    /// Per-area targets: geo-labels, class labels, or none.
    targets: Option<Vec<usize>>,
    state: MoCoState,
    velocity: EncoderParams,
    head_velocity: Option<Dense>,
    rng: ChaCha8Rng,
    epoch: usize,
    trace: LossTrace,
    geo_model_path: Option<String>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        manifest: &'a DatasetManifest,
        geo_model: Option<&GeoClusterModel>,
        cfg: TrainConfig,
    ) -> Result<Self> {
        cfg.validate()?;
        let targets = targets_for(manifest, geo_model, &cfg)?;
        let mut enc_rng = rng_stream(cfg.seed, STREAM_ENCODER);
        let mut head_rng = rng_stream(cfg.seed, STREAM_HEAD);
        let query = EncoderParams::init(&cfg.encoder, &mut enc_rng)?;
        let geo_head =
            head_shape(&cfg, manifest).map(|(fan_in, k)| Dense::init(fan_in, k, &mut head_rng));
        let state = MoCoState {
            key: query.clone(),
            query,
            geo_head,
            queue: NegativeQueue::new(cfg.queue_size.max(1), cfg.encoder.embed_dim)?,
            step: 0,
        };
        Ok(Self {
            velocity: state.query.zeros_like(),
            head_velocity: state.geo_head.as_ref().map(Dense::zeros_like),
            state,
            targets,
            manifest,
            rng: rng_stream(cfg.seed, STREAM_TRAIN),
            epoch: 0,
            trace: LossTrace::default(),
            geo_model_path: None,
            cfg,
        })
    }

    pub fn from_checkpoint(
        manifest: &'a DatasetManifest,
        geo_model: Option<&GeoClusterModel>,
        ckpt: Checkpoint,
    ) -> Result<Self> {
        ckpt.config.validate()?;
        let targets = targets_for(manifest, geo_model, &ckpt.config)?;
        let expected = head_shape(&ckpt.config, manifest);
        let found = ckpt
            .state
            .geo_head
            .as_ref()
            .map(|h| (h.fan_in(), h.fan_out()));
        if expected != found {
            return Err(Error::Validation(format!(
                "checkpoint head has shape {found:?}, the configuration needs {expected:?}"
            )));
        }
        Ok(Self {
            rng: ckpt.rng_state.restore()?,
            cfg: ckpt.config,
            manifest,
            targets,
            state: ckpt.state,
            velocity: ckpt.velocity,
            head_velocity: ckpt.head_velocity,
            epoch: ckpt.epoch,
            trace: LossTrace::default(),
            geo_model_path: ckpt.geo_cluster_model_path,
        })
    }

    /// Record where the geo-cluster model lives; stored in checkpoints.
    pub fn set_geo_model_path(&mut self, path: Option<String>) {
        self.geo_model_path = path;
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn state(&self) -> &MoCoState {
        &self.state
    }

    /// Number of completed epochs.
    pub fn epoch(&self) -> usize {
        self.epoch
    }

    pub fn trace(&self) -> &LossTrace {
        &self.trace
    }

    pub fn is_done(&self) -> bool {
        self.epoch >= self.cfg.epochs
    }

    pub fn run(&mut self) -> Result<()> {
        while !self.is_done() {
            self.run_epoch()?;
        }
        Ok(())
    }

    pub fn run_epoch(&mut self) -> Result<()> {
        self.run_epoch_with(|_, _| {})
    }

    /// Run one epoch, calling `observer` with the state after every step.
    pub fn run_epoch_with(
        &mut self,
        mut observer: impl FnMut(&MoCoState, &TraceRow),
    ) -> Result<()> {
        if self.is_done() {
            return Err(Error::config(format!(
                "all {} epochs already completed",
                self.cfg.epochs
            )));
        }
        let lr = learning_rate(
            self.cfg.schedule,
            self.cfg.lr,
            self.cfg.lr_floor,
            self.epoch,
            self.cfg.epochs,
        );
        let mut order: Vec<usize> = (0..self.manifest.areas.len()).collect();
        order.shuffle(&mut self.rng);
        for (iteration, batch) in order.chunks_exact(self.cfg.batch_size).enumerate() {
            let (contrastive, geo, total) = if self.cfg.variant.is_contrastive() {
                self.contrastive_step(batch, lr)?
            } else {
                self.classifier_step(batch, lr)?
            };
            self.state.step += 1;
            let row = TraceRow {
                epoch: self.epoch,
                iteration,
                contrastive,
                geo,
                total,
                lr,
            };
            self.trace.rows.push(row);
            observer(&self.state, &row);
        }
        self.epoch += 1;
        Ok(())
    }

    fn contrastive_step(&mut self, batch: &[usize], lr: f64) -> Result<(f64, f64, f64)> {
        let mode = self.cfg.variant.pairing();
        let mut query_views = Vec::with_capacity(batch.len());
        let mut key_views = Vec::with_capacity(batch.len());
        for &a in batch {
            let area = &self.manifest.areas[a];
            let (t1, t2) = sample_temporal_pair(area, &mut self.rng, mode);
            query_views.push(augment(
                &area.view(t1).image,
                &self.cfg.augment,
                &mut self.rng,
            ));
            key_views.push(augment(
                &area.view(t2).image,
                &self.cfg.augment,
                &mut self.rng,
            ));
        }
        let geometry = self.cfg.encoder.geometry;
        let pb = PretrainBatch {
            query: images_to_matrix(&query_views, geometry)?,
            key: images_to_matrix(&key_views, geometry)?,
            geo_labels: self
                .targets
                .as_ref()
                .map(|t| batch.iter().map(|&a| t[a]).collect()),
        };
        let grads = loss_gradients(&self.state, &pb, &self.cfg.loss_config())?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        sgd_step(
            &mut self.state.query,
            &grads.query,
            &mut self.velocity,
            lr,
            mu,
            wd,
        )?;
        if let (Some(head), Some(g), Some(v)) = (
            &mut self.state.geo_head,
            &grads.geo_head,
            &mut self.head_velocity,
        ) {
            sgd_step(head, g, v, lr, mu, wd)?;
        }
        momentum_update(
            &mut self.state.key,
            &self.state.query,
            self.cfg.ema_momentum,
        )?;
        self.state.queue.enqueue_batch(grads.keys.view())?;
        Ok((grads.contrastive, grads.geo, grads.total))
    }

    fn classifier_step(&mut self, batch: &[usize], lr: f64) -> Result<(f64, f64, f64)> {
        let mut views = Vec::with_capacity(batch.len());
        for &a in batch {
            let area = &self.manifest.areas[a];
            let (t, _) = sample_temporal_pair(area, &mut self.rng, PairingMode::SameView);
            views.push(augment(
                &area.view(t).image,
                &self.cfg.augment,
                &mut self.rng,
            ));
        }
        let x = images_to_matrix(&views, self.cfg.encoder.geometry)?;
        let targets = self
            .targets
            .as_ref()
            .expect("classifier variants carry targets");
        let labels: Vec<usize> = batch.iter().map(|&a| targets[a]).collect();
        let head = self
            .state
            .geo_head
            .as_mut()
            .expect("classifier variants carry a head");
        let g = classifier_gradients(
            &self.state.query,
            head,
            &x,
            &labels,
            classifier_source(&self.cfg),
        )?;
        let (mu, wd) = (self.cfg.momentum, self.cfg.weight_decay);
        sgd_step(
            &mut self.state.query,
            &g.encoder,
            &mut self.velocity,
            lr,
            mu,
            wd,
        )?;
        sgd_step(
            head,
            &g.head,
            self.head_velocity.as_mut().expect("head velocity"),
            lr,
            mu,
            wd,
        )?;
        // The baselines have no key encoder; keep it mirroring the query.
        self.state.key.clone_from(&self.state.query);
        Ok(match self.cfg.variant {
            Variant::GeoOnly => (0.0, g.loss, g.loss),
            _ => (0.0, 0.0, g.loss),
        })
    }

    /// Snapshot of the run at the current epoch boundary.
    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            epoch: self.epoch,
            config: self.cfg.clone(),
            state: self.state.clone(),
            velocity: self.velocity.clone(),
            head_velocity: self.head_velocity.clone(),
            rng_state: RngState::capture(&self.rng),
            geo_cluster_model_path: self.geo_model_path.clone(),
        }
    }

    pub fn finish(self) -> TrainOutcome {
        TrainOutcome {
            checkpoint: self.checkpoint(),
            trace: self.trace,
        }
    }
}

fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Feature source feeding the classifier of the cross-entropy baselines.
fn classifier_source(cfg: &TrainConfig) -> FeatureSource {
    match cfg.variant {
        Variant::Supervised => FeatureSource::Backbone,
        _ => cfg.geo_features,
    }
}

/// `(fan_in, fan_out)` of the head a configuration trains, if any.
fn head_shape(cfg: &TrainConfig, manifest: &DatasetManifest) -> Option<(usize, usize)> {
    match cfg.variant {
        Variant::Supervised => Some((
            cfg.encoder.source_dim(FeatureSource::Backbone),
            manifest.class_count().unwrap_or(0),
        )),
        v if v.uses_geo() => Some((
            cfg.encoder.source_dim(classifier_source(cfg)),
            cfg.n_clusters,
        )),
        _ => None,
    }
}

fn targets_for(
    manifest: &DatasetManifest,
    geo_model: Option<&GeoClusterModel>,
    cfg: &TrainConfig,
) -> Result<Option<Vec<usize>>> {
    if manifest.areas.len() < cfg.batch_size {
        return Err(Error::config(format!(
            "{} areas cannot fill a batch of {}",
            manifest.areas.len(),
            cfg.batch_size
        )));
    }
    if manifest.geometry != cfg.encoder.geometry {
        return Err(Error::config(format!(
            "manifest geometry {:?} differs from encoder geometry {:?}",
            manifest.geometry.shape(),
            cfg.encoder.geometry.shape()
        )));
    }
    let variant = cfg.variant;
    match (variant.uses_geo(), geo_model) {
        (true, None) => Err(Error::config(format!(
            "variant {variant} requires a geo-cluster model"
        ))),
        (false, Some(_)) => Err(Error::config(format!(
            "variant {variant} does not use a geo-cluster model"
        ))),
        (true, Some(model)) => {
            if model.k != cfg.n_clusters {
                return Err(Error::config(format!(
                    "geo-cluster model has K = {}, configuration has K = {}",
                    model.k, cfg.n_clusters
                )));
            }
            Ok(Some(model.assign_manifest(manifest)))
        }
        (false, None) if variant == Variant::Supervised => {
            if !manifest.is_labeled() {
                return Err(Error::Validation(
                    "supervised training needs a labeled manifest".into(),
                ));
            }
            Ok(Some(
                manifest
                    .areas
                    .iter()
                    .map(|a| a.label.expect("labeled"))
                    .collect(),
            ))
        }
        (false, None) => Ok(None),
    }
}

/// Flattened query-encoder parameters, for trajectory comparisons.
pub fn flatten_params<P: ParamSet>(params: &P) -> Vec<f64> {
    params
        .arrays()
        .iter()
        .flat_map(|(_, a)| a.iter().copied().collect::<Vec<_>>())
        .collect()
}

/// Largest absolute elementwise difference between two parameter sets of the
/// same architecture.
pub fn max_abs_diff<P: ParamSet>(a: &P, b: &P) -> f64 {
    flatten_params(a)
        .iter()
        .zip(flatten_params(b))
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

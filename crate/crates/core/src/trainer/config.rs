use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{AugmentConfig, PairingMode};
use crate::error::{Error, Result};
use crate::loss::LossConfig;
use crate::model::{EncoderConfig, FeatureSource};

/// Pretraining objective.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "moco")]
    Moco,
    #[serde(rename = "moco+geo")]
    MocoGeo,
    #[serde(rename = "moco+tp")]
    MocoTp,
    #[serde(rename = "moco+geo+tp")]
    MocoGeoTp,
    /// Cross-entropy on geo-labels only; no key encoder, no queue.
    #[serde(rename = "geo-only")]
    GeoOnly,
    /// Cross-entropy on class labels.
    #[serde(rename = "supervised")]
    Supervised,
}

impl Variant {
    pub const ALL: [Variant; 6] = [
        Variant::Moco,
        Variant::MocoGeo,
        Variant::MocoTp,
        Variant::MocoGeoTp,
        Variant::GeoOnly,
        Variant::Supervised,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Moco => "moco",
            Variant::MocoGeo => "moco+geo",
            Variant::MocoTp => "moco+tp",
            Variant::MocoGeoTp => "moco+geo+tp",
            Variant::GeoOnly => "geo-only",
            Variant::Supervised => "supervised",
        }
    }

    /// Contrastive variants use the key encoder and the negative queue.
    pub fn is_contrastive(self) -> bool {
        matches!(
            self,
            Variant::Moco | Variant::MocoGeo | Variant::MocoTp | Variant::MocoGeoTp
        )
    }

    /// Variants that need a geo-cluster model.
    pub fn uses_geo(self) -> bool {
        matches!(
            self,
            Variant::MocoGeo | Variant::MocoGeoTp | Variant::GeoOnly
        )
    }

    pub fn pairing(self) -> PairingMode {
        match self {
            Variant::MocoTp | Variant::MocoGeoTp => PairingMode::Temporal,
            _ => PairingMode::SameView,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Variant::ALL
            .into_iter()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| {
                let names: Vec<_> = Variant::ALL.iter().map(|v| v.as_str()).collect();
                Error::config(format!(
                    "unknown variant `{s}` (expected one of {})",
                    names.join(", ")
                ))
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Schedule {
    Constant,
    /// Half-cosine from `lr` at the first epoch to `lr_floor` at the last.
    Cosine,
}

impl FromStr for Schedule {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "constant" => Ok(Schedule::Constant),
            "cosine" => Ok(Schedule::Cosine),
            other => Err(Error::config(format!(
                "unknown schedule `{other}` (expected constant or cosine)"
            ))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub variant: Variant,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final learning rate of the cosine schedule.
    pub lr_floor: f64,
    pub schedule: Schedule,
    /// SGD momentum.
    pub momentum: f64,
    pub weight_decay: f64,
    /// InfoNCE temperature `λ`.
    pub temperature: f64,
    pub alpha: f64,
    pub beta: f64,
    /// EMA coefficient `m` of the key encoder.
    pub ema_momentum: f64,
    /// Negative queue capacity `N`.
    pub queue_size: usize,
    /// Number of geo-clusters `K`.
    pub n_clusters: usize,
    pub geo_features: FeatureSource,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub augment: AugmentConfig,
}

impl Default for TrainConfig {
    /// Desk-scale defaults: small batch and queue, 20 epochs.
    fn default() -> Self {
        Self {
            variant: Variant::MocoGeoTp,
            epochs: 20,
            batch_size: 64,
            lr: 0.05,
            lr_floor: 0.0,
            schedule: Schedule::Cosine,
            momentum: 0.9,
            weight_decay: 1e-4,
            temperature: 0.2,
            alpha: 1.0,
            beta: 1.0,
            ema_momentum: 0.999,
            queue_size: 1024,
            n_clusters: 100,
            geo_features: FeatureSource::Projection,
            seed: 0,
            encoder: EncoderConfig::default(),
            augment: AugmentConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Hyper-parameters reported for full-scale pretraining (ResNet-scale
    /// runs): lr 1e-3, batch 256, queue 65536, temperature 0.2, K = 100,
    /// alpha = beta = 1, 200 epochs.
    pub fn full_scale() -> Self {
        Self {
            epochs: 200,
            batch_size: 256,
            lr: 1e-3,
            queue_size: 65536,
            temperature: 0.2,
            n_clusters: 100,
            alpha: 1.0,
            beta: 1.0,
            ema_momentum: 0.999,
            ..Self::default()
        }
    }

    pub fn loss_config(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            alpha: self.alpha,
            beta: if self.variant.uses_geo() {
                self.beta
            } else {
                0.0
            },
            n_clusters: self.n_clusters,
            geo_features: self.geo_features,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::config("epochs and batch_size must be positive"));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::config("learning rate must be positive"));
        }
        if !(self.lr_floor >= 0.0 && self.lr_floor <= self.lr) {
            return Err(Error::config("lr_floor must lie in [0, lr]"));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("SGD momentum must lie in [0, 1)"));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::config("weight decay must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("EMA momentum must lie in [0, 1]"));
        }
        if self.variant.is_contrastive() {
            if self.queue_size < self.batch_size {
                return Err(Error::config(format!(
                    "queue size {} is smaller than batch size {}",
                    self.queue_size, self.batch_size
                )));
            }
            self.loss_config().validate()?;
        }
        if self.variant.uses_geo() && self.n_clusters == 0 {
            return Err(Error::config("K must be at least 1"));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::config("temperature must be positive"));
        }
        self.encoder.validate()?;
        self.augment.validate()
    }
}

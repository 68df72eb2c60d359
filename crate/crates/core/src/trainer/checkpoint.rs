use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Seek, Write};
use std::path::Path;

use ndarray::{Array2, ArrayViewD, Ix2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::config::{TrainConfig, Variant};
use crate::archive::{in_file, ArchiveReader, ArchiveWriter};
use crate::error::{Error, Result};
use crate::model::{Dense, EncoderParams, MoCoState, ParamSet};
use crate::queue::NegativeQueue;

pub const CHECKPOINT_VERSION: u32 = 1;

const METADATA: &str = "metadata.json";

/// Exact position of a ChaCha8 generator.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    /// 32-byte key, hex encoded.
    pub seed: String,
    pub stream: u64,
    /// Word position, decimal (it is a 128-bit counter).
    pub word_pos: String,
}

impl RngState {
    pub fn capture(rng: &ChaCha8Rng) -> Self {
        Self {
            seed: rng.get_seed().iter().map(|b| format!("{b:02x}")).collect(),
            stream: rng.get_stream(),
            word_pos: rng.get_word_pos().to_string(),
        }
    }

    pub fn restore(&self) -> Result<ChaCha8Rng> {
        let bad = || Error::Serde(format!("malformed rng state {self:?}"));
        if self.seed.len() != 64 || !self.seed.is_ascii() {
            return Err(bad());
        }
        let mut seed = [0u8; 32];
        for (i, byte) in seed.iter_mut().enumerate() {
            *byte = u8::from_str_radix(&self.seed[2 * i..2 * i + 2], 16).map_err(|_| bad())?;
        }
        let word_pos: u128 = self.word_pos.parse().map_err(|_| bad())?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(self.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Everything needed to evaluate a trained encoder or to continue training.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    /// Completed epochs.
    pub epoch: usize,
    pub config: TrainConfig,
    pub state: MoCoState,
    /// SGD velocity of the query encoder.
    pub velocity: EncoderParams,
    /// SGD velocity of the head, when one is trained.
    pub head_velocity: Option<Dense>,
    pub rng_state: RngState,
    pub geo_cluster_model_path: Option<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Metadata {
    format_version: u32,
    variant: Variant,
    epoch: usize,
    step: u64,
    config: TrainConfig,
    rng_state: RngState,
    geo_cluster_model_path: Option<String>,
    queue_capacity: usize,
    has_head: bool,
    arrays: Vec<String>,
}

impl Checkpoint {
    pub fn variant(&self) -> Variant {
        self.config.variant
    }

    /// Write a zip archive of `.npy` arrays plus `metadata.json`.
    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_to(BufWriter::new(file))
            .map_err(|e| in_file(e, path))
    }

    pub fn write_to<W: Write + Seek>(&self, writer: W) -> Result<()> {
        let mut entries = prefixed("theta_q", self.state.query.arrays());
        entries.extend(prefixed("theta_k", self.state.key.arrays()));
        entries.extend(prefixed("velocity_q", self.velocity.arrays()));
        if let Some(h) = &self.state.geo_head {
            entries.extend(prefixed("theta_c", h.arrays()));
        }
        if let Some(h) = &self.head_velocity {
            entries.extend(prefixed("velocity_c", h.arrays()));
        }
        let mut arrays: Vec<String> = entries.iter().map(|(n, _)| n.clone()).collect();
        arrays.push("queue".into());
        let (queue, capacity) = self.state.queue.to_parts();
        let meta = Metadata {
            format_version: CHECKPOINT_VERSION,
            variant: self.config.variant,
            epoch: self.epoch,
            step: self.state.step,
            config: self.config.clone(),
            rng_state: self.rng_state.clone(),
            geo_cluster_model_path: self.geo_cluster_model_path.clone(),
            queue_capacity: capacity,
            has_head: self.state.geo_head.is_some(),
            arrays,
        };
        let mut out = ArchiveWriter::new(writer);
        out.json(METADATA, &meta)?;
        for (name, a) in entries {
            out.array(&name, a)?;
        }
        out.array("queue", queue.view().into_dyn())?;
        out.finish()
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_from(BufReader::new(file)).map_err(|e| in_file(e, path))
    }

    pub fn read_from<R: Read + Seek>(reader: R) -> Result<Self> {
        let mut archive = ArchiveReader::new(reader)?;
        let meta: Metadata = archive.json(METADATA)?;
        if meta.format_version != CHECKPOINT_VERSION {
            return Err(Error::Serde(format!(
                "checkpoint format version {} is not supported (expected {CHECKPOINT_VERSION})",
                meta.format_version
            )));
        }
        if meta.variant != meta.config.variant {
            return Err(Error::Serde(
                "metadata variant disagrees with its config".into(),
            ));
        }
        let template =
            EncoderParams::init(&meta.config.encoder, &mut ChaCha8Rng::seed_from_u64(0))?;
        let mut query = template.zeros_like();
        let mut key = template.zeros_like();
        let mut velocity = template.zeros_like();
        archive.fill("theta_q", &mut query)?;
        archive.fill("theta_k", &mut key)?;
        archive.fill("velocity_q", &mut velocity)?;
        let (geo_head, head_velocity) = if meta.has_head {
            let w = archive.array("theta_c/weight")?;
            let (fan_in, fan_out) = match w.shape() {
                [a, b] => (*a, *b),
                s => return Err(Error::Serde(format!("head weight has shape {s:?}"))),
            };
            let mut head = Dense::zeros(fan_in, fan_out);
            let mut hv = Dense::zeros(fan_in, fan_out);
            archive.fill("theta_c", &mut head)?;
            archive.fill("velocity_c", &mut hv)?;
            (Some(head), Some(hv))
        } else {
            (None, None)
        };
        let queue_entries: Array2<f64> = archive
            .array("queue")?
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Serde(format!("queue: {e}")))?;
        let queue = if queue_entries.nrows() == 0 {
            NegativeQueue::new(meta.queue_capacity, meta.config.encoder.embed_dim)?
        } else {
            NegativeQueue::from_parts(queue_entries, meta.queue_capacity)?
        };
        Ok(Self {
            epoch: meta.epoch,
            state: MoCoState {
                query,
                key,
                geo_head,
                queue,
                step: meta.step,
            },
            velocity,
            head_velocity,
            rng_state: meta.rng_state,
            geo_cluster_model_path: meta.geo_cluster_model_path,
            config: meta.config,
        })
    }
}

fn prefixed<'a>(
    prefix: &str,
    arrays: Vec<(String, ArrayViewD<'a, f64>)>,
) -> Vec<(String, ArrayViewD<'a, f64>)> {
    arrays
        .into_iter()
        .map(|(name, a)| (format!("{prefix}/{name}"), a))
        .collect()
}

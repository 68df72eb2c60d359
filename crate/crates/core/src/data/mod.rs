//! Geo-tagged image sequences: dataset types, manifest I/O, the synthetic
//! generator, augmentation and temporal pair sampling.
//!
//! An *area* is one location `(lat, lon)` owning `T >= 1` spatially aligned
//! images (views). Views are numbered `1..=T`. Class labels are 0-based.

mod augment;
mod manifest;
mod pairing;
mod synthetic;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use augment::{augment, AugmentConfig};
pub use manifest::{load_manifest, write_manifest, write_manifest_index, IMAGE_FORMAT};
pub use pairing::{sample_temporal_pair, PairingMode};
pub use synthetic::{
    generate_synthetic, generate_synthetic_with_truth, SyntheticDataset, SyntheticSpec,
};

use crate::error::{Error, Result};

/// Image array of shape `(h, w, ch)` with values in `[0, 1]`.
pub type Image = Array3<f32>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageGeometry {
    pub h: usize,
    pub w: usize,
    pub ch: usize,
}

impl ImageGeometry {
    pub fn new(h: usize, w: usize, ch: usize) -> Self {
        Self { h, w, ch }
    }

    /// Flattened length `h * w * ch`.
    pub fn len(&self) -> usize {
        self.h * self.w * self.ch
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        (self.h, self.w, self.ch)
    }
}

impl Default for ImageGeometry {
    fn default() -> Self {
        Self::new(32, 32, 3)
    }
}

/// One image of an area.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoSample {
    pub area_id: String,
    /// 1-based position in the area's sequence.
    pub view_index: usize,
    /// ISO-8601; carried for ordering only.
    pub timestamp: String,
    pub image: Image,
    pub lat: f64,
    pub lon: f64,
    pub label: Option<usize>,
}

/// A location and its temporal stack of images.
#[derive(Debug, Clone, PartialEq)]
pub struct AreaRecord {
    pub area_id: String,
    pub lat: f64,
    pub lon: f64,
    pub label: Option<usize>,
    pub views: Vec<GeoSample>,
}

impl AreaRecord {
    pub fn n_views(&self) -> usize {
        self.views.len()
    }

    /// View by 1-based index.
    pub fn view(&self, index: usize) -> &GeoSample {
        &self.views[index - 1]
    }

    /// Check the record's invariants against the declared geometry.
    pub fn validate(&self, geometry: ImageGeometry, n_classes: Option<usize>) -> Result<()> {
        let fail = |message: String| {
            Err(Error::InvalidArea {
                area_id: self.area_id.clone(),
                message,
            })
        };
        if self.views.is_empty() {
            return fail("area has no views".into());
        }
        if !(-90.0..=90.0).contains(&self.lat) || !(-180.0..=180.0).contains(&self.lon) {
            return fail(format!(
                "coordinates ({}, {}) out of range",
                self.lat, self.lon
            ));
        }
        if let (Some(label), Some(n)) = (self.label, n_classes) {
            if label >= n {
                return fail(format!("label {label} outside 0..{n}"));
            }
        }
        for (pos, view) in self.views.iter().enumerate() {
            if view.area_id != self.area_id {
                return fail(format!(
                    "view {} carries area_id `{}`",
                    view.view_index, view.area_id
                ));
            }
            if view.lat != self.lat || view.lon != self.lon {
                return fail(format!(
                    "view {} has coordinates ({}, {}) but the area has ({}, {})",
                    view.view_index, view.lat, view.lon, self.lat, self.lon
                ));
            }
            if view.label != self.label {
                return fail(format!("view {} has a different label", view.view_index));
            }
            if view.view_index != pos + 1 {
                return fail(format!(
                    "view indices must be 1..={} without gaps or duplicates",
                    self.views.len()
                ));
            }
            if view.image.dim() != geometry.shape() {
                return fail(format!(
                    "view {} image shape {:?} differs from declared {:?}",
                    view.view_index,
                    view.image.dim(),
                    geometry.shape()
                ));
            }
            if view.image.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return fail(format!(
                    "view {} has pixel values outside [0, 1]",
                    view.view_index
                ));
            }
        }
        Ok(())
    }
}

/// Where a manifest came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Provenance {
    Synthetic { seed: u64, spec: SyntheticSpec },
    Source { path: String },
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub geometry: ImageGeometry,
    pub n_classes: Option<usize>,
    pub areas: Vec<AreaRecord>,
    pub provenance: Provenance,
}

impl DatasetManifest {
    /// Total number of images, `sum(T_i)`.
    pub fn n_samples(&self) -> usize {
        self.areas.iter().map(AreaRecord::n_views).sum()
    }

    pub fn is_labeled(&self) -> bool {
        !self.areas.is_empty() && self.areas.iter().all(|a| a.label.is_some())
    }

    /// Class count: the declared value, else one past the largest label.
    pub fn class_count(&self) -> Option<usize> {
        self.n_classes.or_else(|| {
            self.areas
                .iter()
                .filter_map(|a| a.label)
                .max()
                .map(|m| m + 1)
        })
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = std::collections::HashSet::new();
        for area in &self.areas {
            if !seen.insert(area.area_id.as_str()) {
                return Err(Error::InvalidArea {
                    area_id: area.area_id.clone(),
                    message: "duplicate area_id".into(),
                });
            }
            area.validate(self.geometry, self.n_classes)?;
        }
        Ok(())
    }

    /// One `(lat, lon)` point per area, in area order.
    pub fn coordinates(&self) -> Vec<(f64, f64)> {
        self.areas.iter().map(|a| (a.lat, a.lon)).collect()
    }

    /// Manifest restricted to the given area positions (in that order).
    pub fn subset(&self, indices: &[usize]) -> DatasetManifest {
        DatasetManifest {
            geometry: self.geometry,
            n_classes: self.n_classes,
            areas: indices.iter().map(|&i| self.areas[i].clone()).collect(),
            provenance: self.provenance.clone(),
        }
    }

    /// Deterministic area-level split into `(train, held_out)`.
    ///
    /// All views of an area land on the same side.
    pub fn split_areas(
        &self,
        held_out_fraction: f64,
        seed: u64,
    ) -> Result<(DatasetManifest, DatasetManifest)> {
        if !(0.0..1.0).contains(&held_out_fraction) {
            return Err(Error::config(format!(
                "held-out fraction must be in [0, 1), got {held_out_fraction}"
            )));
        }
        let mut order: Vec<usize> = (0..self.areas.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let n_test = (self.areas.len() as f64 * held_out_fraction).round() as usize;
        let (test, train) = order.split_at(n_test);
        let mut train = train.to_vec();
        let mut test = test.to_vec();
        train.sort_unstable();
        test.sort_unstable();
        Ok((self.subset(&train), self.subset(&test)))
    }
}

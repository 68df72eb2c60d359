//! Desk-scale synthetic geo-temporal dataset.
//!
//! Generative process (all draws from one seeded ChaCha8 stream, in order):
//! 1. one smooth template per class (sum of random gratings per channel,
//!    made mirror-symmetric along the width);
//! 2. `n_geo` geo-centers on the (lat, lon) plane, kept apart by rejection;
//! 3. per area: a geo-center plus coordinate noise, a label that with
//!    probability `geo_class_corr` is `center % n_classes` (uniform otherwise),
//!    an area-specific offset pattern and `T_i` views;
//! 4. per view: brightness shift (common plus per-channel), integer
//!    translation and pixel noise, scaled by `temporal_noise`.

use std::f64::consts::PI;

use chrono::{Duration, NaiveDate};
use ndarray::{s, Array3};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{AreaRecord, DatasetManifest, GeoSample, Image, ImageGeometry, Provenance};
use crate::error::{Error, Result};

/// Half-width of the per-channel, per-view tint at `temporal_noise = 1`.
const TINT: f64 = 0.1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_areas: usize,
    pub n_classes: usize,
    /// Number of ground-truth geo-centers.
    pub n_geo: usize,
    pub min_views: usize,
    pub max_views: usize,
    pub geometry: ImageGeometry,
    /// Probability that an area's class is determined by its geo-center.
    pub geo_class_corr: f64,
    /// Scales the per-view nuisance (1.0 is "moderate").
    pub temporal_noise: f64,
    /// Amplitude of the area-specific appearance offset.
    pub area_noise: f64,
    /// Std-dev of area coordinates around their geo-center, in degrees.
    pub coord_noise_deg: f64,
    /// Minimum pairwise distance between geo-centers, in degrees.
    pub min_center_sep_deg: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_areas: 200,
            n_classes: 8,
            n_geo: 8,
            min_views: 1,
            max_views: 4,
            geometry: ImageGeometry::default(),
            geo_class_corr: 0.9,
            temporal_noise: 1.0,
            area_noise: 0.3,
            coord_noise_deg: 1.5,
            min_center_sep_deg: 15.0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: &str| Err(Error::config(m));
        if self.n_areas == 0 {
            return err("n_areas must be at least 1");
        }
        if self.n_classes < 2 {
            return err("n_classes must be at least 2");
        }
        if self.n_geo == 0 {
            return err("n_geo must be at least 1");
        }
        if self.min_views == 0 {
            return err("min_views must be at least 1");
        }
        if self.min_views > self.max_views {
            return err("min_views exceeds max_views");
        }
        if self.geometry.is_empty() {
            return err("image geometry must be non-zero");
        }
        if !(0.0..=1.0).contains(&self.geo_class_corr) {
            return err("geo_class_corr must lie in [0, 1]");
        }
        for (name, v) in [
            ("temporal_noise", self.temporal_noise),
            ("area_noise", self.area_noise),
            ("coord_noise_deg", self.coord_noise_deg),
            ("min_center_sep_deg", self.min_center_sep_deg),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::config(format!(
                    "{name} must be finite and non-negative"
                )));
            }
        }
        Ok(())
    }
}

/// Generated manifest together with the hidden generative state.
#[derive(Debug, Clone)]
pub struct SyntheticDataset {
    pub manifest: DatasetManifest,
    /// Ground-truth geo-centers `(lat, lon)`.
    pub geo_centers: Vec<(f64, f64)>,
    /// Geo-center index of each area.
    pub area_centers: Vec<usize>,
    /// Noise-free class templates.
    pub templates: Vec<Image>,
}

pub fn generate_synthetic(spec: &SyntheticSpec, seed: u64) -> Result<DatasetManifest> {
    generate_synthetic_with_truth(spec, seed).map(|d| d.manifest)
}

pub fn generate_synthetic_with_truth(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let geom = spec.geometry;

    let templates: Vec<Image> = (0..spec.n_classes)
        .map(|_| {
            let g = grating_pattern(&mut rng, geom, 3, 2);
            let mut t = (&g + &g.slice(s![.., ..;-1, ..])) * 0.5;
            normalize_into(&mut t, 0.5, 0.3);
            t
        })
        .collect();

    let geo_centers = sample_centers(&mut rng, spec.n_geo, spec.min_center_sep_deg);
    let coord =
        Normal::new(0.0, spec.coord_noise_deg.max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let s = spec.temporal_noise;
    let pixel_noise = Normal::new(0.0, (0.04 * s).max(f64::MIN_POSITIVE)).expect("finite std-dev");
    let max_shift = (2.0 * s).round() as i64;
    let base_date = NaiveDate::from_ymd_opt(2015, 1, 1).expect("valid date");

    let mut areas = Vec::with_capacity(spec.n_areas);
    let mut area_centers = Vec::with_capacity(spec.n_areas);
    for i in 0..spec.n_areas {
        let g = rng.random_range(0..spec.n_geo);
        let (clat, clon) = geo_centers[g];
        let lat = (clat + coord.sample(&mut rng)).clamp(-90.0, 90.0);
        let lon = (clon + coord.sample(&mut rng)).clamp(-180.0, 180.0);
        let label = if rng.random::<f64>() < spec.geo_class_corr {
            g % spec.n_classes
        } else {
            rng.random_range(0..spec.n_classes)
        };

        let mut offset = grating_pattern(&mut rng, geom, 1, 3);
        let peak = offset.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
        offset.mapv_inplace(|v| v / peak * spec.area_noise as f32);
        let mut base = &templates[label] + &offset;
        for c in 0..geom.ch {
            let tint = rng.random_range(-0.5..=0.5) * spec.area_noise;
            base.index_axis_mut(ndarray::Axis(2), c)
                .mapv_inplace(|v| v + tint as f32);
        }

        let n_views = if spec.min_views == spec.max_views {
            spec.min_views
        } else {
            rng.random_range(spec.min_views..=spec.max_views)
        };
        let area_id = format!("area-{i:05}");
        let start_day = rng.random_range(0..365i64);
        let mut views = Vec::with_capacity(n_views);
        for t in 1..=n_views {
            let brightness = if s > 0.0 {
                rng.random_range(-0.15 * s..=0.15 * s)
            } else {
                0.0
            };
            let tints: Vec<f64> = (0..geom.ch)
                .map(|_| {
                    if s > 0.0 {
                        rng.random_range(-TINT * s..=TINT * s)
                    } else {
                        0.0
                    }
                })
                .collect();
            let (dy, dx) = if max_shift > 0 {
                (
                    rng.random_range(-max_shift..=max_shift),
                    rng.random_range(-max_shift..=max_shift),
                )
            } else {
                (0, 0)
            };
            let mut image = shift_clamped(&base, dy, dx);
            for ((_, _, c), v) in image.indexed_iter_mut() {
                let noise = if s > 0.0 {
                    pixel_noise.sample(&mut rng)
                } else {
                    0.0
                };
                *v = (f64::from(*v) + brightness + tints[c] + noise).clamp(0.0, 1.0) as f32;
            }
            let day = start_day + (t as i64 - 1) * 91 + rng.random_range(0..30i64);
            let timestamp = (base_date + Duration::days(day))
                .format("%Y-%m-%dT00:00:00Z")
                .to_string();
            views.push(GeoSample {
                area_id: area_id.clone(),
                view_index: t,
                timestamp,
                image,
                lat,
                lon,
                label: Some(label),
            });
        }
        areas.push(AreaRecord {
            area_id,
            lat,
            lon,
            label: Some(label),
            views,
        });
        area_centers.push(g);
    }

    Ok(SyntheticDataset {
        manifest: DatasetManifest {
            geometry: geom,
            n_classes: Some(spec.n_classes),
            areas,
            provenance: Provenance::Synthetic {
                seed,
                spec: spec.clone(),
            },
        },
        geo_centers,
        area_centers,
        templates,
    })
}

fn sample_centers(rng: &mut ChaCha8Rng, n: usize, min_sep: f64) -> Vec<(f64, f64)> {
    let mut centers: Vec<(f64, f64)> = Vec::with_capacity(n);
    while centers.len() < n {
        let mut candidate = (0.0, 0.0);
        for _ in 0..1000 {
            candidate = (
                rng.random_range(-60.0..60.0),
                rng.random_range(-170.0..170.0),
            );
            let ok = centers.iter().all(|&(la, lo)| {
                let d2 = (la - candidate.0).powi(2) + (lo - candidate.1).powi(2);
                d2 >= min_sep * min_sep
            });
            if ok {
                break;
            }
        }
        centers.push(candidate);
    }
    centers
}

/// Sum of `n_waves` random sinusoidal gratings per channel (unnormalized),
/// at most `max_freq` cycles per image side.
fn grating_pattern(
    rng: &mut ChaCha8Rng,
    geom: ImageGeometry,
    n_waves: usize,
    max_freq: i32,
) -> Image {
    let mut img = Array3::<f32>::zeros(geom.shape());
    for c in 0..geom.ch {
        for _ in 0..n_waves {
            let amp = rng.random_range(0.5..1.0);
            let (fy, fx) = loop {
                let fy = rng.random_range(-max_freq..=max_freq);
                let fx = rng.random_range(-max_freq..=max_freq);
                if fy != 0 || fx != 0 {
                    break (f64::from(fy), f64::from(fx));
                }
            };
            let phase = rng.random_range(0.0..2.0 * PI);
            for y in 0..geom.h {
                for x in 0..geom.w {
                    let arg =
                        2.0 * PI * (fy * y as f64 / geom.h as f64 + fx * x as f64 / geom.w as f64)
                            + phase;
                    img[[y, x, c]] += (amp * arg.sin()) as f32;
                }
            }
        }
    }
    img
}

/// Rescale in place so values span `center ± half_range`.
fn normalize_into(img: &mut Image, center: f32, half_range: f32) {
    let peak = img.iter().fold(0.0f32, |m, v| m.max(v.abs())).max(1e-6);
    img.mapv_inplace(|v| center + half_range * v / peak);
}

/// Translate by `(dy, dx)` pixels, replicating edge pixels.
fn shift_clamped(img: &Image, dy: i64, dx: i64) -> Image {
    let (h, w, ch) = img.dim();
    Array3::from_shape_fn((h, w, ch), |(y, x, c)| {
        let sy = (y as i64 - dy).clamp(0, h as i64 - 1) as usize;
        let sx = (x as i64 - dx).clamp(0, w as i64 - 1) as usize;
        img[[sy, sx, c]]
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::{HashMap, HashSet};

    fn small() -> SyntheticSpec {
        SyntheticSpec {
            n_areas: 10,
            geometry: ImageGeometry::new(8, 8, 3),
            ..Default::default()
        }
    }

    #[test]
    fn fixed_view_count() {
        let spec = SyntheticSpec {
            min_views: 1,
            max_views: 1,
            ..small()
        };
        let m = generate_synthetic(&spec, 3).unwrap();
        assert!(m.areas.iter().all(|a| a.n_views() == 1));
        assert_eq!(m.n_samples(), 10);
    }

    #[test]
    fn deterministic_in_seed() {
        let a = generate_synthetic(&small(), 11).unwrap();
        let b = generate_synthetic(&small(), 11).unwrap();
        let c = generate_synthetic(&small(), 12).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
    }

    #[test]
    fn full_correlation_makes_class_a_function_of_center() {
        let spec = SyntheticSpec {
            n_areas: 300,
            n_geo: 4,
            geo_class_corr: 1.0,
            ..small()
        };
        let d = generate_synthetic_with_truth(&spec, 7).unwrap();
        let mut classes: HashMap<usize, HashSet<usize>> = HashMap::new();
        for (area, &g) in d.manifest.areas.iter().zip(&d.area_centers) {
            classes.entry(g).or_default().insert(area.label.unwrap());
        }
        assert_eq!(classes.len(), 4);
        assert!(classes.values().all(|s| s.len() == 1));
    }

    #[test]
    fn inconsistent_spec_is_rejected() {
        let spec = SyntheticSpec {
            min_views: 3,
            max_views: 2,
            ..small()
        };
        assert!(matches!(
            generate_synthetic(&spec, 0),
            Err(Error::Config(_))
        ));
        let spec = SyntheticSpec {
            geo_class_corr: 1.5,
            ..small()
        };
        assert!(matches!(
            generate_synthetic(&spec, 0),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn generated_data_is_valid() {
        let m = generate_synthetic(&small(), 5).unwrap();
        m.validate().unwrap();
    }
}

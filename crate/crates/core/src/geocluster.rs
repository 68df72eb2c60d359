//! k-means over area coordinates and the geo-labels derived from it.
//!
//! Distances are squared Euclidean in raw `(lat, lon)` degrees; longitude
//! wraparound at ±180° is not modelled. Cluster labels are 0-based indices
//! into `centroids`.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::DatasetManifest;
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeoClusterModel {
    #[serde(rename = "K")]
    pub k: usize,
    pub centroids: Vec<[f64; 2]>,
    pub inertia: f64,
    pub seed: u64,
    #[serde(default)]
    pub iterations: usize,
    /// Inertia after initialization and after every Lloyd iteration.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub inertia_trace: Vec<f64>,
}

#[inline]
fn sq_dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    let d0 = a[0] - b[0];
    let d1 = a[1] - b[1];
    d0 * d0 + d1 * d1
}

/// Index of the nearest centroid; ties go to the lowest index.
fn nearest(centroids: &[[f64; 2]], p: [f64; 2]) -> (usize, f64) {
    let mut best = (0, sq_dist(centroids[0], p));
    for (j, &c) in centroids.iter().enumerate().skip(1) {
        let d = sq_dist(c, p);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// Lloyd's algorithm with k-means++ seeding.
///
/// Stops when the largest centroid displacement falls below `tol` or after
/// `max_iter` iterations. An emptied cluster is re-seeded at the point
/// farthest from its assigned centroid. The returned centroids are those
/// the points were last assigned to, so `inertia` is exact for them.
pub fn fit_kmeans(
    points: &[(f64, f64)],
    k: usize,
    seed: u64,
    max_iter: usize,
    tol: f64,
) -> Result<GeoClusterModel> {
    if points.is_empty() {
        return Err(Error::config("k-means needs at least one point"));
    }
    if k == 0 {
        return Err(Error::config("K must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::config(format!(
            "K = {k} exceeds the number of points ({})",
            points.len()
        )));
    }
    if !(tol >= 0.0) {
        return Err(Error::config("tolerance must be non-negative"));
    }
    let pts: Vec<[f64; 2]> = points.iter().map(|&(a, b)| [a, b]).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp(&pts, k, &mut rng);

    let mut assign = vec![0usize; pts.len()];
    let mut dists = vec![0.0f64; pts.len()];
    let reassign = |centroids: &[[f64; 2]], assign: &mut [usize], dists: &mut [f64]| -> f64 {
        let mut total = 0.0;
        for (i, &p) in pts.iter().enumerate() {
            let (j, d) = nearest(centroids, p);
            assign[i] = j;
            dists[i] = d;
            total += d;
        }
        total
    };

    let mut inertia = reassign(&centroids, &mut assign, &mut dists);
    let mut trace = vec![inertia];
    let mut iterations = 0;
    while iterations < max_iter {
        iterations += 1;
        let mut sums = vec![[0.0f64; 2]; k];
        let mut counts = vec![0usize; k];
        for (i, &p) in pts.iter().enumerate() {
            let j = assign[i];
            sums[j][0] += p[0];
            sums[j][1] += p[1];
            counts[j] += 1;
        }
        let mut next = centroids.clone();
        for j in 0..k {
            if counts[j] > 0 {
                next[j] = [sums[j][0] / counts[j] as f64, sums[j][1] / counts[j] as f64];
            }
        }
        for j in 0..k {
            if counts[j] == 0 {
                let far = (0..pts.len())
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .expect("non-empty points");
                next[j] = pts[far];
                dists[far] = 0.0;
            }
        }
        let shift = centroids
            .iter()
            .zip(&next)
            .map(|(a, b)| sq_dist(*a, *b).sqrt())
            .fold(0.0, f64::max);
        centroids = next;
        inertia = reassign(&centroids, &mut assign, &mut dists);
        trace.push(inertia);
        if shift < tol {
            break;
        }
    }

    Ok(GeoClusterModel {
        k,
        centroids,
        inertia,
        seed,
        iterations,
        inertia_trace: trace,
    })
}

/// Greedy k-means++: each new centroid is the best (lowest resulting
/// potential) of `2 + ln K` candidates drawn proportionally to `D(x)^2`.
fn kmeans_pp<R: Rng>(pts: &[[f64; 2]], k: usize, rng: &mut R) -> Vec<[f64; 2]> {
    let n_trials = 2 + (k as f64).ln().floor() as usize;
    let mut centroids = Vec::with_capacity(k);
    centroids.push(pts[rng.random_range(0..pts.len())]);
    let mut d2: Vec<f64> = pts.iter().map(|&p| sq_dist(p, centroids[0])).collect();
    while centroids.len() < k {
        let total: f64 = d2.iter().sum();
        let mut best: Option<(f64, usize)> = None;
        for _ in 0..n_trials {
            let cand = if total > 0.0 {
                sample_weighted(&d2, rng.random::<f64>() * total)
            } else {
                rng.random_range(0..pts.len())
            };
            let potential: f64 = pts
                .iter()
                .zip(&d2)
                .map(|(&p, &d)| d.min(sq_dist(p, pts[cand])))
                .sum();
            if best.is_none_or(|(b, _)| potential < b) {
                best = Some((potential, cand));
            }
        }
        let c = pts[best.expect("at least two trials").1];
        centroids.push(c);
        for (i, &p) in pts.iter().enumerate() {
            d2[i] = d2[i].min(sq_dist(p, c));
        }
    }
    centroids
}

/// Index `i` with `sum(w[..i]) <= target < sum(w[..=i])`, skipping zero weights.
fn sample_weighted(weights: &[f64], mut target: f64) -> usize {
    let mut last_positive = 0;
    for (i, &w) in weights.iter().enumerate() {
        if w > 0.0 {
            if target < w {
                return i;
            }
            target -= w;
            last_positive = i;
        }
    }
    last_positive
}

impl GeoClusterModel {
    /// Geo-label (0-based centroid index) of a coordinate.
    pub fn assign(&self, lat: f64, lon: f64) -> usize {
        nearest(&self.centroids, [lat, lon]).0
    }

    /// Sum of squared distances of `points` to their nearest centroid.
    pub fn inertia_of(&self, points: &[(f64, f64)]) -> f64 {
        points
            .iter()
            .map(|&(a, b)| nearest(&self.centroids, [a, b]).1)
            .sum()
    }

    /// Geo-label of every area of a manifest.
    pub fn assign_manifest(&self, manifest: &DatasetManifest) -> Vec<usize> {
        manifest
            .areas
            .iter()
            .map(|a| self.assign(a.lat, a.lon))
            .collect()
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        fs::write(path, self.to_json()? + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let model: Self = serde_json::from_str(&text)?;
        if model.k == 0 || model.centroids.len() != model.k {
            return Err(Error::Validation(format!(
                "geo-cluster model declares K = {} but has {} centroids",
                model.k,
                model.centroids.len()
            )));
        }
        Ok(model)
    }
}

/// Label/cluster co-occurrence counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterStats {
    /// class → number of distinct clusters containing it.
    pub clusters_per_label: BTreeMap<usize, usize>,
    /// cluster → number of distinct classes in it (non-empty clusters only).
    pub labels_per_cluster: BTreeMap<usize, usize>,
    /// cluster → number of areas (every cluster, including empty ones).
    pub areas_per_cluster: BTreeMap<usize, usize>,
}

pub fn cluster_stats(manifest: &DatasetManifest, model: &GeoClusterModel) -> Result<ClusterStats> {
    if !manifest.is_labeled() {
        return Err(Error::Validation(
            "cluster statistics require a labeled manifest".into(),
        ));
    }
    let mut clusters_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut labels_of: BTreeMap<usize, BTreeSet<usize>> = BTreeMap::new();
    let mut areas_per_cluster: BTreeMap<usize, usize> = (0..model.k).map(|j| (j, 0)).collect();
    for area in &manifest.areas {
        let label = area.label.expect("checked labeled");
        let c = model.assign(area.lat, area.lon);
        clusters_of.entry(label).or_default().insert(c);
        labels_of.entry(c).or_default().insert(label);
        *areas_per_cluster.entry(c).or_default() += 1;
    }
    Ok(ClusterStats {
        clusters_per_label: clusters_of.into_iter().map(|(k, v)| (k, v.len())).collect(),
        labels_per_cluster: labels_of.into_iter().map(|(k, v)| (k, v.len())).collect(),
        areas_per_cluster,
    })
}

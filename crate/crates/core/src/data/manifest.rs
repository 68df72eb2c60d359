//! JSON-lines manifest format.
//!
//! Line 1 is a header `{"h", "w", "ch", "n_classes", "format", "provenance"}`;
//! every following line is one image:
//! `{"area_id", "view_index", "timestamp", "lat", "lon", "image_path", "label"}`.
//! Images are stored as `.npy` float32 arrays of shape `(h, w, ch)`, with paths
//! relative to the manifest's directory.

use std::collections::{HashMap, HashSet};
use std::fs::{self, File};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use ndarray_npy::{ReadNpyExt, WriteNpyExt};
use serde::{Deserialize, Serialize};

use super::{AreaRecord, DatasetManifest, GeoSample, Image, ImageGeometry, Provenance};
use crate::error::{Error, Result};

/// Value of the header's `format` field for images written by this crate.
pub const IMAGE_FORMAT: &str = "npy-f32";

const IMAGE_DIR: &str = "images";

#[derive(Debug, Serialize, Deserialize)]
struct Header {
    h: usize,
    w: usize,
    ch: usize,
    n_classes: Option<usize>,
    #[serde(default)]
    format: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    provenance: Option<Provenance>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct SampleLine {
    area_id: String,
    view_index: usize,
    timestamp: String,
    lat: f64,
    lon: f64,
    image_path: String,
    label: Option<usize>,
}

/// Read and validate a manifest; referenced images are loaded eagerly.
pub fn load_manifest(path: impl AsRef<Path>) -> Result<DatasetManifest> {
    let path = path.as_ref();
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let mut lines = BufReader::new(file).lines().enumerate();

    let header: Header = match lines.next() {
        Some((_, line)) => {
            let line = line.map_err(|e| Error::io(path, e))?;
            serde_json::from_str(&line).map_err(|e| Error::Parse {
                line: 1,
                message: format!("invalid header: {e}"),
            })?
        }
        None => {
            return Err(Error::Parse {
                line: 1,
                message: "empty manifest".into(),
            })
        }
    };
    if let Some(format) = &header.format {
        if format != IMAGE_FORMAT {
            return Err(Error::Parse {
                line: 1,
                message: format!("unsupported image format `{format}`"),
            });
        }
    }
    let geometry = ImageGeometry::new(header.h, header.w, header.ch);
    if geometry.is_empty() {
        return Err(Error::Parse {
            line: 1,
            message: "image geometry must be non-zero".into(),
        });
    }

    let mut order: Vec<String> = Vec::new();
    let mut groups: HashMap<String, Vec<GeoSample>> = HashMap::new();
    for (idx, line) in lines {
        let line_no = idx + 1;
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SampleLine = serde_json::from_str(&line).map_err(|e| Error::Parse {
            line: line_no,
            message: e.to_string(),
        })?;
        let image_path = resolve(&base, &rec.image_path);
        let image = read_image(&image_path)?;
        let sample = GeoSample {
            area_id: rec.area_id.clone(),
            view_index: rec.view_index,
            timestamp: rec.timestamp,
            image,
            lat: rec.lat,
            lon: rec.lon,
            label: rec.label,
        };
        groups
            .entry(rec.area_id.clone())
            .or_insert_with(|| {
                order.push(rec.area_id);
                Vec::new()
            })
            .push(sample);
    }

    let mut areas = Vec::with_capacity(order.len());
    for area_id in order {
        let mut views = groups.remove(&area_id).unwrap_or_default();
        views.sort_by_key(|v| v.view_index);
        let first = &views[0];
        let area = AreaRecord {
            area_id,
            lat: first.lat,
            lon: first.lon,
            label: first.label,
            views,
        };
        area.validate(geometry, header.n_classes)?;
        areas.push(area);
    }

    let manifest = DatasetManifest {
        geometry,
        n_classes: header.n_classes,
        areas,
        provenance: header.provenance.unwrap_or_else(|| Provenance::Source {
            path: path.display().to_string(),
        }),
    };
    manifest.validate()?;
    Ok(manifest)
}

/// Write the manifest index at `path` and every image under `<dir>/images/`.
pub fn write_manifest(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let image_dir = base.join(IMAGE_DIR);
    fs::create_dir_all(&image_dir).map_err(|e| Error::io(&image_dir, e))?;
    for area in &manifest.areas {
        for view in &area.views {
            let rel = image_rel_path(&area.area_id, view.view_index);
            write_image(&base.join(rel), &view.image)?;
        }
    }
    write_manifest_index(manifest, path)
}

/// Write only the JSON-lines index; images are expected at the paths
/// [`write_manifest`] would use (so several indices can share one image set).
pub fn write_manifest_index(manifest: &DatasetManifest, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    manifest.validate()?;
    let mut names = HashSet::new();
    for area in &manifest.areas {
        if !names.insert(sanitize(&area.area_id)) {
            return Err(Error::InvalidArea {
                area_id: area.area_id.clone(),
                message: "area_id collides with another after file-name sanitization".into(),
            });
        }
    }
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let header = Header {
        h: manifest.geometry.h,
        w: manifest.geometry.w,
        ch: manifest.geometry.ch,
        n_classes: manifest.n_classes,
        format: Some(IMAGE_FORMAT.to_string()),
        provenance: Some(manifest.provenance.clone()),
    };
    let io = |e| Error::io(path, e);
    writeln!(out, "{}", serde_json::to_string(&header)?).map_err(io)?;
    for area in &manifest.areas {
        for view in &area.views {
            let line = SampleLine {
                area_id: area.area_id.clone(),
                view_index: view.view_index,
                timestamp: view.timestamp.clone(),
                lat: view.lat,
                lon: view.lon,
                image_path: image_rel_path(&area.area_id, view.view_index),
                label: view.label,
            };
            writeln!(out, "{}", serde_json::to_string(&line)?).map_err(io)?;
        }
    }
    out.flush().map_err(io)
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

fn sanitize(area_id: &str) -> String {
    area_id
        .chars()
        .map(|c| {
            if c.is_ascii_alphanumeric() || c == '-' || c == '.' {
                c
            } else {
                '_'
            }
        })
        .collect()
}

fn image_rel_path(area_id: &str, view_index: usize) -> String {
    format!("{IMAGE_DIR}/{}_v{view_index:03}.npy", sanitize(area_id))
}

fn read_image(path: &Path) -> Result<Image> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    Image::read_npy(BufReader::new(file)).map_err(|e| Error::io(path, std::io::Error::other(e)))
}

fn write_image(path: &Path, image: &Image) -> Result<()> {
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    image
        .write_npy(&mut out)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    out.flush().map_err(|e| Error::io(path, e))
}

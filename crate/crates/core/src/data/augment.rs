use ndarray::{s, Array3, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::Image;
use crate::error::{Error, Result};

/// Random perturbation family applied independently to each view.
///
/// Stages run in a fixed order (crop, flip, color jitter, grayscale) and a
/// disabled stage draws nothing from the rng.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentConfig {
    /// Crop side as a fraction of the image side, drawn uniformly from `[lo, hi]`.
    pub crop_scale: (f64, f64),
    pub flip_prob: f64,
    /// Probability that color jitter is applied at all.
    pub jitter_prob: f64,
    /// Additive brightness delta drawn from `[-b, b]`.
    pub brightness: f64,
    /// Contrast factor drawn from `[1 - c, 1 + c]`.
    pub contrast: f64,
    /// Saturation factor drawn from `[1 - s, 1 + s]`.
    pub saturation: f64,
    pub grayscale_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            crop_scale: (0.7, 1.0),
            flip_prob: 0.5,
            jitter_prob: 0.8,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            grayscale_prob: 0.2,
        }
    }
}

impl AugmentConfig {
    /// Configuration that returns its input unchanged.
    pub fn identity() -> Self {
        Self {
            crop_scale: (1.0, 1.0),
            flip_prob: 0.0,
            jitter_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            grayscale_prob: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(format!(
                "crop scale range ({lo}, {hi}) must satisfy 0 < lo <= hi <= 1"
            )));
        }
        for (name, p) in [
            ("flip_prob", self.flip_prob),
            ("jitter_prob", self.jitter_prob),
            ("grayscale_prob", self.grayscale_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(format!("{name} must lie in [0, 1], got {p}")));
            }
        }
        for (name, v) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::config(format!(
                    "{name} strength must lie in [0, 1], got {v}"
                )));
            }
        }
        Ok(())
    }

    fn crop_enabled(&self) -> bool {
        self.crop_scale != (1.0, 1.0)
    }

    fn jitter_enabled(&self) -> bool {
        self.brightness > 0.0 || self.contrast > 0.0 || self.saturation > 0.0
    }
}

fn coin<R: Rng + ?Sized>(rng: &mut R, p: f64) -> bool {
    if p <= 0.0 {
        false
    } else if p >= 1.0 {
        true
    } else {
        rng.random_bool(p)
    }
}

fn symmetric<R: Rng + ?Sized>(rng: &mut R, half_width: f64) -> f64 {
    if half_width > 0.0 {
        rng.random_range(-half_width..=half_width)
    } else {
        0.0
    }
}

/// Apply one random draw of the perturbation family. Shape is preserved and
/// values are clipped to `[0, 1]`.
pub fn augment<R: Rng + ?Sized>(image: &Image, cfg: &AugmentConfig, rng: &mut R) -> Image {
    let (h, w, _) = image.dim();
    let mut out = if cfg.crop_enabled() {
        let (lo, hi) = cfg.crop_scale;
        let scale = if lo < hi {
            rng.random_range(lo..=hi)
        } else {
            lo
        };
        let ch = ((scale * h as f64).round() as usize).clamp(1, h);
        let cw = ((scale * w as f64).round() as usize).clamp(1, w);
        let top = rng.random_range(0..=h - ch);
        let left = rng.random_range(0..=w - cw);
        let crop = image
            .slice(s![top..top + ch, left..left + cw, ..])
            .to_owned();
        resize_bilinear(&crop, h, w)
    } else {
        image.clone()
    };

    if coin(rng, cfg.flip_prob) {
        out.invert_axis(Axis(1));
        out = out.as_standard_layout().to_owned();
    }

    if cfg.jitter_enabled() && coin(rng, cfg.jitter_prob) {
        let brightness = symmetric(rng, cfg.brightness);
        let contrast = 1.0 + symmetric(rng, cfg.contrast);
        let saturation = 1.0 + symmetric(rng, cfg.saturation);
        out.mapv_inplace(|v| v + brightness as f32);
        if contrast != 1.0 {
            let mean = out.mean().unwrap_or(0.0);
            out.mapv_inplace(|v| mean + (v - mean) * contrast as f32);
        }
        if saturation != 1.0 && out.dim().2 > 1 {
            let gray = luminance(&out);
            for ((y, x, _), v) in out.indexed_iter_mut() {
                let g = gray[[y, x]];
                *v = g + (*v - g) * saturation as f32;
            }
        }
    }

    if coin(rng, cfg.grayscale_prob) {
        let gray = luminance(&out);
        for ((y, x, _), v) in out.indexed_iter_mut() {
            *v = gray[[y, x]];
        }
    }

    out.mapv_inplace(|v| v.clamp(0.0, 1.0));
    out
}

/// Per-pixel luminance; ITU-R 601 weights for 3 channels, plain mean otherwise.
fn luminance(img: &Image) -> ndarray::Array2<f32> {
    if img.dim().2 == 3 {
        img.map_axis(Axis(2), |px| 0.299 * px[0] + 0.587 * px[1] + 0.114 * px[2])
    } else {
        img.mean_axis(Axis(2)).expect("at least one channel")
    }
}

/// Half-pixel-centred bilinear resampling.
fn resize_bilinear(src: &Image, h: usize, w: usize) -> Image {
    let (sh, sw, ch) = src.dim();
    if (sh, sw) == (h, w) {
        return src.clone();
    }
    let coords = |dst: usize, n_dst: usize, n_src: usize| {
        let pos =
            ((dst as f64 + 0.5) * n_src as f64 / n_dst as f64 - 0.5).clamp(0.0, (n_src - 1) as f64);
        let i0 = pos.floor() as usize;
        let i1 = (i0 + 1).min(n_src - 1);
        (i0, i1, (pos - i0 as f64) as f32)
    };
    let ys: Vec<_> = (0..h).map(|y| coords(y, h, sh)).collect();
    let xs: Vec<_> = (0..w).map(|x| coords(x, w, sw)).collect();
    Array3::from_shape_fn((h, w, ch), |(y, x, c)| {
        let (y0, y1, wy) = ys[y];
        let (x0, x1, wx) = xs[x];
        let top = src[[y0, x0, c]] * (1.0 - wx) + src[[y0, x1, c]] * wx;
        let bottom = src[[y1, x0, c]] * (1.0 - wx) + src[[y1, x1, c]] * wx;
        top * (1.0 - wy) + bottom * wy
    })
}

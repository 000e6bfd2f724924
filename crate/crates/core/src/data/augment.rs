use image::imageops::{self, FilterType};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{AnnotatedSample, Point};

/// Random flips, square crop and multi-scale resize.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    pub hflip: bool,
    pub vflip: bool,
    /// Smallest crop side as a fraction of the shorter image side; 1 disables cropping.
    pub min_crop: f64,
    /// Output side lengths to sample from; empty keeps the crop size.
    pub sizes: Vec<u32>,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            hflip: true,
            vflip: true,
            min_crop: 0.75,
            sizes: vec![96, 128, 160],
        }
    }
}

impl AugmentConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_crop > 0.0 && self.min_crop <= 1.0) {
            return Err(Error::Config(format!("augment.min_crop = {} must lie in (0, 1]", self.min_crop)));
        }
        if self.sizes.contains(&0) {
            return Err(Error::Config("augment.sizes must be positive".into()));
        }
        Ok(())
    }
}

/// Mirrors about the pixel centres; a centroid in the last pixel column's
/// right half would land left of the image and is clamped to 0.
pub fn hflip(sample: &AnnotatedSample) -> AnnotatedSample {
    let w = sample.width() as f64;
    AnnotatedSample {
        image: imageops::flip_horizontal(&sample.image),
        dataset_id: sample.dataset_id,
        centroids: sample.centroids.iter().map(|p| Point::new((w - 1.0 - p.u).max(0.0), p.v)).collect(),
        classes: sample.classes.clone(),
    }
}

pub fn vflip(sample: &AnnotatedSample) -> AnnotatedSample {
    let h = sample.height() as f64;
    AnnotatedSample {
        image: imageops::flip_vertical(&sample.image),
        dataset_id: sample.dataset_id,
        centroids: sample.centroids.iter().map(|p| Point::new(p.u, (h - 1.0 - p.v).max(0.0))).collect(),
        classes: sample.classes.clone(),
    }
}

/// Crops `[x, x + w) x [y, y + h)`. A nucleus survives when its centre
/// pixel lies inside the window.
pub fn crop(sample: &AnnotatedSample, x: u32, y: u32, w: u32, h: u32) -> AnnotatedSample {
    let image = imageops::crop_imm(&sample.image, x, y, w, h).to_image();
    let (x0, y0) = (x as f64, y as f64);
    let inside = |p: &Point| {
        p.u >= x0 - 0.5 && p.u < x0 + w as f64 - 0.5 && p.v >= y0 - 0.5 && p.v < y0 + h as f64 - 0.5
    };
    let mut centroids = Vec::new();
    let mut classes = Vec::new();
    for (p, &c) in sample.centroids.iter().zip(&sample.classes) {
        if inside(p) {
            // Clamp the half-pixel border back into the valid range.
            let u = (p.u - x0).clamp(0.0, w as f64 - 1.0);
            let v = (p.v - y0).clamp(0.0, h as f64 - 1.0);
            centroids.push(Point::new(u, v));
            classes.push(c);
        }
    }
    AnnotatedSample {
        image,
        dataset_id: sample.dataset_id,
        centroids,
        classes,
    }
}

/// Resizes to `w x h`, mapping pixel centres consistently.
pub fn resize(sample: &AnnotatedSample, w: u32, h: u32) -> AnnotatedSample {
    if (w, h) == (sample.width(), sample.height()) {
        return sample.clone();
    }
    let sx = w as f64 / sample.width() as f64;
    let sy = h as f64 / sample.height() as f64;
    AnnotatedSample {
        image: imageops::resize(&sample.image, w, h, FilterType::Triangle),
        dataset_id: sample.dataset_id,
        centroids: sample
            .centroids
            .iter()
            .map(|p| {
                Point::new(
                    ((p.u + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0),
                    ((p.v + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0),
                )
            })
            .collect(),
        classes: sample.classes.clone(),
    }
}

pub fn augment<R: Rng>(sample: &AnnotatedSample, cfg: &AugmentConfig, rng: &mut R) -> AnnotatedSample {
    let mut s = sample.clone();
    if cfg.hflip && rng.gen_bool(0.5) {
        s = hflip(&s);
    }
    if cfg.vflip && rng.gen_bool(0.5) {
        s = vflip(&s);
    }
    if cfg.min_crop < 1.0 {
        let short = s.width().min(s.height()) as f64;
        let frac = rng.gen_range(cfg.min_crop..=1.0);
        let side = ((short * frac).round() as u32).clamp(1, s.width().min(s.height()));
        let x = rng.gen_range(0..=s.width() - side);
        let y = rng.gen_range(0..=s.height() - side);
        s = crop(&s, x, y, side, side);
    }
    if !cfg.sizes.is_empty() {
        let size = cfg.sizes[rng.gen_range(0..cfg.sizes.len())];
        s = resize(&s, size, size);
    }
    s
}

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::metrics::Prediction;
use crate::model::Model;
use crate::registry::{AnnotatedSample, Point};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PadMode {
    Zero,
    /// Repeat the nearest border pixel.
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SliceSpec {
    pub patch_size: u32,
    pub overlap: f64,
    pub pad_mode: PadMode,
}

impl Default for SliceSpec {
    fn default() -> Self {
        Self {
            patch_size: 96,
            overlap: 0.25,
            pad_mode: PadMode::Zero,
        }
    }
}

impl SliceSpec {
    pub fn validate(&self) -> Result<()> {
        if self.patch_size == 0 {
            return Err(Error::Config("slice.patch_size must be > 0".into()));
        }
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("slice.overlap = {} must lie in [0, 1)", self.overlap)));
        }
        Ok(())
    }

    pub fn stride(&self) -> u32 {
        ((self.patch_size as f64 * (1.0 - self.overlap)).round() as u32).max(1)
    }

    /// Patch origins along an axis of length `len`; the last patch may overhang.
    pub fn offsets(&self, len: u32) -> Vec<u32> {
        let mut out = vec![0];
        while out[out.len() - 1] + self.patch_size < len {
            let next = out[out.len() - 1] + self.stride();
            out.push(next);
        }
        out
    }
}

/// Cuts `image` into `patch_size` squares, padding past the border.
pub fn slice_image(image: &RgbImage, spec: &SliceSpec) -> Vec<(RgbImage, (u32, u32))> {
    let (w, h) = image.dimensions();
    let p = spec.patch_size;
    let mut out = Vec::new();
    for &y in &spec.offsets(h) {
        for &x in &spec.offsets(w) {
            let patch = RgbImage::from_fn(p, p, |i, j| {
                let (u, v) = (x + i, y + j);
                if u < w && v < h {
                    *image.get_pixel(u, v)
                } else {
                    match spec.pad_mode {
                        PadMode::Zero => image::Rgb([0, 0, 0]),
                        PadMode::Edge => *image.get_pixel(u.min(w - 1), v.min(h - 1)),
                    }
                }
            });
            out.push((patch, (x, y)));
        }
    }
    out
}

/// Patches with the centroids they contain, translated into patch coordinates.
pub fn slice_patches(sample: &AnnotatedSample, spec: &SliceSpec) -> Vec<(AnnotatedSample, (u32, u32))> {
    let p = spec.patch_size as f64;
    slice_image(&sample.image, spec)
        .into_iter()
        .map(|(image, (x, y))| {
            let (x0, y0) = (x as f64, y as f64);
            let mut centroids = Vec::new();
            let mut classes = Vec::new();
            for (pt, &c) in sample.centroids.iter().zip(&sample.classes) {
                let (u, v) = (pt.u - x0, pt.v - y0);
                if (0.0..p).contains(&u) && (0.0..p).contains(&v) {
                    centroids.push(Point::new(u, v));
                    classes.push(c);
                }
            }
            let patch = AnnotatedSample {
                image,
                dataset_id: sample.dataset_id,
                centroids,
                classes,
            };
            (patch, (x, y))
        })
        .collect()
}

/// Greedy suppression: visit points by decreasing confidence (ties by
/// input order) and drop any within `radius` of one already kept.
pub fn dedup_by_radius(preds: &[Prediction], radius: f64) -> Vec<Prediction> {
    let mut order: Vec<usize> = (0..preds.len()).collect();
    order.sort_by(|&a, &b| preds[b].confidence.total_cmp(&preds[a].confidence).then(a.cmp(&b)));
    let mut kept: Vec<Prediction> = Vec::new();
    for i in order {
        let p = &preds[i];
        let near = kept
            .iter()
            .any(|k| (k.u - p.u).hypot(k.v - p.v) < radius);
        if !near {
            kept.push(*p);
        }
    }
    kept
}

/// Tiled prediction over a full image, merged across overlaps.
pub fn sliding_window_infer(
    model: &Model,
    image: &RgbImage,
    d: usize,
    spec: &SliceSpec,
    merge_radius: f64,
    threshold: f64,
) -> Result<Vec<Prediction>> {
    spec.validate()?;
    let (w, h) = (image.width() as f64, image.height() as f64);
    let mut all = Vec::new();
    for (patch, (x, y)) in slice_image(image, spec) {
        for mut p in model.predict(&patch, d, threshold)? {
            p.u += x as f64;
            p.v += y as f64;
            // Detections in the padding are outside the image.
            if p.u < w && p.v < h {
                all.push(p);
            }
        }
    }
    Ok(dedup_by_radius(&all, merge_radius))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(p: u32, overlap: f64) -> SliceSpec {
        SliceSpec {
            patch_size: p,
            overlap,
            pad_mode: PadMode::Zero,
        }
    }

    #[test]
    fn grid_arithmetic() {
        let s = spec(60, 1.0 / 3.0);
        assert_eq!(s.stride(), 40);
        assert_eq!(s.offsets(100), vec![0, 40]);
        assert_eq!(slice_image(&RgbImage::new(100, 100), &s).len(), 4);
        assert_eq!(spec(96, 0.25).offsets(96), vec![0]);
        assert_eq!(spec(96, 0.25).offsets(50), vec![0]);
    }

    #[test]
    fn edge_padding() {
        let img = RgbImage::from_pixel(10, 10, image::Rgb([9, 9, 9]));
        let zero = slice_image(&img, &spec(16, 0.0));
        assert_eq!(zero[0].0.get_pixel(12, 3), &image::Rgb([0, 0, 0]));
        let mut s = spec(16, 0.0);
        s.pad_mode = PadMode::Edge;
        assert_eq!(slice_image(&img, &s)[0].0.get_pixel(12, 3), &image::Rgb([9, 9, 9]));
    }

    #[test]
    fn dedup_keeps_strongest() {
        let p = |u: f64, c: f64| Prediction {
            u,
            v: 0.0,
            class: 0,
            confidence: c,
        };
        let out = dedup_by_radius(&[p(0.0, 0.5), p(1.0, 0.9), p(10.0, 0.4)], 3.0);
        assert_eq!(out.len(), 2);
        assert_eq!(out[0].u, 1.0);
    }
}

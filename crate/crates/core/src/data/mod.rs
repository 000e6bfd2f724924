//! Annotation files, manifests, augmentation, patch slicing and synthetic data.

mod augment;
mod slicing;
pub mod synth;

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::{validate_sample, AnnotatedSample, CategoryRegistry, Point};

pub use augment::{augment, crop, hflip, resize, vflip, AugmentConfig};
pub use slicing::{dedup_by_radius, sliding_window_infer, slice_image, slice_patches, PadMode, SliceSpec};
pub use synth::{synth_generate, SynthClass, SynthDataset, SynthSpec};

/// One annotation record as stored on disk. Coordinates are pixels with
/// `u` the column; `labels` are local class indices of `dataset`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnnotationRecord {
    /// Relative to the annotation file's directory.
    pub image_path: String,
    pub dataset: String,
    pub points: Vec<[f64; 2]>,
    pub labels: Vec<usize>,
}

pub fn read_records(path: &Path) -> Result<Vec<AnnotationRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let is_array = text.trim_start().starts_with('[');
    let parsed = if is_array {
        serde_json::from_str::<Vec<AnnotationRecord>>(&text)
    } else {
        serde_json::from_str::<AnnotationRecord>(&text).map(|r| vec![r])
    };
    parsed.map_err(|e| Error::json(path, e))
}

/// Writes records as a pretty-printed JSON array.
pub fn write_records(path: &Path, records: &[AnnotationRecord]) -> Result<()> {
    let text = serde_json::to_string_pretty(records).expect("records serialize");
    std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
}

impl AnnotationRecord {
    pub fn from_sample(sample: &AnnotatedSample, registry: &CategoryRegistry, image_path: &str) -> Result<Self> {
        Ok(Self {
            image_path: image_path.to_string(),
            dataset: registry.dataset(sample.dataset_id)?.name.clone(),
            points: sample.centroids.iter().map(|p| [p.u, p.v]).collect(),
            labels: sample.classes.clone(),
        })
    }

    /// Resolves the dataset, reads the image and validates the result.
    pub fn to_sample(&self, base: &Path, registry: &CategoryRegistry) -> Result<AnnotatedSample> {
        let dataset_id = registry.dataset_id(&self.dataset)?;
        let image_path = base.join(&self.image_path);
        let image = load_png(&image_path)?;
        let sample = AnnotatedSample {
            image,
            dataset_id,
            centroids: self.points.iter().map(|p| Point::new(p[0], p[1])).collect(),
            classes: self.labels.clone(),
        };
        let violations = validate_sample(&sample, registry);
        if !violations.is_empty() {
            let list: Vec<String> = violations.iter().map(|v| v.to_string()).collect();
            return Err(Error::Data(format!("{}: {}", image_path.display(), list.join("; "))));
        }
        Ok(sample)
    }
}

pub fn load_png(path: &Path) -> Result<image::RgbImage> {
    let is_png = path
        .extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| e.eq_ignore_ascii_case("png"));
    if !is_png {
        return Err(Error::Data(format!("{}: only PNG images are supported", path.display())));
    }
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let img = image::load_from_memory_with_format(&bytes, image::ImageFormat::Png)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(img.to_rgb8())
}

pub fn save_png(path: &Path, img: &image::RgbImage) -> Result<()> {
    let mut bytes = Vec::new();
    img.write_to(&mut std::io::Cursor::new(&mut bytes), image::ImageFormat::Png)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Loads every sample in an annotation file.
pub fn load_annotations(path: &Path, registry: &CategoryRegistry) -> Result<Vec<AnnotatedSample>> {
    let base = path.parent().unwrap_or(Path::new("."));
    read_records(path)?
        .iter()
        .map(|r| r.to_sample(base, registry))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub image: String,
    pub annotation: String,
}

/// Image/annotation pairs plus the registry they are labelled against.
/// Paths are relative to the manifest file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub registry: CategoryRegistry,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<(Self, PathBuf)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
        Ok((m, base))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).expect("manifest serializes");
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Loads all samples in entry order, checking each annotation points at
    /// the listed image.
    pub fn samples(&self, base: &Path) -> Result<Vec<AnnotatedSample>> {
        let mut out = Vec::new();
        for e in &self.entries {
            let ann = base.join(&e.annotation);
            let ann_dir = ann.parent().unwrap_or(base);
            for r in read_records(&ann)? {
                let listed = base.join(&e.image);
                let actual = ann_dir.join(&r.image_path);
                if normalize_path(&listed) != normalize_path(&actual) {
                    return Err(Error::Data(format!(
                        "{}: image_path {} does not match manifest image {}",
                        ann.display(),
                        actual.display(),
                        listed.display()
                    )));
                }
                out.push(r.to_sample(ann_dir, &self.registry)?);
            }
        }
        Ok(out)
    }
}

fn normalize_path(p: &Path) -> PathBuf {
    use std::path::Component;
    let mut out = PathBuf::new();
    for c in p.components() {
        match c {
            Component::CurDir => {}
            Component::ParentDir => {
                out.pop();
            }
            other => out.push(other.as_os_str()),
        }
    }
    out
}

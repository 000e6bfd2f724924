//! Synthetic nuclei: coloured, textured discs on a noisy background.

use std::path::Path;

use image::{Rgb, RgbImage};
use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{save_png, write_records, AnnotationRecord, Manifest, ManifestEntry};
use crate::error::{Error, Result};
use crate::registry::{AnnotatedSample, CategoryRegistry, DatasetDescriptor, Point};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Texture {
    Solid,
    /// Dark rim around a lighter core.
    Ring,
    /// Dark dots scattered inside the disc.
    Speckle,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthClass {
    pub name: String,
    pub color: [u8; 3],
    pub radius: [f64; 2],
    pub texture: Texture,
    #[serde(default = "one")]
    pub weight: f64,
}

fn one() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthDataset {
    pub name: String,
    pub image_size: u32,
    pub n_images: usize,
    /// Inclusive range of nuclei per image.
    pub nuclei: [usize; 2],
    /// Evaluation radius written to the registry.
    pub radius_px: f64,
    pub classes: Vec<SynthClass>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub seed: u64,
    pub datasets: Vec<SynthDataset>,
}

const BACKGROUND: [u8; 3] = [232, 220, 228];
const MIN_GAP: f64 = 2.0;
const PLACEMENT_TRIES: usize = 500;

impl SynthSpec {
    /// Two small datasets sharing the class "lymphocyte".
    pub fn toy(seed: u64, n_images: usize) -> Self {
        let class = |name: &str, color: [u8; 3], radius: [f64; 2], texture| SynthClass {
            name: name.into(),
            color,
            radius,
            texture,
            weight: 1.0,
        };
        let lymphocyte = class("lymphocyte", [40, 40, 150], [3.5, 4.5], Texture::Solid);
        Self {
            seed,
            datasets: vec![
                SynthDataset {
                    name: "synth-a".into(),
                    image_size: 96,
                    n_images,
                    nuclei: [4, 9],
                    radius_px: 6.0,
                    classes: vec![
                        class("tumor", [150, 50, 170], [5.0, 6.5], Texture::Solid),
                        lymphocyte.clone(),
                        class("stroma", [200, 120, 40], [4.0, 5.5], Texture::Ring),
                    ],
                },
                SynthDataset {
                    name: "synth-b".into(),
                    image_size: 96,
                    n_images,
                    nuclei: [4, 9],
                    radius_px: 6.0,
                    classes: vec![
                        lymphocyte,
                        class("plasma", [30, 150, 150], [4.0, 5.5], Texture::Solid),
                        class("neutrophil", [60, 160, 60], [4.5, 6.0], Texture::Speckle),
                        class("eosinophil", [210, 40, 40], [4.0, 5.5], Texture::Solid),
                    ],
                },
            ],
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.datasets.is_empty() {
            return Err(Error::Config("synth spec has no datasets".into()));
        }
        for ds in &self.datasets {
            let bad = |msg: &str| Err(Error::Config(format!("synth dataset {}: {msg}", ds.name)));
            if ds.classes.is_empty() {
                return bad("no classes");
            }
            if ds.nuclei[0] > ds.nuclei[1] {
                return bad("nuclei range is empty");
            }
            if ds.image_size < 8 {
                return bad("image_size must be >= 8");
            }
            for c in &ds.classes {
                if !(c.radius[0] > 0.0 && c.radius[0] <= c.radius[1]) {
                    return bad(&format!("class {} has an invalid radius range", c.name));
                }
                if 2.0 * c.radius[1] + 2.0 >= ds.image_size as f64 {
                    return bad(&format!("class {} does not fit the image", c.name));
                }
                if !(c.weight >= 0.0) {
                    return bad(&format!("class {} has a negative weight", c.name));
                }
            }
            if ds.classes.iter().all(|c| c.weight == 0.0) {
                return bad("all class weights are zero");
            }
        }
        Ok(())
    }

    pub fn registry(&self) -> Result<CategoryRegistry> {
        CategoryRegistry::build(
            self.datasets
                .iter()
                .map(|ds| {
                    let names: Vec<&str> = ds.classes.iter().map(|c| c.name.as_str()).collect();
                    DatasetDescriptor::new(&ds.name, &names, ds.radius_px)
                })
                .collect(),
        )
    }
}

struct Blob {
    center: Point,
    radius: f64,
    class: usize,
}

fn pick_class<R: Rng>(classes: &[SynthClass], rng: &mut R) -> usize {
    let total: f64 = classes.iter().map(|c| c.weight).sum();
    let mut x = rng.gen::<f64>() * total;
    for (i, c) in classes.iter().enumerate() {
        if x < c.weight {
            return i;
        }
        x -= c.weight;
    }
    classes.iter().rposition(|c| c.weight > 0.0).unwrap_or(0)
}

fn place<R: Rng>(ds: &SynthDataset, rng: &mut R) -> Result<Vec<Blob>> {
    let n = rng.gen_range(ds.nuclei[0]..=ds.nuclei[1]);
    let size = ds.image_size as f64;
    let mut blobs: Vec<Blob> = Vec::with_capacity(n);
    for _ in 0..n {
        let class = pick_class(&ds.classes, rng);
        let [lo, hi] = ds.classes[class].radius;
        let radius = if lo == hi { lo } else { rng.gen_range(lo..hi) };
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            // Integer centres keep the blob symmetric about its annotation.
            let u = rng.gen_range(radius.ceil()..size - radius.ceil() - 1.0).round();
            let v = rng.gen_range(radius.ceil()..size - radius.ceil() - 1.0).round();
            let c = Point::new(u, v);
            if blobs.iter().all(|b| b.center.dist(&c) >= b.radius + radius + MIN_GAP) {
                blobs.push(Blob {
                    center: c,
                    radius,
                    class,
                });
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Data(format!(
                "synth dataset {}: cannot place {n} non-overlapping nuclei in {}x{} after {PLACEMENT_TRIES} tries",
                ds.name, ds.image_size, ds.image_size
            )));
        }
    }
    Ok(blobs)
}

fn jitter<R: Rng>(c: u8, amount: i32, rng: &mut R) -> u8 {
    (c as i32 + rng.gen_range(-amount..=amount)).clamp(0, 255) as u8
}

fn render<R: Rng>(ds: &SynthDataset, blobs: &[Blob], rng: &mut R) -> RgbImage {
    let s = ds.image_size;
    let mut img = RgbImage::from_fn(s, s, |_, _| Rgb(BACKGROUND));
    for px in img.pixels_mut() {
        for ch in px.0.iter_mut() {
            *ch = jitter(*ch, 8, rng);
        }
    }
    for b in blobs {
        let spec = &ds.classes[b.class];
        let r = b.radius;
        let (u0, v0) = (b.center.u, b.center.v);
        let lo_u = (u0 - r).floor().max(0.0) as u32;
        let hi_u = ((u0 + r).ceil() as u32).min(s - 1);
        let lo_v = (v0 - r).floor().max(0.0) as u32;
        let hi_v = ((v0 + r).ceil() as u32).min(s - 1);
        for v in lo_v..=hi_v {
            for u in lo_u..=hi_u {
                let d = (u as f64 - u0).hypot(v as f64 - v0);
                if d > r {
                    continue;
                }
                let base = spec.color;
                let shade = match spec.texture {
                    Texture::Solid => 1.0,
                    Texture::Ring => {
                        if d > r - 1.5 {
                            0.55
                        } else {
                            1.15
                        }
                    }
                    Texture::Speckle => {
                        // The centre pixel stays clean so the annotation samples the class colour.
                        if d >= 1.0 && rng.gen_bool(0.25) {
                            0.5
                        } else {
                            1.0
                        }
                    }
                };
                let px = base.map(|c| ((c as f64 * shade).min(255.0)) as u8);
                img.put_pixel(u, v, Rgb(px.map(|c| jitter(c, 10, rng))));
            }
        }
    }
    img
}

/// In-memory samples in dataset order, then image order.
pub fn synth_samples(spec: &SynthSpec) -> Result<(CategoryRegistry, Vec<AnnotatedSample>)> {
    spec.validate()?;
    let registry = spec.registry()?;
    let mut samples = Vec::new();
    for (d, ds) in spec.datasets.iter().enumerate() {
        for i in 0..ds.n_images {
            let mut rng = stream(spec.seed, &[d as u64, i as u64]);
            let blobs = place(ds, &mut rng)?;
            let image = render(ds, &blobs, &mut rng);
            samples.push(AnnotatedSample {
                image,
                dataset_id: d,
                centroids: blobs.iter().map(|b| b.center).collect(),
                classes: blobs.iter().map(|b| b.class).collect(),
            });
        }
    }
    Ok((registry, samples))
}

/// Writes `<dataset>/<index>.png` and `.json` for every image plus
/// `registry.json` and `manifest.json` under `out_dir`.
pub fn synth_generate(spec: &SynthSpec, out_dir: &Path) -> Result<Manifest> {
    let (registry, samples) = synth_samples(spec)?;
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut entries = Vec::with_capacity(samples.len());
    let mut counters = vec![0usize; registry.num_datasets()];
    for s in &samples {
        let d = s.dataset_id;
        let name = &registry.dataset(d)?.name;
        let dir = out_dir.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        let stem = format!("{:04}", counters[d]);
        counters[d] += 1;
        let png = format!("{stem}.png");
        save_png(&dir.join(&png), &s.image)?;
        let record = AnnotationRecord::from_sample(s, &registry, &png)?;
        write_records(&dir.join(format!("{stem}.json")), &[record])?;
        entries.push(ManifestEntry {
            image: format!("{name}/{png}"),
            annotation: format!("{name}/{stem}.json"),
        });
    }
    let registry_path = out_dir.join("registry.json");
    std::fs::write(&registry_path, registry.to_json() + "\n").map_err(|e| Error::io(&registry_path, e))?;
    let manifest = Manifest { registry, entries };
    manifest.save(&out_dir.join("manifest.json"))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shared_class_merges() {
        let reg = SynthSpec::toy(0, 0).registry().unwrap();
        assert_eq!(reg.num_categories(), 3 + 4 - 1);
    }

    #[test]
    fn blob_centres_carry_class_colour() {
        let spec = SynthSpec::toy(5, 3);
        let (_, samples) = synth_samples(&spec).unwrap();
        for s in &samples {
            let ds = &spec.datasets[s.dataset_id];
            for (p, &c) in s.centroids.iter().zip(&s.classes) {
                let px = s.image.get_pixel(p.u as u32, p.v as u32).0;
                let want = ds.classes[c].color;
                let err: i32 = px.iter().zip(want).map(|(&a, b)| (a as i32 - b as i32).abs()).max().unwrap();
                // Core shading brightens by at most 15%, plus pixel noise.
                assert!(err <= 10 + 40, "{px:?} vs {want:?}");
            }
        }
    }

    #[test]
    fn infeasible_packing_errors() {
        let mut spec = SynthSpec::toy(0, 1);
        spec.datasets[0].nuclei = [400, 400];
        assert!(synth_samples(&spec).is_err());
    }

    #[test]
    fn zero_images_gives_empty_manifest() {
        let dir = tempfile::tempdir().unwrap();
        let m = synth_generate(&SynthSpec::toy(0, 0), dir.path()).unwrap();
        assert!(m.entries.is_empty());
    }
}

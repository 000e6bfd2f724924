//! Multi-dataset category model.
//!
//! Every dataset annotates its own subset of nucleus types. The registry
//! builds the union category space over all datasets, the per-dataset
//! visibility sets, and the local/global class maps used by the heads, the
//! prompt module and the evaluator.

use std::collections::{BTreeSet, HashMap};
use std::path::Path;
use std::sync::OnceLock;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

const SYNONYMS: &str = include_str!("../data/synonyms.tsv");

fn synonym_table() -> &'static HashMap<String, String> {
    static TABLE: OnceLock<HashMap<String, String>> = OnceLock::new();
    TABLE.get_or_init(|| {
        SYNONYMS
            .lines()
            .map(str::trim)
            .filter(|l| !l.is_empty() && !l.starts_with('#'))
            .filter_map(|l| {
                let (alias, canon) = l.split_once('\t')?;
                Some((alias.trim().to_string(), canon.trim().to_string()))
            })
            .collect()
    })
}

/// Lowercase, trim, collapse inner whitespace and map through the synonym table.
pub fn canonical_name(name: &str) -> String {
    let folded = name
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
        .to_lowercase();
    match synonym_table().get(&folded) {
        Some(canon) => canon.clone(),
        None => folded,
    }
}

fn default_weight() -> f64 {
    1.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetDescriptor {
    /// Position in the registry; assigned by [`CategoryRegistry::build`].
    #[serde(default)]
    pub id: usize,
    pub name: String,
    pub category_names: Vec<String>,
    /// Matching radius for evaluation, in pixels.
    pub radius_px: f64,
    #[serde(default = "default_weight")]
    pub loss_weight: f64,
}

impl DatasetDescriptor {
    pub fn new(name: &str, categories: &[&str], radius_px: f64) -> Self {
        Self {
            id: 0,
            name: name.to_string(),
            category_names: categories.iter().map(|c| c.to_string()).collect(),
            radius_px,
            loss_weight: 1.0,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.category_names.len()
    }

    pub fn consep() -> Self {
        Self::new("CoNSeP", &["inflammatory", "epithelial", "stromal"], 6.0)
    }

    pub fn monusac() -> Self {
        Self::new(
            "MoNuSAC",
            &["epithelial", "lymphocyte", "neutrophil", "macrophage"],
            6.0,
        )
    }

    pub fn lizard() -> Self {
        Self::new(
            "Lizard",
            &[
                "epithelial",
                "connective",
                "lymphocyte",
                "plasma",
                "neutrophil",
                "eosinophil",
            ],
            6.0,
        )
    }

    pub fn ocelot() -> Self {
        Self::new("OCELOT", &["background-cell", "tumor-cell"], 15.0)
    }

    /// The four public pathology benchmarks in their usual order.
    pub fn pathology_presets() -> Vec<Self> {
        vec![Self::consep(), Self::monusac(), Self::lizard(), Self::ocelot()]
    }
}

#[derive(Debug, Serialize, Deserialize)]
struct RegistryDoc {
    datasets: Vec<DatasetDescriptor>,
    #[serde(default)]
    global_names: Vec<String>,
}

/// Union category space over a list of datasets. Immutable once built.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RegistryDoc", into = "RegistryDoc")]
pub struct CategoryRegistry {
    datasets: Vec<DatasetDescriptor>,
    global_names: Vec<String>,
    visible: Vec<Vec<usize>>,
    local_to_global: Vec<Vec<usize>>,
}

impl TryFrom<RegistryDoc> for CategoryRegistry {
    type Error = Error;

    fn try_from(doc: RegistryDoc) -> Result<Self> {
        let reg = CategoryRegistry::build(doc.datasets)?;
        if !doc.global_names.is_empty() && doc.global_names != reg.global_names {
            return Err(Error::Registry(format!(
                "stored global order {:?} disagrees with the one rebuilt from datasets {:?}",
                doc.global_names, reg.global_names
            )));
        }
        Ok(reg)
    }
}

impl From<CategoryRegistry> for RegistryDoc {
    fn from(reg: CategoryRegistry) -> Self {
        RegistryDoc {
            datasets: reg.datasets,
            global_names: reg.global_names,
        }
    }
}

impl CategoryRegistry {
    /// Builds the registry. Global category order is first-seen order over
    /// the descriptor list after name normalization.
    pub fn build(descriptors: Vec<DatasetDescriptor>) -> Result<Self> {
        if descriptors.is_empty() {
            return Err(Error::Registry("no datasets given".into()));
        }
        let mut seen_names = BTreeSet::new();
        let mut global_names: Vec<String> = Vec::new();
        let mut index_of: HashMap<String, usize> = HashMap::new();
        let mut datasets = Vec::with_capacity(descriptors.len());
        let mut visible = Vec::with_capacity(descriptors.len());
        let mut local_to_global = Vec::with_capacity(descriptors.len());

        for (id, mut desc) in descriptors.into_iter().enumerate() {
            if !seen_names.insert(desc.name.to_lowercase()) {
                return Err(Error::Registry(format!(
                    "duplicate dataset name `{}`",
                    desc.name
                )));
            }
            if desc.category_names.is_empty() {
                return Err(Error::Registry(format!(
                    "dataset `{}` has an empty category list",
                    desc.name
                )));
            }
            if !(desc.radius_px > 0.0) || !desc.radius_px.is_finite() {
                return Err(Error::Registry(format!(
                    "dataset `{}`: radius must be positive, got {}",
                    desc.name, desc.radius_px
                )));
            }
            if !(desc.loss_weight >= 0.0) || !desc.loss_weight.is_finite() {
                return Err(Error::Registry(format!(
                    "dataset `{}`: loss weight must be >= 0, got {}",
                    desc.name, desc.loss_weight
                )));
            }
            desc.id = id;
            desc.category_names = desc
                .category_names
                .iter()
                .map(|c| canonical_name(c))
                .collect();
            let mut map = Vec::with_capacity(desc.category_names.len());
            for name in &desc.category_names {
                if name.is_empty() {
                    return Err(Error::Registry(format!(
                        "dataset `{}` has an empty category name",
                        desc.name
                    )));
                }
                let g = *index_of.entry(name.clone()).or_insert_with(|| {
                    global_names.push(name.clone());
                    global_names.len() - 1
                });
                if map.contains(&g) {
                    return Err(Error::Registry(format!(
                        "dataset `{}` lists category `{}` twice",
                        desc.name, name
                    )));
                }
                map.push(g);
            }
            let mut vis = map.clone();
            vis.sort_unstable();
            visible.push(vis);
            local_to_global.push(map);
            datasets.push(desc);
        }

        Ok(Self {
            datasets,
            global_names,
            visible,
            local_to_global,
        })
    }

    pub fn presets() -> Self {
        Self::build(DatasetDescriptor::pathology_presets()).expect("presets are valid")
    }

    pub fn num_datasets(&self) -> usize {
        self.datasets.len()
    }

    pub fn num_categories(&self) -> usize {
        self.global_names.len()
    }

    pub fn datasets(&self) -> &[DatasetDescriptor] {
        &self.datasets
    }

    pub fn dataset(&self, d: usize) -> Result<&DatasetDescriptor> {
        self.datasets.get(d).ok_or_else(|| {
            Error::OutOfRange(format!(
                "dataset id {d} (registry has {})",
                self.datasets.len()
            ))
        })
    }

    pub fn dataset_id(&self, name: &str) -> Result<usize> {
        self.datasets
            .iter()
            .position(|d| d.name.eq_ignore_ascii_case(name))
            .ok_or_else(|| Error::UnknownDataset {
                name: name.to_string(),
                known: self
                    .datasets
                    .iter()
                    .map(|d| d.name.as_str())
                    .collect::<Vec<_>>()
                    .join(", "),
            })
    }

    pub fn global_names(&self) -> &[String] {
        &self.global_names
    }

    /// Sorted global indices annotated by dataset `d` (the set I_d).
    pub fn visible(&self, d: usize) -> &[usize] {
        &self.visible[d]
    }

    /// Number of classes t_d of dataset `d`.
    pub fn num_classes(&self, d: usize) -> usize {
        self.local_to_global[d].len()
    }

    pub fn local_to_global(&self, d: usize, c: usize) -> Result<usize> {
        let map = self
            .local_to_global
            .get(d)
            .ok_or_else(|| Error::OutOfRange(format!("dataset id {d}")))?;
        map.get(c).copied().ok_or_else(|| {
            Error::OutOfRange(format!(
                "class {c} of dataset `{}` (t_d = {})",
                self.datasets[d].name,
                map.len()
            ))
        })
    }

    pub fn global_to_local(&self, d: usize, g: usize) -> Option<usize> {
        self.local_to_global.get(d)?.iter().position(|&x| x == g)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("registry serializes")
    }
}

/// A nucleus centroid in pixel coordinates; `u` is the column, `v` the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub u: f64,
    pub v: f64,
}

impl Point {
    pub fn new(u: f64, v: f64) -> Self {
        Self { u, v }
    }

    pub fn dist(&self, other: &Point) -> f64 {
        (self.u - other.u).hypot(self.v - other.v)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub image: RgbImage,
    pub dataset_id: usize,
    pub centroids: Vec<Point>,
    /// Local class indices in `[0, t_d)`.
    pub classes: Vec<usize>,
}

impl AnnotatedSample {
    pub fn width(&self) -> u32 {
        self.image.width()
    }

    pub fn height(&self) -> u32 {
        self.image.height()
    }

    pub fn len(&self) -> usize {
        self.centroids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centroids.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    UnknownDataset(usize),
    LengthMismatch { centroids: usize, classes: usize },
    OutOfBounds { index: usize, point: Point },
    ClassOutOfRange { index: usize, class: usize, num_classes: usize },
}

impl std::fmt::Display for Violation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Violation::UnknownDataset(d) => write!(f, "unknown dataset id {d}"),
            Violation::LengthMismatch { centroids, classes } => write!(
                f,
                "{centroids} centroids but {classes} class labels"
            ),
            Violation::OutOfBounds { index, point } => write!(
                f,
                "centroid {index} at ({}, {}) lies outside the image",
                point.u, point.v
            ),
            Violation::ClassOutOfRange {
                index,
                class,
                num_classes,
            } => write!(
                f,
                "label {index} has class {class}, expected < {num_classes}"
            ),
        }
    }
}

/// Checks a sample against the registry. Data problems are reported, never raised.
pub fn validate_sample(sample: &AnnotatedSample, registry: &CategoryRegistry) -> Vec<Violation> {
    let mut out = Vec::new();
    if sample.dataset_id >= registry.num_datasets() {
        out.push(Violation::UnknownDataset(sample.dataset_id));
    }
    if sample.centroids.len() != sample.classes.len() {
        out.push(Violation::LengthMismatch {
            centroids: sample.centroids.len(),
            classes: sample.classes.len(),
        });
    }
    let (w, h) = (sample.width() as f64, sample.height() as f64);
    for (index, p) in sample.centroids.iter().enumerate() {
        let inside = p.u >= 0.0 && p.u < w && p.v >= 0.0 && p.v < h;
        if !inside {
            out.push(Violation::OutOfBounds { index, point: *p });
        }
    }
    if sample.dataset_id < registry.num_datasets() {
        let t = registry.num_classes(sample.dataset_id);
        for (index, &class) in sample.classes.iter().enumerate() {
            if class >= t {
                out.push(Violation::ClassOutOfRange {
                    index,
                    class,
                    num_classes: t,
                });
            }
        }
    }
    out
}

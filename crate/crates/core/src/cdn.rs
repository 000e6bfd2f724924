//! Contrastive denoising queries built from shifted ground-truth centroids.
//!
//! Positives are shifted by less than `lambda1` per axis and must
//! reconstruct their ground truth; negatives are shifted by between
//! `lambda1` and `lambda2` and must predict "no object".

use candle_core::Tensor;
use rand::distributions::{Distribution, Open01};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::MASK_VALUE;
use crate::registry::Point;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NoiseConfig {
    pub enabled: bool,
    /// Positive shift bound, pixels.
    pub lambda1: f64,
    /// Negative shift bound, pixels.
    pub lambda2: f64,
    /// Label flip probability.
    pub gamma: f64,
    pub n_groups: usize,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            lambda1: 4.0,
            lambda2: 8.0,
            gamma: 0.2,
            n_groups: 5,
        }
    }
}

impl NoiseConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda1 > 0.0 && self.lambda1 < self.lambda2 && self.lambda2.is_finite()) {
            return Err(Error::Config(format!(
                "cdn needs 0 < lambda1 < lambda2, got {} and {}",
                self.lambda1, self.lambda2
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!("cdn.gamma = {} not in [0, 1]", self.gamma)));
        }
        if self.n_groups == 0 {
            return Err(Error::Config("cdn.n_groups must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedPoint {
    pub point: Point,
    pub class: usize,
    /// Index of the ground truth this copy was made from.
    pub gt_index: usize,
    /// Shift before clamping to the image.
    pub offset: (f64, f64),
    pub clamped: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoisedGroup {
    pub positives: Vec<NoisedPoint>,
    pub negatives: Vec<NoisedPoint>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct NoisedAnnotationSet {
    pub groups: Vec<NoisedGroup>,
}

impl NoisedAnnotationSet {
    pub fn is_empty(&self) -> bool {
        self.groups.iter().all(|g| g.positives.is_empty())
    }

    pub fn clamp_count(&self) -> usize {
        self.groups
            .iter()
            .flat_map(|g| g.positives.iter().chain(&g.negatives))
            .filter(|p| p.clamped)
            .count()
    }

    pub fn per_group(&self) -> usize {
        self.groups.first().map_or(0, |g| g.positives.len() + g.negatives.len())
    }

    /// All copies in query order: per group, positives then negatives.
    pub fn queries(&self) -> impl Iterator<Item = &NoisedPoint> {
        self.groups
            .iter()
            .flat_map(|g| g.positives.iter().chain(&g.negatives))
    }
}

fn signed<R: Rng>(rng: &mut R, magnitude: f64) -> f64 {
    if rng.gen_bool(0.5) {
        magnitude
    } else {
        -magnitude
    }
}

/// Switches `class` to a uniformly chosen different class with probability
/// `gamma`. A single-class dataset has nothing to switch to.
fn random_flip<R: Rng>(rng: &mut R, class: usize, num_classes: usize, gamma: f64) -> usize {
    if num_classes < 2 || !rng.gen_bool(gamma) {
        return class;
    }
    let other = rng.gen_range(0..num_classes - 1);
    if other >= class {
        other + 1
    } else {
        other
    }
}

/// Draws `n_groups` positive/negative copies of every ground truth.
/// Returns an empty set when the image has no annotation.
pub fn gen_noised_annotations<R: Rng>(
    points: &[Point],
    classes: &[usize],
    num_classes: usize,
    image_size: (f64, f64),
    cfg: &NoiseConfig,
    rng: &mut R,
) -> Result<NoisedAnnotationSet> {
    cfg.validate()?;
    if points.len() != classes.len() {
        return Err(Error::Data("points and classes differ in length".into()));
    }
    if points.is_empty() {
        return Ok(NoisedAnnotationSet::default());
    }
    let (w, h) = image_size;
    let clamp = |p: Point| -> (Point, bool) {
        let u = p.u.clamp(0.0, w - 1e-6);
        let v = p.v.clamp(0.0, h - 1e-6);
        (Point::new(u, v), u != p.u || v != p.v)
    };
    let mut groups = Vec::with_capacity(cfg.n_groups);
    for _ in 0..cfg.n_groups {
        let mut group = NoisedGroup::default();
        for (j, (p, &c)) in points.iter().zip(classes).enumerate() {
            let mag_u: f64 = Open01.sample(rng);
            let mag_v: f64 = Open01.sample(rng);
            let du = signed(rng, cfg.lambda1 * mag_u);
            let dv = signed(rng, cfg.lambda1 * mag_v);
            let (point, clamped) = clamp(Point::new(p.u + du, p.v + dv));
            let class = random_flip(rng, c, num_classes, cfg.gamma);
            group.positives.push(NoisedPoint {
                point,
                class,
                gt_index: j,
                offset: (du, dv),
                clamped,
            });
        }
        let span = cfg.lambda2 - cfg.lambda1;
        for (j, (p, &c)) in points.iter().zip(classes).enumerate() {
            let mag_u: f64 = Open01.sample(rng);
            let mag_v: f64 = Open01.sample(rng);
            let du = signed(rng, cfg.lambda1 + span * mag_u);
            let dv = signed(rng, cfg.lambda1 + span * mag_v);
            let (point, clamped) = clamp(Point::new(p.u + du, p.v + dv));
            let class = random_flip(rng, c, num_classes, cfg.gamma);
            group.negatives.push(NoisedPoint {
                point,
                class,
                gt_index: j,
                offset: (du, dv),
                clamped,
            });
        }
        groups.push(group);
    }
    Ok(NoisedAnnotationSet { groups })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum QueryKind {
    Content,
    CdnPositive,
    CdnNegative,
}

/// Decoder queries: content vectors plus normalized reference points.
#[derive(Debug, Clone)]
pub struct QuerySet {
    pub content: Tensor,
    pub reference_points: Vec<[f64; 2]>,
    pub kinds: Vec<QueryKind>,
    pub groups: Vec<Option<usize>>,
}

impl QuerySet {
    pub fn len(&self) -> usize {
        self.reference_points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.reference_points.is_empty()
    }
}

/// Normalized coordinate of a pixel-centred position.
pub fn normalize(p: &Point, size: (f64, f64)) -> [f64; 2] {
    [(p.u + 0.5) / size.0, (p.v + 0.5) / size.1]
}

pub fn denormalize(x: [f64; 2], size: (f64, f64)) -> Point {
    Point::new(x[0] * size.0 - 0.5, x[1] * size.1 - 0.5)
}

/// Embeds noised copies as queries using the dataset's label table
/// `(t_d + 1, E)`.
pub fn embed_cdn_queries(
    noised: &NoisedAnnotationSet,
    label_table: &Tensor,
    image_size: (f64, f64),
) -> Result<QuerySet> {
    let mut ids = Vec::new();
    let mut refs = Vec::new();
    let mut kinds = Vec::new();
    let mut groups = Vec::new();
    for (g, group) in noised.groups.iter().enumerate() {
        for (kind, list) in [
            (QueryKind::CdnPositive, &group.positives),
            (QueryKind::CdnNegative, &group.negatives),
        ] {
            for p in list {
                ids.push(p.class as u32);
                refs.push(normalize(&p.point, image_size));
                kinds.push(kind);
                groups.push(Some(g));
            }
        }
    }
    let content = if ids.is_empty() {
        let dim = label_table.dim(1)?;
        Tensor::zeros((0, dim), label_table.dtype(), label_table.device())?
    } else {
        let idx = Tensor::from_vec(ids.clone(), ids.len(), label_table.device())?;
        label_table.index_select(&idx, 0)?
    };
    Ok(QuerySet {
        content,
        reference_points: refs,
        kinds,
        groups,
    })
}

/// Additive self-attention mask over `[cdn groups..., content]` queries:
/// each denoising group sees only itself and content queries see only each
/// other. Row-major `n x n`.
pub fn cdn_group_mask(per_group: usize, n_groups: usize, n_content: usize) -> Vec<f64> {
    let n_cdn = per_group * n_groups;
    let n = n_cdn + n_content;
    let block = |i: usize| {
        if i < n_cdn {
            i / per_group
        } else {
            n_groups
        }
    };
    let mut mask = vec![MASK_VALUE; n * n];
    for i in 0..n {
        for j in 0..n {
            if block(i) == block(j) {
                mask[i * n + j] = 0.0;
            }
        }
    }
    mask
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn cfg(gamma: f64) -> NoiseConfig {
        NoiseConfig {
            lambda1: 2.0,
            lambda2: 4.0,
            gamma,
            n_groups: 3,
            ..Default::default()
        }
    }

    #[test]
    fn no_flip_keeps_labels() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let pts = vec![Point::new(10.0, 10.0); 20];
        let cls: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let s = gen_noised_annotations(&pts, &cls, 3, (64.0, 64.0), &cfg(0.0), &mut rng).unwrap();
        for q in s.queries() {
            assert_eq!(q.class, cls[q.gt_index]);
        }
    }

    #[test]
    fn forced_flip_changes_every_label() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let pts = vec![Point::new(10.0, 10.0); 20];
        let cls: Vec<usize> = (0..20).map(|i| i % 3).collect();
        let s = gen_noised_annotations(&pts, &cls, 3, (64.0, 64.0), &cfg(1.0), &mut rng).unwrap();
        for q in s.queries() {
            assert_ne!(q.class, cls[q.gt_index]);
            assert!(q.class < 3);
        }
    }

    #[test]
    fn empty_image_has_no_queries() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let s = gen_noised_annotations(&[], &[], 3, (64.0, 64.0), &cfg(0.2), &mut rng).unwrap();
        assert!(s.is_empty());
        assert_eq!(s.per_group(), 0);
    }

    #[test]
    fn invalid_config() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let bad = NoiseConfig {
            lambda1: 4.0,
            lambda2: 4.0,
            ..Default::default()
        };
        assert!(gen_noised_annotations(&[], &[], 1, (8.0, 8.0), &bad, &mut rng).is_err());
    }

    #[test]
    fn group_mask_blocks() {
        let m = cdn_group_mask(2, 1, 3);
        let n = 5;
        for i in 0..n {
            let row = &m[i * n..(i + 1) * n];
            assert!(row.contains(&0.0));
            for (j, &v) in row.iter().enumerate() {
                let same = (i < 2) == (j < 2);
                assert_eq!(v == 0.0, same);
            }
        }
    }

    #[test]
    fn query_count() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let pts = vec![Point::new(5.0, 5.0), Point::new(20.0, 9.0), Point::new(30.0, 30.0)];
        let c = NoiseConfig {
            n_groups: 2,
            gamma: 0.0,
            ..Default::default()
        };
        let s = gen_noised_annotations(&pts, &[0, 1, 0], 2, (64.0, 64.0), &c, &mut rng).unwrap();
        let table = Tensor::randn(0f32, 1.0, (3, 8), &candle_core::Device::Cpu).unwrap();
        let q = embed_cdn_queries(&s, &table, (64.0, 64.0)).unwrap();
        assert_eq!(q.len(), 12);
        assert_eq!(q.content.dims(), &[12, 8]);
        let rows = q.content.to_vec2::<f32>().unwrap();
        // positive and negative copies of gt 0 in group 0 share the class row
        assert_eq!(rows[0], rows[3]);
    }
}

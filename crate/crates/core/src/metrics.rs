//! Centroid detection and classification F-scores.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::match_within_radius;
use crate::registry::{CategoryRegistry, Point};

/// A predicted nucleus: pixel position, local class index and confidence.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub u: f64,
    pub v: f64,
    pub class: usize,
    pub confidence: f64,
}

impl Prediction {
    pub fn point(&self) -> Point {
        Point::new(self.u, self.v)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DetectionCounts {
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl std::ops::AddAssign for DetectionCounts {
    fn add_assign(&mut self, o: Self) {
        self.tp += o.tp;
        self.fp += o.fp;
        self.fn_ += o.fn_;
    }
}

/// Per-class outcome triples over matched pairs.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassCounts {
    pub tp: Vec<u64>,
    pub fp: Vec<u64>,
    #[serde(rename = "fn")]
    pub fn_: Vec<u64>,
}

impl ClassCounts {
    pub fn zeros(k: usize) -> Self {
        Self {
            tp: vec![0; k],
            fp: vec![0; k],
            fn_: vec![0; k],
        }
    }

    pub fn num_classes(&self) -> usize {
        self.tp.len()
    }

    fn add(&mut self, o: &ClassCounts) {
        for k in 0..self.tp.len() {
            self.tp[k] += o.tp[k];
            self.fp[k] += o.fp[k];
            self.fn_[k] += o.fn_[k];
        }
    }
}

/// `2TP / (2TP + FP + FN)`; an image pair with nothing predicted and
/// nothing annotated counts as perfect agreement.
pub fn detection_fscore(c: &DetectionCounts) -> f64 {
    let denom = 2 * c.tp + c.fp + c.fn_;
    if denom == 0 {
        1.0
    } else {
        (2 * c.tp) as f64 / denom as f64
    }
}

/// Splits matched pairs `(pred_class, gt_class)` into per-class triples.
pub fn classify_matches(pairs: &[(usize, usize)], k: usize) -> Result<ClassCounts> {
    let mut cc = ClassCounts::zeros(k);
    for &(pred, gt) in pairs {
        if pred >= k || gt >= k {
            return Err(Error::OutOfRange(format!(
                "class pair ({pred}, {gt}) with K = {k}"
            )));
        }
        if pred == gt {
            cc.tp[pred] += 1;
        } else {
            cc.fp[pred] += 1;
            cc.fn_[gt] += 1;
        }
    }
    Ok(cc)
}

/// `2TP_c / (2(TP_c + FP_c + FN_c) + FP_d + FN_d)` for class `k`.
pub fn classification_fscore(k: usize, cc: &ClassCounts, dc: &DetectionCounts) -> f64 {
    let num = 2 * cc.tp[k];
    let denom = 2 * (cc.tp[k] + cc.fp[k] + cc.fn_[k]) + dc.fp + dc.fn_;
    if num == 0 {
        0.0
    } else {
        num as f64 / denom as f64
    }
}

/// How per-class scores are folded into a single number.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassAggregation {
    #[default]
    Mean,
    /// Unnormalized sum over classes.
    Sum,
}

pub fn aggregate_classification(scores: &[f64], how: ClassAggregation) -> f64 {
    let sum: f64 = scores.iter().sum();
    match how {
        ClassAggregation::Sum => sum,
        ClassAggregation::Mean if scores.is_empty() => 0.0,
        ClassAggregation::Mean => sum / scores.len() as f64,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassScore {
    pub name: String,
    pub global_index: usize,
    pub tp: u64,
    pub fp: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
    pub f_c: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub dataset: String,
    pub radius_px: f64,
    pub images: usize,
    pub detection: DetectionCounts,
    pub f_d: f64,
    pub classes: Vec<ClassScore>,
    pub mean_f_c: f64,
}

impl EvalReport {
    pub fn class_scores(&self) -> Vec<f64> {
        self.classes.iter().map(|c| c.f_c).collect()
    }

    /// CSV rows, one per class, with a header line.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("dataset,class,tp_c,fp_c,fn_c,f_c,f_d,mean_f_c\n");
        for c in &self.classes {
            out.push_str(&format!(
                "{},{},{},{},{},{:.6},{:.6},{:.6}\n",
                self.dataset, c.name, c.tp, c.fp, c.fn_, c.f_c, self.f_d, self.mean_f_c
            ));
        }
        out
    }
}

/// Accumulates counts over the images of one dataset. Scores are computed
/// from the pooled counts.
#[derive(Debug, Clone)]
pub struct EvalAccumulator {
    dataset_id: usize,
    radius: f64,
    images: usize,
    det: DetectionCounts,
    cls: ClassCounts,
}

impl EvalAccumulator {
    pub fn new(registry: &CategoryRegistry, dataset_id: usize) -> Result<Self> {
        let desc = registry.dataset(dataset_id)?;
        Ok(Self {
            dataset_id,
            radius: desc.radius_px,
            images: 0,
            det: DetectionCounts::default(),
            cls: ClassCounts::zeros(desc.num_classes()),
        })
    }

    /// Adds one image; `gts` carry local class indices.
    pub fn add_image(&mut self, preds: &[Prediction], gts: &[(Point, usize)]) -> Result<()> {
        let pred_pts: Vec<Point> = preds.iter().map(Prediction::point).collect();
        let gt_pts: Vec<Point> = gts.iter().map(|g| g.0).collect();
        let m = match_within_radius(&pred_pts, &gt_pts, self.radius);
        let det = DetectionCounts {
            tp: m.pairs.len() as u64,
            fp: m.false_positives.len() as u64,
            fn_: m.false_negatives.len() as u64,
        };
        let class_pairs: Vec<(usize, usize)> = m
            .pairs
            .iter()
            .map(|&(p, g)| (preds[p].class, gts[g].1))
            .collect();
        let cc = classify_matches(&class_pairs, self.cls.num_classes())?;
        self.det += det;
        self.cls.add(&cc);
        self.images += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &EvalAccumulator) {
        self.det += other.det;
        self.cls.add(&other.cls);
        self.images += other.images;
    }

    pub fn counts(&self) -> (&DetectionCounts, &ClassCounts) {
        (&self.det, &self.cls)
    }

    pub fn report(&self, registry: &CategoryRegistry, how: ClassAggregation) -> EvalReport {
        let desc = &registry.datasets()[self.dataset_id];
        let classes: Vec<ClassScore> = (0..self.cls.num_classes())
            .map(|k| ClassScore {
                name: desc.category_names[k].clone(),
                global_index: registry
                    .local_to_global(self.dataset_id, k)
                    .expect("class within dataset"),
                tp: self.cls.tp[k],
                fp: self.cls.fp[k],
                fn_: self.cls.fn_[k],
                f_c: classification_fscore(k, &self.cls, &self.det),
            })
            .collect();
        let scores: Vec<f64> = classes.iter().map(|c| c.f_c).collect();
        EvalReport {
            dataset: desc.name.clone(),
            radius_px: self.radius,
            images: self.images,
            detection: self.det,
            f_d: detection_fscore(&self.det),
            mean_f_c: aggregate_classification(&scores, how),
            classes,
        }
    }
}

/// Scores one image of dataset `dataset_id`.
pub fn evaluate(
    preds: &[Prediction],
    gts: &[(Point, usize)],
    registry: &CategoryRegistry,
    dataset_id: usize,
) -> Result<EvalReport> {
    let mut acc = EvalAccumulator::new(registry, dataset_id)?;
    acc.add_image(preds, gts)?;
    Ok(acc.report(registry, ClassAggregation::Mean))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::DatasetDescriptor;

    fn det(tp: u64, fp: u64, fn_: u64) -> DetectionCounts {
        DetectionCounts { tp, fp, fn_ }
    }

    #[test]
    fn detection_fixtures() {
        assert_eq!(detection_fscore(&det(10, 0, 0)), 1.0);
        assert!((detection_fscore(&det(2, 1, 1)) - 4.0 / 6.0).abs() < 1e-15);
        assert_eq!(detection_fscore(&det(0, 0, 0)), 1.0);
        assert_eq!(detection_fscore(&det(0, 3, 0)), 0.0);
    }

    #[test]
    fn classify_split_rules() {
        let cc = classify_matches(&[(0, 0), (1, 1), (2, 2)], 3).unwrap();
        assert_eq!(cc.fp, vec![0, 0, 0]);
        assert_eq!(cc.fn_, vec![0, 0, 0]);

        let cc = classify_matches(&[(0, 1)], 2).unwrap();
        assert_eq!((cc.fp[0], cc.fn_[1]), (1, 1));

        // confusion rows = gt, cols = pred: [[2,1],[0,3]]
        let pairs = [(0, 0), (0, 0), (1, 0), (1, 1), (1, 1), (1, 1)];
        let cc = classify_matches(&pairs, 2).unwrap();
        assert_eq!(cc.tp, vec![2, 3]);
        assert_eq!(cc.fp, vec![0, 1]);
        assert_eq!(cc.fn_, vec![1, 0]);

        assert!(classify_matches(&[(2, 0)], 2).is_err());
    }

    #[test]
    fn classification_fixtures() {
        let cc = ClassCounts {
            tp: vec![1],
            fp: vec![0],
            fn_: vec![0],
        };
        assert_eq!(classification_fscore(0, &cc, &det(1, 0, 0)), 1.0);
        let cc = ClassCounts {
            tp: vec![2],
            fp: vec![1],
            fn_: vec![1],
        };
        assert!((classification_fscore(0, &cc, &det(4, 1, 1)) - 0.4).abs() < 1e-15);
        let cc = ClassCounts {
            tp: vec![0],
            fp: vec![2],
            fn_: vec![0],
        };
        assert_eq!(classification_fscore(0, &cc, &det(2, 1, 0)), 0.0);
    }

    #[test]
    fn aggregation() {
        assert_eq!(aggregate_classification(&[1.0, 1.0], ClassAggregation::Mean), 1.0);
        assert!((aggregate_classification(&[0.4, 0.8], ClassAggregation::Mean) - 0.6).abs() < 1e-15);
        assert!((aggregate_classification(&[0.4, 0.8], ClassAggregation::Sum) - 1.2).abs() < 1e-15);
    }

    fn consep_registry() -> CategoryRegistry {
        CategoryRegistry::build(vec![DatasetDescriptor::consep()]).unwrap()
    }

    #[test]
    fn perfect_and_empty() {
        let reg = consep_registry();
        let gts = vec![
            (Point::new(10.0, 10.0), 0),
            (Point::new(30.0, 12.0), 1),
            (Point::new(50.0, 40.0), 2),
        ];
        let preds: Vec<Prediction> = gts
            .iter()
            .map(|(p, c)| Prediction {
                u: p.u,
                v: p.v,
                class: *c,
                confidence: 0.9,
            })
            .collect();
        let r = evaluate(&preds, &gts, &reg, 0).unwrap();
        assert_eq!(r.f_d, 1.0);
        assert_eq!(r.mean_f_c, 1.0);
        assert_eq!(r.classes.len(), 3);

        let r = evaluate(&[], &gts, &reg, 0).unwrap();
        assert_eq!(r.f_d, 0.0);
        assert!(evaluate(&[], &gts, &reg, 5).is_err());
    }

    #[test]
    fn three_class_mean_composes() {
        let reg = consep_registry();
        let gts = vec![
            (Point::new(10.0, 10.0), 0),
            (Point::new(30.0, 10.0), 1),
            (Point::new(50.0, 10.0), 2),
            (Point::new(70.0, 10.0), 2),
        ];
        // last one mislabeled as class 1, plus one spurious prediction
        let mut preds: Vec<Prediction> = gts
            .iter()
            .map(|(p, c)| Prediction {
                u: p.u + 1.0,
                v: p.v,
                class: *c,
                confidence: 0.9,
            })
            .collect();
        preds[3].class = 1;
        preds.push(Prediction {
            u: 90.0,
            v: 90.0,
            class: 0,
            confidence: 0.5,
        });
        let r = evaluate(&preds, &gts, &reg, 0).unwrap();
        assert_eq!(r.detection, det(4, 1, 0));
        let expect = [2.0 / 3.0, 2.0 / 5.0, 2.0 / 5.0];
        for (c, e) in r.classes.iter().zip(expect) {
            assert!((c.f_c - e).abs() < 1e-12, "{} vs {e}", c.f_c);
        }
        let mean = expect.iter().sum::<f64>() / 3.0;
        assert!((r.mean_f_c - mean).abs() < 1e-12);
    }

    #[test]
    fn csv_has_row_per_class() {
        let reg = consep_registry();
        let r = evaluate(&[], &[], &reg, 0).unwrap();
        assert_eq!(r.to_csv().lines().count(), 4);
    }
}

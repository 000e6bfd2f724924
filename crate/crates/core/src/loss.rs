//! Set-prediction objective: matched focal + L1 on candidate queries,
//! index-aligned reconstruction on denoising queries, summed over the first
//! stage and every decoder layer.

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::cdn::NoisedAnnotationSet;
use crate::error::{Error, Result};
use crate::matching::{hungarian, loss_cost, Assignment, MatchWeights};
use crate::model::{ForwardOutput, HeadOutput};
use crate::nn::{log_softmax_last, softmax_last, to_rows};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_weight: f64,
    pub l1_weight: f64,
    /// Extra factor on every denoising term, on top of the class and L1 weights.
    pub cdn_weight: f64,
    /// Weight of real-class targets; no-object targets get `1 - alpha`.
    /// `None` weighs every target by 1; written as `"none"` in config files.
    #[serde(with = "alpha_repr")]
    pub focal_alpha: Option<f64>,
    pub focal_gamma: f64,
    /// Use the Euclidean norm instead of coordinate-wise L1.
    pub euclidean: bool,
    pub matching: MatchWeights,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_weight: 1.0,
            l1_weight: 5.0,
            cdn_weight: 1.0,
            focal_alpha: Some(0.25),
            focal_gamma: 2.0,
            euclidean: false,
            matching: MatchWeights::default(),
        }
    }
}

mod alpha_repr {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    #[derive(Serialize, Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Value(f64),
        Word(String),
    }

    pub fn serialize<S: Serializer>(v: &Option<f64>, s: S) -> Result<S::Ok, S::Error> {
        match v {
            Some(a) => Repr::Value(*a),
            None => Repr::Word("none".into()),
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Option<f64>, D::Error> {
        match Repr::deserialize(d)? {
            Repr::Value(a) => Ok(Some(a)),
            Repr::Word(w) if w == "none" => Ok(None),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("focal_alpha: expected a number or \"none\", got {w:?}"))),
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.focal_gamma < 0.0 || !self.focal_gamma.is_finite() {
            return Err(Error::Config(format!("loss.focal_gamma = {} must be >= 0", self.focal_gamma)));
        }
        if let Some(a) = self.focal_alpha {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::Config(format!("loss.focal_alpha = {a} must lie in [0, 1]")));
            }
        }
        if self.cls_weight < 0.0 || self.l1_weight < 0.0 || self.cdn_weight < 0.0 {
            return Err(Error::Config("loss weights must be >= 0".into()));
        }
        Ok(())
    }
}

/// Ground truth of one sample in normalized coordinates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Targets {
    pub coords: Vec<[f64; 2]>,
    pub classes: Vec<usize>,
}

impl Targets {
    pub fn len(&self) -> usize {
        self.coords.len()
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }
}

/// Unweighted terms of one prediction stage.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct StageLoss {
    pub hungarian_cls: f64,
    pub hungarian_l1: f64,
    pub cdn_pos_l1: f64,
    pub cdn_pos_cls: f64,
    pub cdn_neg_cls: f64,
}

impl StageLoss {
    fn add(&mut self, o: &StageLoss) {
        self.hungarian_cls += o.hungarian_cls;
        self.hungarian_l1 += o.hungarian_l1;
        self.cdn_pos_l1 += o.cdn_pos_l1;
        self.cdn_pos_cls += o.cdn_pos_cls;
        self.cdn_neg_cls += o.cdn_neg_cls;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    /// Sums over stages.
    pub hungarian_cls: f64,
    pub hungarian_l1: f64,
    pub cdn_pos_l1: f64,
    pub cdn_pos_cls: f64,
    pub cdn_neg_cls: f64,
    /// First stage followed by each decoder layer.
    pub per_layer: Vec<StageLoss>,
    pub total: f64,
}

impl LossBreakdown {
    /// Adds another sample's breakdown (batch reduction).
    pub fn accumulate(&mut self, other: &LossBreakdown) {
        self.hungarian_cls += other.hungarian_cls;
        self.hungarian_l1 += other.hungarian_l1;
        self.cdn_pos_l1 += other.cdn_pos_l1;
        self.cdn_pos_cls += other.cdn_pos_cls;
        self.cdn_neg_cls += other.cdn_neg_cls;
        if self.per_layer.len() < other.per_layer.len() {
            self.per_layer.resize(other.per_layer.len(), StageLoss::default());
        }
        for (a, b) in self.per_layer.iter_mut().zip(&other.per_layer) {
            a.add(b);
        }
        self.total += other.total;
    }
}

fn scalar(t: &Tensor) -> Result<f64> {
    Ok(t.to_dtype(DType::F64)?.to_scalar::<f64>()?)
}

fn zero_like(t: &Tensor) -> Result<Tensor> {
    Ok(Tensor::zeros((), t.dtype(), t.device())?)
}

/// Focal-modulated softmax cross-entropy averaged over rows. `targets`
/// index columns of `logits`; the last column is no-object.
pub fn focal_term(logits: &Tensor, targets: &[usize], alpha: Option<f64>, gamma: f64) -> Result<Tensor> {
    let (n, width) = logits.dims2()?;
    if n != targets.len() {
        return Err(Error::Data(format!("{} targets for {n} rows", targets.len())));
    }
    if let Some(&bad) = targets.iter().find(|&&t| t >= width) {
        return Err(Error::OutOfRange(format!("target class {bad} with {width} logits")));
    }
    if n == 0 {
        return zero_like(logits);
    }
    let device = logits.device();
    let idx = Tensor::from_vec(targets.iter().map(|&t| t as u32).collect::<Vec<_>>(), (n, 1), device)?;
    let logp = log_softmax_last(logits)?.gather(&idx, 1)?.squeeze(1)?;
    let weights: Vec<f64> = targets
        .iter()
        .map(|&t| match alpha {
            Some(a) if t + 1 == width => 1.0 - a,
            Some(a) => a,
            None => 1.0,
        })
        .collect();
    let weights = Tensor::from_vec(weights, n, device)?.to_dtype(logits.dtype())?;
    let per_row = if gamma == 0.0 {
        // powf(0) has an undefined derivative at p_t = 1.
        logp
    } else {
        let one_minus = (1.0 - logp.exp()?)?.relu()?;
        let modulator = if gamma == 2.0 {
            one_minus.sqr()?
        } else if gamma == 1.0 {
            one_minus
        } else {
            one_minus.powf(gamma)?
        };
        (modulator * logp)?
    };
    Ok((per_row * weights)?.neg()?.mean_all()?)
}

/// Mean distance between aligned predicted and target coordinates.
pub fn l1_term(pred: &Tensor, target: &[[f64; 2]], euclidean: bool) -> Result<Tensor> {
    let n = pred.dim(0)?;
    if n != target.len() {
        return Err(Error::Data(format!("{} targets for {n} coordinates", target.len())));
    }
    if n == 0 {
        return zero_like(pred);
    }
    let flat: Vec<f64> = target.iter().flat_map(|p| [p[0], p[1]]).collect();
    let tgt = Tensor::from_vec(flat, (n, 2), pred.device())?.to_dtype(pred.dtype())?;
    let diff = (pred - tgt)?;
    let per_pair = if euclidean {
        (diff.sqr()?.sum(1)? + 1e-12)?.sqrt()?
    } else {
        diff.abs()?.sum(1)?
    };
    Ok(per_pair.mean_all()?)
}

/// Unweighted classification and coordinate terms.
pub struct TermTensors {
    pub cls: Tensor,
    pub l1: Tensor,
}

/// Matches `head` to `gt` and scores every query: matched ones against
/// their target, the rest against no-object.
pub fn hungarian_loss(head: &HeadOutput, gt: &Targets, cfg: &LossConfig) -> Result<(TermTensors, Assignment)> {
    let (n_q, width) = head.logits.dims2()?;
    if gt.len() > n_q {
        return Err(Error::Data(format!("{} ground truths exceed {n_q} queries", gt.len())));
    }
    let no_object = width - 1;
    let probs: Vec<f64> = to_rows(&softmax_last(&head.logits.detach())?)?.concat();
    let coords: Vec<[f64; 2]> = to_rows(&head.coords.detach())?
        .into_iter()
        .map(|r| [r[0], r[1]])
        .collect();
    let cost = loss_cost(&probs, width, &coords, &gt.coords, &gt.classes, &cfg.matching)?;
    let assignment = hungarian(&cost);
    let mut targets = vec![no_object; n_q];
    for &(q, j) in &assignment.pairs {
        targets[q] = gt.classes[j];
    }
    let cls = focal_term(&head.logits, &targets, cfg.focal_alpha, cfg.focal_gamma)?;
    let l1 = if assignment.pairs.is_empty() {
        zero_like(&head.coords)?
    } else {
        let rows: Vec<usize> = assignment.pairs.iter().map(|p| p.0).collect();
        let matched = head.select(&rows)?;
        let tgt: Vec<[f64; 2]> = assignment.pairs.iter().map(|p| gt.coords[p.1]).collect();
        l1_term(&matched.coords, &tgt, cfg.euclidean)?
    };
    Ok((TermTensors { cls, l1 }, assignment))
}

/// Denoising terms. `head` holds the denoising queries in generation order
/// (per group: positives then negatives).
pub fn cdn_loss(
    head: &HeadOutput,
    noised: &NoisedAnnotationSet,
    gt: &Targets,
    cfg: &LossConfig,
) -> Result<(Tensor, Tensor, Tensor)> {
    let zero = zero_like(&head.coords)?;
    if noised.is_empty() {
        return Ok((zero.clone(), zero.clone(), zero));
    }
    let no_object = head.logits.dim(1)? - 1;
    let mut pos_rows = Vec::new();
    let mut pos_gt = Vec::new();
    let mut neg_rows = Vec::new();
    let mut row = 0;
    for g in &noised.groups {
        for p in &g.positives {
            pos_rows.push(row);
            pos_gt.push(p.gt_index);
            row += 1;
        }
        for _ in &g.negatives {
            neg_rows.push(row);
            row += 1;
        }
    }
    if row != head.len() {
        return Err(Error::Data(format!("{} denoising outputs for {row} noised queries", head.len())));
    }
    if let Some(&bad) = pos_gt.iter().find(|&&j| j >= gt.len()) {
        return Err(Error::OutOfRange(format!("noised query refers to ground truth {bad}")));
    }
    let pos = head.select(&pos_rows)?;
    let pos_coords: Vec<[f64; 2]> = pos_gt.iter().map(|&j| gt.coords[j]).collect();
    let pos_classes: Vec<usize> = pos_gt.iter().map(|&j| gt.classes[j]).collect();
    let pos_l1 = l1_term(&pos.coords, &pos_coords, cfg.euclidean)?;
    let pos_cls = focal_term(&pos.logits, &pos_classes, cfg.focal_alpha, cfg.focal_gamma)?;
    let neg_cls = if neg_rows.is_empty() {
        zero
    } else {
        let neg = head.select(&neg_rows)?;
        focal_term(&neg.logits, &vec![no_object; neg_rows.len()], cfg.focal_alpha, cfg.focal_gamma)?
    };
    Ok((pos_l1, pos_cls, neg_cls))
}

/// Sample loss over the first stage and all decoder layers, scaled by the
/// dataset weight.
pub fn total_loss(
    out: &ForwardOutput,
    gt: &Targets,
    noised: Option<&NoisedAnnotationSet>,
    dataset_weight: f64,
    cfg: &LossConfig,
) -> Result<(Tensor, LossBreakdown)> {
    let mut breakdown = LossBreakdown::default();
    let mut total = zero_like(&out.first_stage.coords)?;
    let stages = std::iter::once((&out.first_stage, None)).chain(
        out.layers
            .iter()
            .enumerate()
            .map(|(l, h)| (h, out.cdn_layers.get(l).filter(|c| !c.is_empty()))),
    );
    for (head, cdn) in stages {
        let (terms, _) = hungarian_loss(head, gt, cfg)?;
        let mut stage = StageLoss {
            hungarian_cls: scalar(&terms.cls)?,
            hungarian_l1: scalar(&terms.l1)?,
            ..StageLoss::default()
        };
        let mut cls = terms.cls;
        let mut l1 = terms.l1;
        if let (Some(cdn), Some(noised)) = (cdn, noised) {
            let (pos_l1, pos_cls, neg_cls) = cdn_loss(cdn, noised, gt, cfg)?;
            stage.cdn_pos_l1 = scalar(&pos_l1)?;
            stage.cdn_pos_cls = scalar(&pos_cls)?;
            stage.cdn_neg_cls = scalar(&neg_cls)?;
            cls = (cls + ((pos_cls + neg_cls)? * cfg.cdn_weight)?)?;
            l1 = (l1 + (pos_l1 * cfg.cdn_weight)?)?;
        }
        total = (total + ((cls * cfg.cls_weight)? + (l1 * cfg.l1_weight)?)?)?;
        breakdown.per_layer.push(stage);
    }
    let total = (total * dataset_weight)?;
    for s in &breakdown.per_layer {
        breakdown.hungarian_cls += s.hungarian_cls;
        breakdown.hungarian_l1 += s.hungarian_l1;
        breakdown.cdn_pos_l1 += s.cdn_pos_l1;
        breakdown.cdn_pos_cls += s.cdn_pos_cls;
        breakdown.cdn_neg_cls += s.cdn_neg_cls;
    }
    breakdown.total = scalar(&total)?;
    if !breakdown.total.is_finite() {
        return Err(Error::Numerical(format!("non-finite loss: {breakdown:?}")));
    }
    Ok((total, breakdown))
}

//! Minimum-cost bipartite assignment.
//!
//! The same solver pairs predictions with ground truth in the training loss
//! and pairs predicted centroids with annotated ones at evaluation time.

use crate::error::{Error, Result};
use crate::registry::Point;

/// Cost standing in for a disallowed pairing. Kept finite so the solver's
/// potentials stay well defined.
pub const FORBIDDEN: f64 = 1e9;

/// Dense row-major cost matrix without NaN entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != rows * cols {
            return Err(Error::Data(format!(
                "cost matrix {rows}x{cols} given {} values",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| v.is_nan()) {
            return Err(Error::Numerical(format!(
                "NaN cost at ({}, {})",
                i / cols.max(1),
                i % cols.max(1)
            )));
        }
        // Infinite entries are folded into the sentinel.
        let values = values
            .into_iter()
            .map(|v| if v.is_infinite() { v.signum() * FORBIDDEN } else { v })
            .collect();
        Ok(Self { rows, cols, values })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        let m = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != m) {
            return Err(Error::Data("ragged cost matrix".into()));
        }
        Self::new(n, m, rows.iter().flatten().copied().collect())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.values[r * self.cols + c]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn transpose(&self) -> Self {
        let mut values = Vec::with_capacity(self.values.len());
        for c in 0..self.cols {
            for r in 0..self.rows {
                values.push(self.get(r, c));
            }
        }
        Self {
            rows: self.cols,
            cols: self.rows,
            values,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Assignment {
    /// Matched `(row, col)` pairs, sorted by row.
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, cost: &CostMatrix) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.get(r, c)).sum()
    }

    fn from_pairs(mut pairs: Vec<(usize, usize)>, rows: usize, cols: usize) -> Self {
        pairs.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(r, c) in &pairs {
            row_used[r] = true;
            col_used[c] = true;
        }
        Self {
            pairs,
            unmatched_rows: (0..rows).filter(|&r| !row_used[r]).collect(),
            unmatched_cols: (0..cols).filter(|&c| !col_used[c]).collect(),
        }
    }
}

/// Minimum-cost maximal matching (Kuhn-Munkres with shortest augmenting
/// paths, O(n^2 m)). Rectangular inputs behave as if zero-padded to square:
/// exactly `min(rows, cols)` pairs are returned.
pub fn hungarian(cost: &CostMatrix) -> Assignment {
    let (n, m) = (cost.rows(), cost.cols());
    if n == 0 || m == 0 {
        return Assignment::from_pairs(Vec::new(), n, m);
    }
    if n > m {
        let t = hungarian(&cost.transpose());
        let pairs = t.pairs.into_iter().map(|(c, r)| (r, c)).collect();
        return Assignment::from_pairs(pairs, n, m);
    }

    // Rows are inserted in index order, so among equal-cost optima the
    // lower rows settle first and the outcome is deterministic.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut owner = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    let mut minv = vec![0.0f64; m + 1];
    let mut used = vec![false; m + 1];

    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0usize;
        minv.iter_mut().for_each(|x| *x = f64::INFINITY);
        used.iter_mut().for_each(|x| *x = false);
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost.get(i0 - 1, j - 1) - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }

    let pairs = (1..=m)
        .filter(|&j| owner[j] != 0)
        .map(|j| (owner[j] - 1, j - 1))
        .collect();
    Assignment::from_pairs(pairs, n, m)
}

/// Pairwise Euclidean distances, predictions as rows.
pub fn distance_cost(preds: &[Point], gts: &[Point]) -> CostMatrix {
    let values = preds
        .iter()
        .flat_map(|p| gts.iter().map(move |g| p.dist(g)))
        .collect();
    CostMatrix {
        rows: preds.len(),
        cols: gts.len(),
        values,
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct RadiusMatch {
    /// `(pred, gt)` pairs closer than the radius.
    pub pairs: Vec<(usize, usize)>,
    pub false_positives: Vec<usize>,
    pub false_negatives: Vec<usize>,
}

/// Global matching on Euclidean distance, then pairs at distance `>= radius`
/// are dissolved into one false positive and one false negative.
pub fn match_within_radius(preds: &[Point], gts: &[Point], radius: f64) -> RadiusMatch {
    let cost = distance_cost(preds, gts);
    let assignment = hungarian(&cost);
    let mut out = RadiusMatch {
        false_positives: assignment.unmatched_rows.clone(),
        false_negatives: assignment.unmatched_cols.clone(),
        ..Default::default()
    };
    for (p, g) in assignment.pairs {
        if cost.get(p, g) < radius {
            out.pairs.push((p, g));
        } else {
            out.false_positives.push(p);
            out.false_negatives.push(g);
        }
    }
    out.false_positives.sort_unstable();
    out.false_negatives.sort_unstable();
    out
}

/// Weights of the prediction-to-target matching cost.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MatchWeights {
    pub class: f64,
    pub l1: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for MatchWeights {
    fn default() -> Self {
        Self {
            class: 2.0,
            l1: 5.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

/// Focal-style classification cost of predicting probability `p` for the
/// target class: positive focal term minus the negative focal term.
pub fn focal_cost(p: f64, alpha: f64, gamma: f64) -> f64 {
    const EPS: f64 = 1e-8;
    let pos = alpha * (1.0 - p).powf(gamma) * -(p + EPS).ln();
    let neg = (1.0 - alpha) * p.powf(gamma) * -(1.0 - p + EPS).ln();
    pos - neg
}

/// Matching cost between `n_q` predictions and `n_c` targets.
///
/// `probs` is row-major `n_q x width` where `width = t_d + 1`; coordinates
/// are normalized to the unit square.
pub fn loss_cost(
    probs: &[f64],
    width: usize,
    pred_coords: &[[f64; 2]],
    gt_coords: &[[f64; 2]],
    gt_classes: &[usize],
    weights: &MatchWeights,
) -> Result<CostMatrix> {
    let n_q = pred_coords.len();
    let n_c = gt_coords.len();
    if probs.len() != n_q * width || gt_classes.len() != n_c {
        return Err(Error::Data(format!(
            "loss cost shape mismatch: {} probs for {n_q}x{width}, {} classes for {n_c} targets",
            probs.len(),
            gt_classes.len()
        )));
    }
    if let Some(i) = probs.iter().position(|p| p.is_nan()) {
        return Err(Error::Numerical(format!(
            "NaN class score for query {}",
            i / width
        )));
    }
    if let Some(&c) = gt_classes.iter().find(|&&c| c >= width) {
        return Err(Error::OutOfRange(format!("target class {c} >= {width}")));
    }
    let mut values = Vec::with_capacity(n_q * n_c);
    for (q, pc) in pred_coords.iter().enumerate() {
        for (gc, &cls) in gt_coords.iter().zip(gt_classes) {
            let p = probs[q * width + cls];
            let l1 = (pc[0] - gc[0]).abs() + (pc[1] - gc[1]).abs();
            let class_cost = if weights.class == 0.0 {
                0.0
            } else {
                weights.class * focal_cost(p, weights.focal_alpha, weights.focal_gamma)
            };
            values.push(class_cost + weights.l1 * l1);
        }
    }
    CostMatrix::new(n_q, n_c, values)
}

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use super::Sample;
use crate::error::{Error, Result};
use crate::selector::TokenMask;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GroupAccuracy {
    pub group: usize,
    pub class: usize,
    pub background: usize,
    pub correct: usize,
    pub count: usize,
    pub accuracy: f64,
}

/// Accuracies are fractions in `[0, 1]`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub n: usize,
    /// Average accuracy over samples.
    pub aa: f64,
    /// Groups with at least one sample.
    pub per_group: Vec<GroupAccuracy>,
    /// Worst-group accuracy.
    pub wga: f64,
    /// Accuracy on class-consistent minus randomized backgrounds, when both were evaluated.
    #[serde(default)]
    pub bg_gap: Option<f64>,
    #[serde(default)]
    pub fg_miou: Option<f64>,
    #[serde(default)]
    pub kp_error: Option<f64>,
}

impl MetricsReport {
    /// Builds a report from `(group, correct)` outcomes; `group = class·B + background`.
    pub fn from_outcomes(outcomes: &[(usize, bool)], n_classes: usize, n_backgrounds: usize) -> Result<Self> {
        if outcomes.is_empty() {
            return Err(Error::EmptyDataset("no samples to evaluate".into()));
        }
        let n_groups = n_classes * n_backgrounds;
        let mut correct = vec![0usize; n_groups];
        let mut count = vec![0usize; n_groups];
        for &(g, ok) in outcomes {
            if g >= n_groups {
                return Err(Error::arg(format!("group {g} outside the {n_groups} known groups")));
            }
            count[g] += 1;
            correct[g] += usize::from(ok);
        }
        let per_group: Vec<GroupAccuracy> = (0..n_groups)
            .filter(|&g| count[g] > 0)
            .map(|g| GroupAccuracy {
                group: g,
                class: g / n_backgrounds,
                background: g % n_backgrounds,
                correct: correct[g],
                count: count[g],
                accuracy: correct[g] as f64 / count[g] as f64,
            })
            .collect();
        let total: usize = correct.iter().sum();
        Ok(Self {
            n: outcomes.len(),
            aa: total as f64 / outcomes.len() as f64,
            wga: per_group.iter().map(|g| g.accuracy).fold(f64::INFINITY, f64::min),
            per_group,
            bg_gap: None,
            fg_miou: None,
            kp_error: None,
        })
    }

    pub fn from_predictions(predictions: &[usize], samples: &[Sample], n_classes: usize, n_backgrounds: usize) -> Result<Self> {
        if predictions.len() != samples.len() {
            return Err(Error::arg("one prediction per sample required"));
        }
        let outcomes: Vec<(usize, bool)> = samples
            .iter()
            .zip(predictions)
            .map(|(s, &p)| (s.group, p == s.label))
            .collect();
        Self::from_outcomes(&outcomes, n_classes, n_backgrounds)
    }
}

/// `AA(mixed-same) − AA(mixed-rand)`.
pub fn bg_gap(mixed_same: &MetricsReport, mixed_rand: &MetricsReport) -> f64 {
    mixed_same.aa - mixed_rand.aa
}

/// IoU of two token masks; two empty masks agree perfectly.
pub fn iou(a: &TokenMask, b: &TokenMask) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::arg(format!("mask lengths differ: {} vs {}", a.len(), b.len())));
    }
    let inter = a.0.iter().zip(&b.0).filter(|(x, y)| **x && **y).count();
    let union = a.0.iter().zip(&b.0).filter(|(x, y)| **x || **y).count();
    Ok(if union == 0 {
        1.0
    } else {
        inter as f64 / union as f64
    })
}

/// Mean per-image IoU between predicted and ground-truth foreground token masks.
pub fn fg_miou(predicted: &[TokenMask], truth: &[TokenMask]) -> Result<f64> {
    if predicted.len() != truth.len() {
        return Err(Error::arg("one ground-truth mask per prediction required"));
    }
    if predicted.is_empty() {
        return Err(Error::EmptyDataset("no masks to compare".into()));
    }
    let total = predicted.iter().zip(truth).map(|(p, t)| iou(p, t)).sum::<Result<f64>>()?;
    Ok(total / predicted.len() as f64)
}

/// Centroid `(x, y)` in pixels of each foreground part `1..=K` of a hard map; parts without
/// tokens sit at the image centre. Returns `2K` values.
pub fn part_centroids(hard: &[usize], grid: (usize, usize), patch_size: usize, k: usize) -> Vec<f64> {
    let mut sums = vec![(0.0, 0.0, 0usize); k];
    for (i, &part) in hard.iter().enumerate() {
        if part > 0 {
            let (r, c) = (i / grid.1, i % grid.1);
            let e = &mut sums[part - 1];
            e.0 += (c as f64 + 0.5) * patch_size as f64;
            e.1 += (r as f64 + 0.5) * patch_size as f64;
            e.2 += 1;
        }
    }
    let centre = (grid.1 as f64 * patch_size as f64 / 2.0, grid.0 as f64 * patch_size as f64 / 2.0);
    sums.iter()
        .flat_map(|&(x, y, n)| {
            if n == 0 {
                [centre.0, centre.1]
            } else {
                [x / n as f64, y / n as f64]
            }
        })
        .collect()
}

const RIDGE: f64 = 1e-6;

fn to_matrix(rows: &[Vec<f64>], bias: bool) -> Result<DMatrix<f64>> {
    let cols = rows.first().map(Vec::len).unwrap_or(0);
    if rows.iter().any(|r| r.len() != cols) {
        return Err(Error::arg("ragged design rows"));
    }
    let extra = usize::from(bias);
    Ok(DMatrix::from_fn(rows.len(), cols + extra, |i, j| if j < cols { rows[i][j] } else { 1.0 }))
}

/// Least-squares affine map from features to targets (normal equations; ridge `1e-6` if
/// the Gram matrix is singular). Returns the `(features + 1) × targets` weights.
pub fn fit_affine(features: &[Vec<f64>], targets: &[Vec<f64>]) -> Result<DMatrix<f64>> {
    if features.is_empty() || features.len() != targets.len() {
        return Err(Error::arg("need matching, non-empty feature and target rows"));
    }
    let x = to_matrix(features, true)?;
    let y = to_matrix(targets, false)?;
    let gram = x.transpose() * &x;
    let rhs = x.transpose() * y;
    if let Some(ch) = gram.clone().cholesky() {
        let w = ch.solve(&rhs);
        if w.iter().all(|v| v.is_finite()) {
            return Ok(w);
        }
    }
    log::debug!("singular design matrix; using ridge {RIDGE}");
    let n = gram.nrows();
    let ridge = gram + DMatrix::identity(n, n) * RIDGE;
    let ch = ridge
        .cholesky()
        .ok_or_else(|| Error::arg("design matrix is not positive definite even with ridge"))?;
    Ok(ch.solve(&rhs))
}

/// Fits on validation centroids, then reports the mean L2 keypoint error on test divided by
/// the image diagonal. Targets hold keypoints as consecutive `(x, y)` pairs.
pub fn kp_regression(
    val_features: &[Vec<f64>],
    val_targets: &[Vec<f64>],
    test_features: &[Vec<f64>],
    test_targets: &[Vec<f64>],
    diagonal: f64,
) -> Result<f64> {
    let w = fit_affine(val_features, val_targets)?;
    if test_features.is_empty() || test_features.len() != test_targets.len() {
        return Err(Error::arg("need matching, non-empty test rows"));
    }
    let pred = to_matrix(test_features, true)? * w;
    let mut total = 0.0;
    let mut count = 0usize;
    for (i, t) in test_targets.iter().enumerate() {
        if t.len() % 2 != 0 || t.len() != pred.ncols() {
            return Err(Error::arg("targets must be (x, y) pairs"));
        }
        for k in 0..t.len() / 2 {
            let dx = pred[(i, 2 * k)] - t[2 * k];
            let dy = pred[(i, 2 * k + 1)] - t[2 * k + 1];
            total += (dx * dx + dy * dy).sqrt();
            count += 1;
        }
    }
    Ok(total / count as f64 / diagonal)
}

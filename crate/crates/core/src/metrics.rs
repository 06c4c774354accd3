//! Ranking and localization metrics: ROC AUC, box IoU, and the per-class
//! localization accuracy / average-false-positive summary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box over half-open pixel intervals
/// `[x_min, x_max) x [y_min, y_max)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Bbox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl Bbox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        if !(x_max > x_min && y_max > y_min) {
            return Err(Error::Validation(format!(
                "degenerate box ({}, {}, {}, {})",
                x_min, y_min, x_max, y_max
            )));
        }
        Ok(Bbox {
            x_min,
            y_min,
            x_max,
            y_max,
        })
    }

    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        Bbox::new(x, y, x + w, y + h)
    }

    pub fn area(&self) -> f64 {
        (self.x_max - self.x_min) * (self.y_max - self.y_min)
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &Bbox, b: &Bbox) -> f64 {
    let ix = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let iy = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = ix * iy;
    if inter == 0.0 {
        return 0.0;
    }
    inter / (a.area() + b.area() - inter)
}

/// Mann-Whitney AUC with half credit for ties:
/// `(#{score_pos > score_neg} + 0.5 * #ties) / (P * N)`.
///
/// Returns `None` when the labels contain no positive or no negative
/// (undefined AUC).
pub fn auc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    assert_eq!(scores.len(), labels.len(), "scores and labels must align");
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return None;
    }
    // Rank-sum formulation: sort by score, assign average ranks to ties,
    // then AUC = (R_pos - P(P+1)/2) / (P*N).
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).expect("scores must not be NaN"));
    let mut rank_pos_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // Ranks are 1-based; ties share the average rank of their span.
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if labels[idx] {
                rank_pos_sum += avg_rank;
            }
        }
        i = j + 1;
    }
    let p = pos as f64;
    let n = neg as f64;
    Some((rank_pos_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Ground truth and predictions for one (image, class) pair that carries at
/// least one annotated box.
#[derive(Clone, Debug)]
pub struct LocalizationCase {
    pub class_index: usize,
    pub gt_boxes: Vec<Bbox>,
    pub pred_boxes: Vec<Bbox>,
}

/// Per-class localization outcome at one IoU threshold.
#[derive(Clone, Debug, Serialize)]
pub struct ClassLocalization {
    pub class_index: usize,
    /// Annotated boxes of this class over the evaluated images.
    pub gt_boxes: usize,
    /// Evaluated (image, class) pairs.
    pub images: usize,
    /// Ground-truth boxes matched by some prediction at IoU > T.
    pub matched: usize,
    /// Predicted boxes matching no ground truth at IoU > T.
    pub false_positives: usize,
    /// matched / gt_boxes; `None` when the class has no ground truth.
    pub acc: Option<f64>,
    /// false_positives / images; 0 when the class was never evaluated.
    pub afp: f64,
}

/// Localization accuracy and average false positives per class.
///
/// A ground-truth box counts as localized when any predicted box of the same
/// (image, class) pair overlaps it with IoU strictly above `t`. A predicted
/// box that overlaps no ground-truth box above `t` is a false positive,
/// averaged over the evaluated images of that class.
pub fn localization_metrics(
    cases: &[LocalizationCase],
    num_classes: usize,
    t: f64,
) -> Vec<ClassLocalization> {
    let mut out: Vec<ClassLocalization> = (0..num_classes)
        .map(|c| ClassLocalization {
            class_index: c,
            gt_boxes: 0,
            images: 0,
            matched: 0,
            false_positives: 0,
            acc: None,
            afp: 0.0,
        })
        .collect();
    for case in cases {
        let slot = &mut out[case.class_index];
        slot.images += 1;
        slot.gt_boxes += case.gt_boxes.len();
        for gt in &case.gt_boxes {
            if case.pred_boxes.iter().any(|p| iou(p, gt) > t) {
                slot.matched += 1;
            }
        }
        for p in &case.pred_boxes {
            if !case.gt_boxes.iter().any(|gt| iou(p, gt) > t) {
                slot.false_positives += 1;
            }
        }
    }
    for slot in &mut out {
        if slot.gt_boxes > 0 {
            slot.acc = Some(slot.matched as f64 / slot.gt_boxes as f64);
        }
        if slot.images > 0 {
            slot.afp = slot.false_positives as f64 / slot.images as f64;
        }
    }
    out
}

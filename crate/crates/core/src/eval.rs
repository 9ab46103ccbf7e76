//! COCO-style average precision.
//!
//! AP integrates the precision-recall curve with 101-point interpolation
//! (recall grid 0, 0.01, ..., 1; precision at each point is the maximum
//! precision at any recall at or above it). Matching is greedy per category
//! in descending score order.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::detection::{iou, BBox, ImagePrediction};
use crate::exec::Execution;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GtBox {
    pub group: usize,
    pub bbox: BBox,
}

/// IoU thresholds 0.50:0.05:0.95 used for mAP.
pub fn map_thresholds() -> [f64; 10] {
    std::array::from_fn(|i| 0.5 + 0.05 * i as f64)
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum EvalError {
    #[error("ground truth has no boxes")]
    EmptyGroundTruth,
    #[error("{preds} predictions for {gts} ground-truth images")]
    LengthMismatch { preds: usize, gts: usize },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MatchedDetection {
    /// Index into the input prediction.
    pub index: usize,
    pub group: usize,
    pub score: f64,
    pub true_positive: bool,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct MatchResult {
    /// Sorted by descending score; equal scores keep input order.
    pub detections: Vec<MatchedDetection>,
    /// Ground-truth boxes left unmatched, per category.
    pub unmatched_gt: BTreeMap<usize, usize>,
}

fn score_order(preds: &ImagePrediction) -> Vec<usize> {
    let mut order: Vec<usize> = (0..preds.detections.len()).collect();
    order.sort_by(|&a, &b| {
        preds.detections[b].score.partial_cmp(&preds.detections[a].score).unwrap_or(Ordering::Equal)
    });
    order
}

/// Greedy matching: each detection, by descending score, claims the
/// unmatched same-category ground truth with highest IoU (ties: first),
/// provided that IoU is at least `iou_thr`.
pub fn match_image(preds: &ImagePrediction, gt: &[GtBox], iou_thr: f64) -> MatchResult {
    let mut taken = vec![false; gt.len()];
    let mut detections = Vec::with_capacity(preds.len());
    for i in score_order(preds) {
        let d = &preds.detections[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gt.iter().enumerate() {
            if taken[j] || g.group != d.group {
                continue;
            }
            let o = iou(&d.bbox, &g.bbox);
            if o >= iou_thr && best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        if let Some((j, _)) = best {
            taken[j] = true;
        }
        detections.push(MatchedDetection { index: i, group: d.group, score: d.score, true_positive: best.is_some() });
    }
    let mut unmatched_gt = BTreeMap::new();
    for (g, t) in gt.iter().zip(&taken) {
        if !t {
            *unmatched_gt.entry(g.group).or_insert(0) += 1;
        }
    }
    MatchResult { detections, unmatched_gt }
}

/// AP of a TP/FP stream already sorted by descending score.
///
/// With `total_gt == 0` the result is 1 for an empty stream and 0 otherwise.
pub fn average_precision(tp: &[bool], total_gt: usize) -> f64 {
    if total_gt == 0 {
        return if tp.is_empty() { 1.0 } else { 0.0 };
    }
    let n = tp.len();
    let mut precision = Vec::with_capacity(n);
    let mut recall = Vec::with_capacity(n);
    let mut hits = 0usize;
    for (k, &t) in tp.iter().enumerate() {
        hits += usize::from(t);
        precision.push(hits as f64 / (k + 1) as f64);
        recall.push(hits as f64 / total_gt as f64);
    }
    for k in (1..n).rev() {
        if precision[k] > precision[k - 1] {
            precision[k - 1] = precision[k];
        }
    }
    let mut sum = 0.0;
    for j in 0..=100 {
        let r = j as f64 / 100.0;
        let k = recall.partition_point(|&x| x < r);
        if k < n {
            sum += precision[k];
        }
    }
    sum / 101.0
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetAp {
    /// AP per category that has ground truth.
    pub per_category: BTreeMap<usize, f64>,
    pub mean: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetMetrics {
    pub map: f64,
    pub ap50: f64,
    pub ap75: f64,
}

/// Per-category AP pooled over images, averaged over categories present in
/// the ground truth.
pub fn dataset_ap(preds: &[ImagePrediction], gt: &[Vec<GtBox>], iou_thr: f64) -> Result<DatasetAp, EvalError> {
    dataset_ap_with(preds, gt, iou_thr, Execution::Sequential)
}

pub fn dataset_ap_with(
    preds: &[ImagePrediction],
    gt: &[Vec<GtBox>],
    iou_thr: f64,
    exec: Execution,
) -> Result<DatasetAp, EvalError> {
    if preds.len() != gt.len() {
        return Err(EvalError::LengthMismatch { preds: preds.len(), gts: gt.len() });
    }
    let mut gt_counts: BTreeMap<usize, usize> = BTreeMap::new();
    for g in gt.iter().flatten() {
        *gt_counts.entry(g.group).or_insert(0) += 1;
    }
    if gt_counts.is_empty() {
        return Err(EvalError::EmptyGroundTruth);
    }
    let matches = exec.map_range(preds.len(), |i| match_image(&preds[i], &gt[i], iou_thr));

    let mut streams: BTreeMap<usize, Vec<(f64, bool)>> = BTreeMap::new();
    for m in &matches {
        for d in &m.detections {
            streams.entry(d.group).or_default().push((d.score, d.true_positive));
        }
    }
    let mut per_category = BTreeMap::new();
    for (&cat, &count) in &gt_counts {
        let mut s = streams.remove(&cat).unwrap_or_default();
        s.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal));
        let tp: Vec<bool> = s.into_iter().map(|x| x.1).collect();
        per_category.insert(cat, average_precision(&tp, count));
    }
    let mean = per_category.values().sum::<f64>() / per_category.len() as f64;
    Ok(DatasetAp { per_category, mean })
}

pub fn dataset_metrics(preds: &[ImagePrediction], gt: &[Vec<GtBox>], exec: Execution) -> Result<DatasetMetrics, EvalError> {
    let mut means = Vec::with_capacity(10);
    for thr in map_thresholds() {
        means.push(dataset_ap_with(preds, gt, thr, exec)?.mean);
    }
    Ok(DatasetMetrics { map: means.iter().sum::<f64>() / means.len() as f64, ap50: means[0], ap75: means[5] })
}

/// AP at IoU 0.5 on a single image, averaged over categories present in the
/// ground truth or the prediction. Empty ground truth scores 1 if the
/// prediction is empty too, 0 otherwise.
pub fn per_image_ap50(pred: &ImagePrediction, gt: &[GtBox]) -> f64 {
    per_image_ap(pred, gt, 0.5)
}

pub fn per_image_ap(pred: &ImagePrediction, gt: &[GtBox], iou_thr: f64) -> f64 {
    if gt.is_empty() {
        return if pred.is_empty() { 1.0 } else { 0.0 };
    }
    let m = match_image(pred, gt, iou_thr);
    let cats: BTreeSet<usize> = gt.iter().map(|g| g.group).chain(pred.detections.iter().map(|d| d.group)).collect();
    let mut sum = 0.0;
    for &c in &cats {
        let tp: Vec<bool> = m.detections.iter().filter(|d| d.group == c).map(|d| d.true_positive).collect();
        let total = gt.iter().filter(|g| g.group == c).count();
        sum += average_precision(&tp, total);
    }
    sum / cats.len() as f64
}

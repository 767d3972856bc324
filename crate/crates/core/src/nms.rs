//! Class-aware greedy non-maximum suppression with a pluggable score.

use std::cmp::Ordering;

use crate::geometry::Detection;

/// Greedy per-class suppression.
///
/// Detections scoring below `conf_thresh` are dropped, the rest are ranked by
/// `score` (descending, ties to the lower input index) and any same-class
/// detection overlapping a kept one with IoU above `iou_thresh` is removed.
/// The output is in rank order.
pub fn nms<F>(dets: &[Detection], iou_thresh: f64, conf_thresh: f64, score: F) -> Vec<Detection>
where
    F: Fn(&Detection) -> f64,
{
    nms_indices(dets, iou_thresh, conf_thresh, score)
        .into_iter()
        .map(|i| dets[i])
        .collect()
}

/// Same as [`nms`] but returns indices into `dets`.
pub fn nms_indices<F>(dets: &[Detection], iou_thresh: f64, conf_thresh: f64, score: F) -> Vec<usize>
where
    F: Fn(&Detection) -> f64,
{
    let scores: Vec<f64> = dets.iter().map(&score).collect();
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| scores[i] >= conf_thresh)
        .collect();
    // stable sort keeps lower indices first among equal scores
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));

    let corners: Vec<[f64; 4]> = dets.iter().map(|d| d.bbox().corners()).collect();
    let mut keep: Vec<usize> = Vec::new();
    for &i in &order {
        let suppressed = keep.iter().any(|&k| {
            dets[k].class_id == dets[i].class_id
                && crate::geometry::iou_corners(&corners[k], &corners[i]) > iou_thresh
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep
}

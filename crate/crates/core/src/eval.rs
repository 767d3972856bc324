//! Detection matching, all-point interpolated AP, mAP and TP/FP/FN dumps.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::detector::{forward, Target, ToyDetectorParams};
use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::image::Image;
use crate::nms::nms;
use crate::synth::Dataset;

pub const DEFAULT_MATCH_IOU: f64 = 0.5;

/// A ranked prediction as seen by the evaluator.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScoredBox {
    pub score: f64,
    pub class_id: usize,
    pub bbox: BBox,
}

impl From<&Detection> for ScoredBox {
    fn from(d: &Detection) -> Self {
        Self {
            score: d.c_det,
            class_id: d.class_id,
            bbox: *d.bbox(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MatchResult {
    /// Detection indices by descending score, ties to the lower index.
    pub order: Vec<usize>,
    /// TP flag per detection, indexed like the input.
    pub tp: Vec<bool>,
    /// Matched detection per ground truth, `None` for a miss.
    pub gt_match: Vec<Option<usize>>,
}

impl MatchResult {
    pub fn false_negatives(&self) -> usize {
        self.gt_match.iter().filter(|m| m.is_none()).count()
    }
}

pub fn rank_order(scores: impl Iterator<Item = f64>) -> Vec<usize> {
    let scores: Vec<f64> = scores.collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap_or(Ordering::Equal));
    order
}

/// Greedy matching: in score order each detection takes the unmatched
/// same-class ground truth of highest IoU, provided the IoU reaches
/// `iou_thresh`. IoU ties go to the lower ground-truth index.
pub fn match_detections(dets: &[ScoredBox], gts: &[Target], iou_thresh: f64) -> MatchResult {
    let order = rank_order(dets.iter().map(|d| d.score));
    let mut tp = vec![false; dets.len()];
    let mut gt_match = vec![None; gts.len()];
    for &i in &order {
        let d = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, g) in gts.iter().enumerate() {
            if g.class_id != d.class_id || gt_match[j].is_some() {
                continue;
            }
            let iou = d.bbox.iou(&g.bbox);
            if iou >= iou_thresh && best.is_none_or(|(_, b)| iou > b) {
                best = Some((j, iou));
            }
        }
        if let Some((j, _)) = best {
            gt_match[j] = Some(i);
            tp[i] = true;
        }
    }
    MatchResult { order, tp, gt_match }
}

/// Precision and recall after each ranked detection.
pub fn pr_curve(flags: &[bool], n_gt: usize) -> (Vec<f64>, Vec<f64>) {
    let mut precision = Vec::with_capacity(flags.len());
    let mut recall = Vec::with_capacity(flags.len());
    let mut tp = 0usize;
    for (k, &f) in flags.iter().enumerate() {
        tp += f as usize;
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(if n_gt == 0 { 0.0 } else { tp as f64 / n_gt as f64 });
    }
    (precision, recall)
}

/// All-point interpolated AP of TP/FP flags given in rank order: the area
/// under the monotone precision envelope. Zero when `n_gt` is zero.
pub fn average_precision(flags: &[bool], n_gt: usize) -> f64 {
    if n_gt == 0 {
        return 0.0;
    }
    let (mut precision, recall) = pr_curve(flags, n_gt);
    for k in (0..precision.len().saturating_sub(1)).rev() {
        precision[k] = precision[k].max(precision[k + 1]);
    }
    let mut ap = 0.0;
    let mut prev_r = 0.0;
    for (p, r) in precision.iter().zip(&recall) {
        ap += (r - prev_r) * p;
        prev_r = *r;
    }
    ap
}

/// Mean of per-class APs; zero for an empty list.
pub fn mean_ap(aps: &[f64]) -> f64 {
    if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassAp {
    pub class_id: usize,
    pub ap: f64,
    pub n_gt: usize,
    pub n_det: usize,
    pub n_tp: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApReport {
    /// Classes present in the ground truth, ascending.
    pub per_class: Vec<ClassAp>,
    pub map: f64,
}

impl ApReport {
    pub fn to_table(&self) -> String {
        let mut s = String::from("class,ap,n_gt,n_det,n_tp\n");
        for c in &self.per_class {
            s.push_str(&format!("{},{:.6},{},{},{}\n", c.class_id, c.ap, c.n_gt, c.n_det, c.n_tp));
        }
        s.push_str(&format!("mean,{:.6},,,\n", self.map));
        s
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Tp,
    Fp,
    Fn,
}

/// One box of a qualitative dump.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OverlayBox {
    pub image: usize,
    pub role: Role,
    pub class_id: usize,
    pub score: Option<f64>,
    /// `[x1, y1, x2, y2]`, normalized.
    pub corners: [f64; 4],
}

/// Per-image detections and ground truth in, AP report and overlays out.
/// Detections of all images are pooled per class and ranked by score;
/// equal scores keep image order.
pub fn evaluate_detections(
    per_image: &[(Vec<ScoredBox>, Vec<Target>)],
    iou_thresh: f64,
) -> (ApReport, Vec<OverlayBox>) {
    let mut pooled: BTreeMap<usize, (Vec<(f64, bool)>, usize)> = BTreeMap::new();
    let mut overlays = Vec::new();
    for (img, (dets, gts)) in per_image.iter().enumerate() {
        let m = match_detections(dets, gts, iou_thresh);
        for g in gts {
            pooled.entry(g.class_id).or_default().1 += 1;
        }
        for &i in &m.order {
            let d = &dets[i];
            pooled.entry(d.class_id).or_default().0.push((d.score, m.tp[i]));
            overlays.push(OverlayBox {
                image: img,
                role: if m.tp[i] { Role::Tp } else { Role::Fp },
                class_id: d.class_id,
                score: Some(d.score),
                corners: d.bbox.corners(),
            });
        }
        for (j, g) in gts.iter().enumerate() {
            if m.gt_match[j].is_none() {
                overlays.push(OverlayBox {
                    image: img,
                    role: Role::Fn,
                    class_id: g.class_id,
                    score: None,
                    corners: g.bbox.corners(),
                });
            }
        }
    }
    let per_class: Vec<ClassAp> = pooled
        .into_iter()
        .filter(|(_, (_, n_gt))| *n_gt > 0)
        .map(|(class_id, (dets, n_gt))| {
            let order = rank_order(dets.iter().map(|d| d.0));
            let flags: Vec<bool> = order.iter().map(|&i| dets[i].1).collect();
            ClassAp {
                class_id,
                ap: average_precision(&flags, n_gt),
                n_gt,
                n_det: dets.len(),
                n_tp: flags.iter().filter(|&&f| f).count(),
            }
        })
        .collect();
    let map = mean_ap(&per_class.iter().map(|c| c.ap).collect::<Vec<_>>());
    (ApReport { per_class, map }, overlays)
}

/// Thresholds used when turning raw grid outputs into final detections.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectConfig {
    pub conf_thresh: f64,
    pub nms_iou: f64,
    pub match_iou: f64,
}

impl Default for DetectConfig {
    fn default() -> Self {
        Self {
            conf_thresh: 0.25,
            nms_iou: 0.5,
            match_iou: DEFAULT_MATCH_IOU,
        }
    }
}

/// Forward pass plus NMS ranked by `c_det`.
pub fn detect(params: &ToyDetectorParams, image: &Image, cfg: &DetectConfig) -> Result<Vec<Detection>> {
    let fwd = forward(params, image)?;
    Ok(nms(&fwd.detections(), cfg.nms_iou, cfg.conf_thresh, |d| d.c_det))
}

/// Evaluate a detector over a labelled dataset; forward passes run in
/// parallel, results are combined in image order.
pub fn evaluate_model(
    params: &ToyDetectorParams,
    data: &Dataset,
    cfg: &DetectConfig,
) -> Result<(ApReport, Vec<OverlayBox>)> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_image = data
        .items
        .par_iter()
        .map(|item| {
            let dets = detect(params, &item.image, cfg)?;
            Ok((dets.iter().map(ScoredBox::from).collect(), item.objects.clone()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(evaluate_detections(&per_image, cfg.match_iou))
}

/// One JSON object per line.
pub fn overlays_to_jsonl(overlays: &[OverlayBox]) -> Result<String> {
    let mut s = String::new();
    for o in overlays {
        s.push_str(&serde_json::to_string(o)?);
        s.push('\n');
    }
    Ok(s)
}

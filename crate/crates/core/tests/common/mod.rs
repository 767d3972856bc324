//! Brute-force reference implementations and random instance generators
//! shared by the integration tests.

#![allow(dead_code)]

use mixadapt_core::detector::Target;
use mixadapt_core::eval::ScoredBox;
use mixadapt_core::mixing::{MixPlan, Rect, MIN_CLIPPED_EXTENT};
use mixadapt_core::{BBox, Detection, GaussianBox};
use rand::Rng;

pub const W: usize = 64;
pub const H: usize = 64;

/// Coordinates snap to the 1/16 lattice half of the time so that region
/// borders, equal scores and touching boxes actually occur.
fn coord<R: Rng>(rng: &mut R, lattice: bool) -> f64 {
    if lattice {
        rng.random_range(0..=16) as f64 / 16.0
    } else {
        rng.random_range(0.0..=1.0)
    }
}

pub fn random_bbox<R: Rng>(rng: &mut R) -> BBox {
    let lattice = rng.random_bool(0.5);
    let cx = coord(rng, lattice);
    let cy = coord(rng, lattice);
    let (w, h) = if lattice {
        (rng.random_range(1..=8) as f64 / 16.0, rng.random_range(1..=8) as f64 / 16.0)
    } else {
        (rng.random_range(0.02..0.6), rng.random_range(0.02..0.6))
    };
    BBox::new(cx, cy, w, h).unwrap()
}

pub fn random_detection<R: Rng>(rng: &mut R, classes: usize) -> Detection {
    let sigma = [0; 4].map(|_| rng.random_range(0.01..0.99));
    let c_det = if rng.random_bool(0.3) {
        rng.random_range(0..=10) as f64 / 10.0
    } else {
        rng.random_range(0.0..=1.0)
    };
    let g = GaussianBox::new(random_bbox(rng), sigma).unwrap();
    Detection::new(g, rng.random_range(0..classes), c_det)
}

pub fn random_detections<R: Rng>(rng: &mut R, max: usize, classes: usize) -> Vec<Detection> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| random_detection(rng, classes)).collect()
}

fn iou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (a.corners(), b.corners());
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Indices by descending score, ties to the lower index, by selection.
fn ranked(scores: &[f64]) -> Vec<usize> {
    let mut left: Vec<usize> = (0..scores.len()).collect();
    let mut out = Vec::new();
    while !left.is_empty() {
        let mut best = 0;
        for k in 1..left.len() {
            if scores[left[k]] > scores[left[best]] {
                best = k;
            }
        }
        out.push(left.remove(best));
    }
    out
}

/// A detection survives iff it clears the threshold and no surviving
/// same-class detection ranked above it overlaps it by more than `iou_thresh`.
pub fn nms_oracle(dets: &[Detection], iou_thresh: f64, conf_thresh: f64, score: impl Fn(&Detection) -> f64) -> Vec<usize> {
    let scores: Vec<f64> = dets.iter().map(&score).collect();
    let order = ranked(&scores);
    let n = dets.len();
    let mut overlap = vec![vec![false; n]; n];
    for i in 0..n {
        for j in 0..n {
            overlap[i][j] = dets[i].class_id == dets[j].class_id && iou(dets[i].bbox(), dets[j].bbox()) > iou_thresh;
        }
    }
    let mut alive = vec![false; n];
    for (rank, &i) in order.iter().enumerate() {
        alive[i] = scores[i] >= conf_thresh && !order[..rank].iter().any(|&j| alive[j] && overlap[j][i]);
    }
    order.into_iter().filter(|&i| alive[i]).collect()
}

fn point_in(r: &Rect, px: f64, py: f64) -> bool {
    let x_ok = r.x0 as f64 <= px && (px < r.x1 as f64 || (r.x1 == W && px == W as f64));
    let y_ok = r.y0 as f64 <= py && (py < r.y1 as f64 || (r.y1 == H && py == H as f64));
    x_ok && y_ok
}

/// Region of every detection by scanning all rectangles. Panics unless
/// exactly one rectangle holds the center.
pub fn assign_oracle(dets: &[Detection], rects: &[Rect]) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); rects.len()];
    for (i, d) in dets.iter().enumerate() {
        let (px, py) = (d.bbox().cx * W as f64, d.bbox().cy * H as f64);
        let hits: Vec<usize> = (0..rects.len()).filter(|&r| point_in(&rects[r], px, py)).collect();
        assert_eq!(hits.len(), 1, "center ({px}, {py}) lies in {} regions", hits.len());
        out[hits[0]].push(i);
    }
    out
}

/// Every `(detection, ground truth)` pair sorted by detection rank, then
/// IoU descending, then ground-truth index; a pair is accepted when both
/// sides are still free.
pub fn match_oracle(dets: &[ScoredBox], gts: &[Target], iou_thresh: f64) -> (Vec<bool>, Vec<Option<usize>>) {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let order = ranked(&scores);
    let mut rank = vec![0; dets.len()];
    for (r, &i) in order.iter().enumerate() {
        rank[i] = r;
    }
    let mut edges = Vec::new();
    for (i, d) in dets.iter().enumerate() {
        for (j, g) in gts.iter().enumerate() {
            let v = iou(&d.bbox, &g.bbox);
            if d.class_id == g.class_id && v >= iou_thresh {
                edges.push((rank[i], v, j, i));
            }
        }
    }
    edges.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.partial_cmp(&a.1).unwrap()).then(a.2.cmp(&b.2)));
    let mut tp = vec![false; dets.len()];
    let mut gm = vec![None; gts.len()];
    for (_, _, j, i) in edges {
        if !tp[i] && gm[j].is_none() {
            tp[i] = true;
            gm[j] = Some(i);
        }
    }
    (tp, gm)
}

fn norm(r: &Rect) -> [f64; 4] {
    [r.x0 as f64 / W as f64, r.y0 as f64 / H as f64, r.x1 as f64 / W as f64, r.y1 as f64 / H as f64]
}

fn inside(b: &[f64; 4], r: &[f64; 4]) -> bool {
    b[0] >= r[0] && b[1] >= r[1] && b[2] <= r[2] && b[3] <= r[3]
}

fn overlaps(b: &[f64; 4], r: &[f64; 4]) -> bool {
    b[0] < r[2] && b[2] > r[0] && b[1] < r[3] && b[3] > r[1]
}

/// Largest sub-box of `c` holding `(cx, cy)` that satisfies `ok`, with
/// edges taken from `c` or from the pasted rectangles.
fn largest_subbox(c: [f64; 4], cx: f64, cy: f64, pasted: &[[f64; 4]], ok: impl Fn(&[f64; 4]) -> bool) -> Option<[f64; 4]> {
    let xs: Vec<f64> = std::iter::once(c[0]).chain(pasted.iter().flat_map(|r| [r[0], r[2]])).collect();
    let xe: Vec<f64> = std::iter::once(c[2]).chain(pasted.iter().flat_map(|r| [r[0], r[2]])).collect();
    let ys: Vec<f64> = std::iter::once(c[1]).chain(pasted.iter().flat_map(|r| [r[1], r[3]])).collect();
    let ye: Vec<f64> = std::iter::once(c[3]).chain(pasted.iter().flat_map(|r| [r[1], r[3]])).collect();
    let mut best: Option<([f64; 4], f64)> = None;
    for &x0 in &xs {
        for &x1 in &xe {
            for &y0 in &ys {
                for &y1 in &ye {
                    let b = [x0, y0, x1, y1];
                    let within = x0 >= c[0] && x1 <= c[2] && y0 >= c[1] && y1 <= c[3];
                    let holds = x0 <= cx && cx <= x1 && y0 <= cy && cy <= y1;
                    if !(within && holds && x0 < x1 && y0 < y1 && ok(&b)) {
                        continue;
                    }
                    let area = (x1 - x0) * (y1 - y0);
                    if best.is_none_or(|(k, a)| area > a || (area == a && b < k)) {
                        best = Some((b, area));
                    }
                }
            }
        }
    }
    best.map(|(b, _)| b)
}

fn finish(c: [f64; 4]) -> Option<BBox> {
    let (bw, bh) = (c[2] - c[0], c[3] - c[1]);
    if bw <= MIN_CLIPPED_EXTENT || bh <= MIN_CLIPPED_EXTENT {
        return None;
    }
    Some(BBox::new(c[0] + bw / 2.0, c[1] + bh / 2.0, bw, bh).unwrap())
}

/// Target detections centered in the pasted area, shrunk to the largest box
/// inside it, followed by source detections centered elsewhere, shrunk to
/// the largest box clear of it.
pub fn combine_oracle(target: &[Detection], source: &[Detection], plan: &MixPlan) -> Vec<Detection> {
    if plan.no_mix {
        return Vec::new();
    }
    let pasted_px: Vec<Rect> = plan.selected.iter().map(|&i| plan.layout.rects[i]).collect();
    let pasted: Vec<[f64; 4]> = pasted_px.iter().map(norm).collect();
    // a target box stays in the tile holding its center, or in the bound of
    // all pasted tiles when they fill it exactly
    let mut bound = None;
    if pasted_px.len() > 1 {
        let b = [
            pasted.iter().map(|r| r[0]).fold(1.0, f64::min),
            pasted.iter().map(|r| r[1]).fold(1.0, f64::min),
            pasted.iter().map(|r| r[2]).fold(0.0, f64::max),
            pasted.iter().map(|r| r[3]).fold(0.0, f64::max),
        ];
        let px_area: usize = pasted_px.iter().map(|r| r.area()).sum();
        let bound_px = ((b[2] - b[0]) * W as f64).round() as usize * ((b[3] - b[1]) * H as f64).round() as usize;
        if px_area == bound_px {
            bound = Some(b);
        }
    }
    let in_pasted = |d: &Detection| {
        let (px, py) = (d.bbox().cx * W as f64, d.bbox().cy * H as f64);
        pasted_px.iter().any(|r| point_in(r, px, py))
    };
    let clamp = |d: &Detection| d.bbox().corners().map(|v| v.clamp(0.0, 1.0));

    let mut out = Vec::new();
    for d in target.iter().filter(|d| in_pasted(d)) {
        let (px, py) = (d.bbox().cx * W as f64, d.bbox().cy * H as f64);
        let own = pasted_px.iter().position(|r| point_in(r, px, py)).unwrap();
        let containers: Vec<[f64; 4]> = std::iter::once(pasted[own]).chain(bound).collect();
        let b = largest_subbox(clamp(d), d.bbox().cx, d.bbox().cy, &pasted, |b| containers.iter().any(|r| inside(b, r)));
        if let Some(bb) = b.and_then(finish) {
            out.push(d.with_box(bb));
        }
    }
    for d in source.iter().filter(|d| !in_pasted(d)) {
        let b = largest_subbox(clamp(d), d.bbox().cx, d.bbox().cy, &pasted, |b| !pasted.iter().any(|r| overlaps(b, r)));
        if let Some(bb) = b.and_then(finish) {
            out.push(d.with_box(bb));
        }
    }
    out
}

/// Richardson-extrapolated central difference of `f` at `x` along
/// coordinate `i`, together with the gap between the one-sided differences
/// at step `h`, which is large at a kink.
pub fn central_difference(f: impl Fn(&[f64]) -> f64, x: &[f64], i: usize, h: f64) -> (f64, f64) {
    let mut v = x.to_vec();
    let mut at = |d: f64| {
        v[i] = x[i] + d;
        f(&v)
    };
    let f0 = at(0.0);
    let (fp, fm) = (at(h), at(-h));
    let (fp2, fm2) = (at(h / 2.0), at(-h / 2.0));
    let d1 = (fp - fm) / (2.0 * h);
    let d2 = (fp2 - fm2) / h;
    ((4.0 * d2 - d1) / 3.0, ((fp - f0) / h - (f0 - fm) / h).abs())
}

/// Relative error with a floor on the scale so that two vanishing
/// gradients compare as equal.
pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

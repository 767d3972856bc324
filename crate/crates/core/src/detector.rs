//! A small grid detector with a Gaussian box head.
//!
//! The image is cut into `G x G` cells. Every cell gets a hand-crafted patch
//! descriptor; a two-layer perceptron maps the descriptors of the cell and
//! its neighbors to objectness, class, box-mean and box-variance logits.
//! Gradients are derived by hand, so the whole model trains with plain SGD.

use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection, GaussianBox};
use crate::image::Image;
use crate::losses::{self, box_array, sigmoid, BoxLossConfig};

/// Gradient-orientation bins in the patch descriptor.
pub const ORIENTATION_BINS: usize = 4;
/// Multiplier applied to gradient features so they sit near unit scale.
const GRADIENT_GAIN: f64 = 4.0;
/// tan(22.5 deg), the orientation bin boundary.
const TAN_22_5: f64 = 0.414_213_562_373_095_1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct DetectorConfig {
    pub grid: usize,
    pub hidden: usize,
    pub num_classes: usize,
    pub channels: usize,
    /// Neighborhood radius in cells; 1 means the 3x3 block around a cell.
    pub radius: usize,
    /// Descriptors are computed on sub-cells of side `cell / subdivision`.
    pub subdivision: usize,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            grid: 8,
            hidden: 32,
            num_classes: 2,
            channels: 3,
            radius: 1,
            subdivision: 2,
        }
    }
}

impl DetectorConfig {
    pub fn descriptor_dim(&self) -> usize {
        3 * self.channels + ORIENTATION_BINS
    }

    /// Side of the descriptor window fed to the head, in sub-cells.
    pub fn window(&self) -> usize {
        (2 * self.radius + 1) * self.subdivision
    }

    pub fn input_dim(&self) -> usize {
        self.window() * self.window() * self.descriptor_dim()
    }

    pub fn output_dim(&self) -> usize {
        1 + self.num_classes + 8
    }

    pub fn cells(&self) -> usize {
        self.grid * self.grid
    }

    fn layout(&self) -> ParamLayout {
        let (i, h, o) = (self.input_dim(), self.hidden, self.output_dim());
        ParamLayout {
            w1: 0,
            b1: h * i,
            w2: h * i + h,
            b2: h * i + h + o * h,
            len: h * i + h + o * h + o,
        }
    }

    fn validate(&self) -> Result<()> {
        if self.grid == 0 || self.hidden == 0 || self.num_classes == 0 || self.channels == 0 || self.subdivision == 0 {
            return Err(Error::Config(format!("degenerate detector config {self:?}")));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy)]
struct ParamLayout {
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
    len: usize,
}

// output slots
const OBJ: usize = 0;
fn cls_slot(k: usize) -> usize {
    1 + k
}
fn box_slot(cfg: &DetectorConfig, j: usize) -> usize {
    1 + cfg.num_classes + j
}
fn var_slot(cfg: &DetectorConfig, j: usize) -> usize {
    5 + cfg.num_classes + j
}

/// Weights of the perceptron head, stored flat.
///
/// Layout: `w1` (hidden x input), `b1`, `w2` (output x hidden), `b2`.
#[derive(Debug, Clone, PartialEq)]
pub struct ToyDetectorParams {
    pub config: DetectorConfig,
    pub values: Vec<f64>,
}

impl ToyDetectorParams {
    pub fn zeros(config: DetectorConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            values: vec![0.0; config.layout().len],
        })
    }

    /// Uniform fan-in initialization. The variance head starts at bias -2 so
    /// early box confidences are high; objectness and extents start at
    /// plausible priors.
    pub fn init<R: Rng + ?Sized>(config: DetectorConfig, rng: &mut R) -> Result<Self> {
        let mut p = Self::zeros(config)?;
        let l = config.layout();
        let (i, h, o) = (config.input_dim(), config.hidden, config.output_dim());
        let a1 = (3.0 / i as f64).sqrt();
        for v in &mut p.values[l.w1..l.b1] {
            *v = rng.random_range(-a1..a1);
        }
        let a2 = (3.0 / h as f64).sqrt() * 0.5;
        for v in &mut p.values[l.w2..l.b2] {
            *v = rng.random_range(-a2..a2);
        }
        let b2 = &mut p.values[l.b2..l.b2 + o];
        b2[OBJ] = -3.0;
        b2[box_slot(&config, 2)] = -1.1;
        b2[box_slot(&config, 3)] = -1.1;
        for j in 0..4 {
            b2[var_slot(&config, j)] = -2.0;
        }
        Ok(p)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }
}

/// Per-cell descriptors, `G*G x (3C+4)` row-major.
///
/// For each cell: channel means, channel standard deviations, channel mean
/// gradient magnitudes, and a magnitude-weighted 4-bin histogram of gray-level
/// gradient orientation (0, 45, 90, 135 degrees).
pub fn descriptors(image: &Image, grid: usize) -> Result<Vec<f64>> {
    let (w, h, ch) = (image.width(), image.height(), image.channels());
    if grid == 0 || w % grid != 0 || h % grid != 0 {
        return Err(Error::ShapeMismatch(format!(
            "image {w}x{h} not divisible by grid {grid}"
        )));
    }
    let (cw, chh) = (w / grid, h / grid);
    let dim = 3 * ch + ORIENTATION_BINS;
    let npx = (cw * chh) as f64;

    // central differences, one-sided at the borders
    let sample = |x: usize, y: usize, c: usize| image.get(x, y, c) as f64;
    let grad_at = |x: usize, y: usize, c: usize| -> (f64, f64) {
        let (xl, xr) = (x.saturating_sub(1), (x + 1).min(w - 1));
        let (yu, yd) = (y.saturating_sub(1), (y + 1).min(h - 1));
        let gx = (sample(xr, y, c) - sample(xl, y, c)) / (xr - xl) as f64;
        let gy = (sample(x, yd, c) - sample(x, yu, c)) / (yd - yu) as f64;
        (gx, gy)
    };

    let mut out = vec![0.0; grid * grid * dim];
    for gy in 0..grid {
        for gx in 0..grid {
            let d = &mut out[(gy * grid + gx) * dim..(gy * grid + gx + 1) * dim];
            let (x0, y0) = (gx * cw, gy * chh);
            for y in y0..y0 + chh {
                for x in x0..x0 + cw {
                    let (mut sx, mut sy) = (0.0, 0.0);
                    for c in 0..ch {
                        let v = sample(x, y, c);
                        d[c] += v;
                        d[ch + c] += v * v;
                        let (ix, iy) = grad_at(x, y, c);
                        d[2 * ch + c] += (ix * ix + iy * iy).sqrt();
                        sx += ix;
                        sy += iy;
                    }
                    let (sx, sy) = (sx / ch as f64, sy / ch as f64);
                    let mag = (sx * sx + sy * sy).sqrt();
                    let (ax, ay) = (sx.abs(), sy.abs());
                    let bin = if ay <= TAN_22_5 * ax {
                        0
                    } else if ax <= TAN_22_5 * ay {
                        2
                    } else if sx * sy > 0.0 {
                        1
                    } else {
                        3
                    };
                    d[3 * ch + bin] += mag;
                }
            }
            for c in 0..ch {
                let mean = d[c] / npx;
                let var = (d[ch + c] / npx - mean * mean).max(0.0);
                d[c] = mean;
                d[ch + c] = var.sqrt();
                d[2 * ch + c] *= GRADIENT_GAIN / npx;
            }
            for b in 0..ORIENTATION_BINS {
                d[3 * ch + b] *= GRADIENT_GAIN / npx;
            }
        }
    }
    Ok(out)
}

/// Stack the sub-cell descriptors of each cell's neighborhood into one input
/// row, zero-padded outside the image.
fn cell_inputs(desc: &[f64], cfg: &DetectorConfig) -> Vec<f64> {
    let (g, sub, dim) = (cfg.grid, cfg.subdivision, cfg.descriptor_dim());
    let fine = (g * sub) as isize;
    let (win, in_dim) = (cfg.window() as isize, cfg.input_dim());
    let reach = (cfg.radius * sub) as isize;
    let mut x = vec![0.0; cfg.cells() * in_dim];
    for cy in 0..g {
        for cx in 0..g {
            let row = &mut x[(cy * g + cx) * in_dim..][..in_dim];
            let (y0, x0) = ((cy * sub) as isize - reach, (cx * sub) as isize - reach);
            let mut slot = 0;
            for ny in y0..y0 + win {
                for nx in x0..x0 + win {
                    if ny >= 0 && ny < fine && nx >= 0 && nx < fine {
                        let src = ((ny * fine + nx) as usize) * dim;
                        row[slot..slot + dim].copy_from_slice(&desc[src..src + dim]);
                    }
                    slot += dim;
                }
            }
        }
    }
    x
}

/// Decoded output of one cell.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CellPrediction {
    pub objectness: f64,
    /// Means `(cx, cy, w, h)`, normalized.
    pub mu: [f64; 4],
    pub sigma: [f64; 4],
}

/// Raw network outputs plus the activations needed by the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardPass {
    config: DetectorConfig,
    inputs: Vec<f64>,
    hidden: Vec<f64>,
    /// `G*G x output_dim` logits.
    pub outputs: Vec<f64>,
}

impl ForwardPass {
    pub fn config(&self) -> &DetectorConfig {
        &self.config
    }

    pub fn logits(&self, cell: usize) -> &[f64] {
        let o = self.config.output_dim();
        &self.outputs[cell * o..(cell + 1) * o]
    }

    pub fn cell(&self, cell: usize) -> CellPrediction {
        let cfg = &self.config;
        let z = self.logits(cell);
        let g = cfg.grid as f64;
        let (col, row) = ((cell % cfg.grid) as f64, (cell / cfg.grid) as f64);
        CellPrediction {
            objectness: sigmoid(z[OBJ]),
            mu: [
                (col + sigmoid(z[box_slot(cfg, 0)])) / g,
                (row + sigmoid(z[box_slot(cfg, 1)])) / g,
                sigmoid(z[box_slot(cfg, 2)]),
                sigmoid(z[box_slot(cfg, 3)]),
            ],
            sigma: std::array::from_fn(|j| sigmoid(z[var_slot(cfg, j)])),
        }
    }

    pub fn class_probs(&self, cell: usize) -> Vec<f64> {
        let z = self.logits(cell);
        (0..self.config.num_classes)
            .map(|k| sigmoid(z[cls_slot(k)]))
            .collect()
    }

    /// One detection per cell, in cell order. `c_det` is objectness times the
    /// best class probability.
    pub fn detections(&self) -> Vec<Detection> {
        (0..self.config.cells())
            .map(|cell| {
                let p = self.cell(cell);
                let probs = self.class_probs(cell);
                let (class_id, best) = probs
                    .iter()
                    .enumerate()
                    .fold((0, f64::NEG_INFINITY), |acc, (k, &v)| if v > acc.1 { (k, v) } else { acc });
                let mu = BBox {
                    cx: p.mu[0],
                    cy: p.mu[1],
                    w: p.mu[2],
                    h: p.mu[3],
                };
                // sigmoid can round to exactly 0 or 1 for extreme logits
                let sigma = p.sigma.map(|s| s.clamp(f64::MIN_POSITIVE, 1.0 - f64::EPSILON));
                Detection::new(GaussianBox { mu, sigma }, class_id, p.objectness * best)
            })
            .collect()
    }
}

pub fn forward(params: &ToyDetectorParams, image: &Image) -> Result<ForwardPass> {
    let cfg = params.config;
    if image.channels() != cfg.channels {
        return Err(Error::ShapeMismatch(format!(
            "detector expects {} channels, image has {}",
            cfg.channels,
            image.channels()
        )));
    }
    let desc = descriptors(image, cfg.grid * cfg.subdivision)?;
    let inputs = cell_inputs(&desc, &cfg);
    let l = cfg.layout();
    let (ni, nh, no) = (cfg.input_dim(), cfg.hidden, cfg.output_dim());
    let w1 = &params.values[l.w1..l.b1];
    let b1 = &params.values[l.b1..l.w2];
    let w2 = &params.values[l.w2..l.b2];
    let b2 = &params.values[l.b2..l.len];

    let cells = cfg.cells();
    let mut hidden = vec![0.0; cells * nh];
    let mut outputs = vec![0.0; cells * no];
    for cell in 0..cells {
        let x = &inputs[cell * ni..(cell + 1) * ni];
        let hrow = &mut hidden[cell * nh..(cell + 1) * nh];
        for j in 0..nh {
            hrow[j] = (b1[j] + dot(&w1[j * ni..(j + 1) * ni], x)).tanh();
        }
        let orow = &mut outputs[cell * no..(cell + 1) * no];
        for k in 0..no {
            orow[k] = b2[k] + dot(&w2[k * nh..(k + 1) * nh], hrow);
        }
    }
    Ok(ForwardPass {
        config: cfg,
        inputs,
        hidden,
        outputs,
    })
}

#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A labelled box used as a training target.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Target {
    pub bbox: BBox,
    pub class_id: usize,
}

/// Cell index whose half-open extent contains the normalized coordinate
/// pair; coordinate 1.0 maps to the last cell.
pub fn cell_of(cx: f64, cy: f64, grid: usize) -> usize {
    let idx = |v: f64| ((v * grid as f64).floor() as usize).min(grid - 1);
    idx(cy) * grid + idx(cx)
}

/// For each cell, the index of the target it is responsible for. When several
/// targets share a cell the largest one wins (ties to the earlier target).
pub fn match_targets(targets: &[Target], grid: usize) -> Vec<Option<usize>> {
    let mut owner: Vec<Option<usize>> = vec![None; grid * grid];
    for (i, t) in targets.iter().enumerate() {
        let cell = cell_of(t.bbox.cx, t.bbox.cy, grid);
        match owner[cell] {
            Some(j) if targets[j].bbox.area() >= t.bbox.area() => {}
            _ => owner[cell] = Some(i),
        }
    }
    owner
}

/// Weights of the three loss terms.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossWeights {
    pub box_weight: f64,
    pub obj_weight: f64,
    pub cls_weight: f64,
    /// Weight of the positive term in the objectness cross-entropy.
    pub obj_pos_weight: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            box_weight: 1.0,
            obj_weight: 1.0,
            cls_weight: 1.0,
            obj_pos_weight: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionLossConfig {
    pub weights: LossWeights,
    pub box_loss: BoxLossConfig,
}

impl DetectionLossConfig {
    /// Variances measured in grid-cell units.
    pub fn for_grid(grid: usize) -> Self {
        Self {
            weights: LossWeights::default(),
            box_loss: BoxLossConfig {
                coord_scale: grid as f64,
                ..BoxLossConfig::default()
            },
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct DetectionLoss {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cl: f64,
    pub total: f64,
    pub matched: usize,
}

/// Detection loss of a forward pass against `targets` and its gradient with
/// respect to the raw outputs (`G*G x output_dim`).
pub fn loss_and_output_grad(
    fwd: &ForwardPass,
    targets: &[Target],
    cfg: &DetectionLossConfig,
) -> (DetectionLoss, Vec<f64>) {
    let dc = fwd.config;
    let no = dc.output_dim();
    let cells = dc.cells();
    let owner = match_targets(targets, dc.grid);
    let mut d_out = vec![0.0; fwd.outputs.len()];

    let obj_logits: Vec<f64> = (0..cells).map(|c| fwd.logits(c)[OBJ]).collect();
    let obj_target: Vec<f64> = owner.iter().map(|o| o.is_some() as u8 as f64).collect();
    let obj = losses::bce_mean_logits_weighted(&obj_logits, &obj_target, cfg.weights.obj_pos_weight);
    for c in 0..cells {
        d_out[c * no + OBJ] += cfg.weights.obj_weight * obj.grad[c];
    }

    let matched: Vec<(usize, usize)> = owner
        .iter()
        .enumerate()
        .filter_map(|(c, o)| o.map(|t| (c, t)))
        .collect();
    let (mut l_box, mut l_cl) = (0.0, 0.0);
    if !matched.is_empty() {
        let n = matched.len() as f64;
        let k = dc.num_classes;
        let mut cls_logits = Vec::with_capacity(matched.len() * k);
        let mut cls_targets = Vec::with_capacity(matched.len());
        for &(c, t) in &matched {
            let z = fwd.logits(c);
            let pred = fwd.cell(c);
            let (v, g) = losses::box_term(&pred.mu, &pred.sigma, &box_array(&targets[t].bbox), &cfg.box_loss);
            l_box += v / n;
            let wb = cfg.weights.box_weight / n;
            let row = &mut d_out[c * no..(c + 1) * no];
            for j in 0..4 {
                let s = sigmoid(z[box_slot(&dc, j)]);
                let mut dmu_dz = s * (1.0 - s);
                if j < 2 {
                    dmu_dz /= dc.grid as f64;
                }
                row[box_slot(&dc, j)] += wb * g.d_mu[j] * dmu_dz;
                let sv = pred.sigma[j];
                row[var_slot(&dc, j)] += wb * g.d_sigma[j] * sv * (1.0 - sv);
            }
            cls_logits.extend((0..k).map(|q| z[cls_slot(q)]));
            cls_targets.push(targets[t].class_id);
        }
        let cls = losses::classification_loss_logits(&cls_logits, &cls_targets, k);
        l_cl = cls.value;
        for (m, &(c, _)) in matched.iter().enumerate() {
            for q in 0..k {
                d_out[c * no + cls_slot(q)] += cfg.weights.cls_weight * cls.grad[m * k + q];
            }
        }
    }

    let w = &cfg.weights;
    let loss = DetectionLoss {
        l_box,
        l_obj: obj.value,
        l_cl,
        total: w.box_weight * l_box + w.obj_weight * obj.value + w.cls_weight * l_cl,
        matched: matched.len(),
    };
    (loss, d_out)
}

/// Backpropagate an output gradient through the head, accumulating
/// `scale * dL/dparams` into `grads`.
pub fn backward_from_outputs(
    params: &ToyDetectorParams,
    fwd: &ForwardPass,
    d_out: &[f64],
    scale: f64,
    grads: &mut [f64],
) {
    let cfg = params.config;
    let l = cfg.layout();
    let (ni, nh, no) = (cfg.input_dim(), cfg.hidden, cfg.output_dim());
    let w2 = &params.values[l.w2..l.b2];
    let mut d_hidden = vec![0.0; nh];
    for cell in 0..cfg.cells() {
        let dz = &d_out[cell * no..(cell + 1) * no];
        if dz.iter().all(|&v| v == 0.0) {
            continue;
        }
        let h = &fwd.hidden[cell * nh..(cell + 1) * nh];
        let x = &fwd.inputs[cell * ni..(cell + 1) * ni];
        d_hidden.iter_mut().for_each(|v| *v = 0.0);
        for k in 0..no {
            let g = scale * dz[k];
            if g == 0.0 {
                continue;
            }
            grads[l.b2 + k] += g;
            let gw = &mut grads[l.w2 + k * nh..l.w2 + (k + 1) * nh];
            let wrow = &w2[k * nh..(k + 1) * nh];
            for j in 0..nh {
                gw[j] += g * h[j];
                d_hidden[j] += g * wrow[j];
            }
        }
        for j in 0..nh {
            let da = d_hidden[j] * (1.0 - h[j] * h[j]);
            if da == 0.0 {
                continue;
            }
            grads[l.b1 + j] += da;
            let gw = &mut grads[l.w1 + j * ni..l.w1 + (j + 1) * ni];
            for (gv, xv) in gw.iter_mut().zip(x) {
                *gv += da * xv;
            }
        }
    }
}

/// Forward, loss and parameter gradient for one image.
pub fn backward(
    params: &ToyDetectorParams,
    image: &Image,
    targets: &[Target],
    cfg: &DetectionLossConfig,
) -> Result<(DetectionLoss, Vec<f64>)> {
    let fwd = forward(params, image)?;
    let (loss, d_out) = loss_and_output_grad(&fwd, targets, cfg);
    let mut grads = vec![0.0; params.len()];
    backward_from_outputs(params, &fwd, &d_out, 1.0, &mut grads);
    Ok((loss, grads))
}

/// Momentum SGD: `v <- momentum * v + g`, `theta <- theta - lr * v`.
#[derive(Debug, Clone, PartialEq)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    velocity: Vec<f64>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, len: usize) -> Self {
        Self {
            lr,
            momentum,
            velocity: vec![0.0; len],
        }
    }

    pub fn step(&mut self, params: &mut ToyDetectorParams, grads: &[f64]) {
        sgd_step(&mut params.values, grads, self.lr, self.momentum, &mut self.velocity);
    }
}

pub fn sgd_step(params: &mut [f64], grads: &[f64], lr: f64, momentum: f64, velocity: &mut [f64]) {
    assert_eq!(params.len(), grads.len());
    assert_eq!(params.len(), velocity.len());
    for ((p, &g), v) in params.iter_mut().zip(grads).zip(velocity.iter_mut()) {
        *v = momentum * *v + g;
        *p -= lr * *v;
    }
}

const CHECKPOINT_MAGIC: &str = "mixadapt-detector";
const CHECKPOINT_VERSION: u32 = 1;

/// Text checkpoint: a header of `key value` lines followed by `tensor name
/// rows cols` blocks, one row per line. Values use the shortest decimal form
/// that parses back to the same bits.
pub fn checkpoint_to_string(params: &ToyDetectorParams) -> String {
    let c = params.config;
    let l = c.layout();
    let mut s = String::new();
    let _ = writeln!(s, "{CHECKPOINT_MAGIC} {CHECKPOINT_VERSION}");
    let _ = writeln!(s, "grid {}", c.grid);
    let _ = writeln!(s, "hidden {}", c.hidden);
    let _ = writeln!(s, "classes {}", c.num_classes);
    let _ = writeln!(s, "channels {}", c.channels);
    let _ = writeln!(s, "radius {}", c.radius);
    let _ = writeln!(s, "subdivision {}", c.subdivision);
    let blocks = [
        ("w1", c.hidden, c.input_dim(), l.w1),
        ("b1", 1, c.hidden, l.b1),
        ("w2", c.output_dim(), c.hidden, l.w2),
        ("b2", 1, c.output_dim(), l.b2),
    ];
    for (name, rows, cols, off) in blocks {
        let _ = writeln!(s, "tensor {name} {rows} {cols}");
        for r in 0..rows {
            let row = &params.values[off + r * cols..off + (r + 1) * cols];
            let line: Vec<String> = row.iter().map(|v| format!("{v:?}")).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
    }
    s
}

pub fn checkpoint_from_str(text: &str) -> Result<ToyDetectorParams> {
    let bad = |line: usize, msg: String| Error::Checkpoint(format!("line {line}: {msg}"));
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut next = |what: &str| {
        lines
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("unexpected end of file, expected {what}")))
    };

    let (n, head) = next("header")?;
    let mut parts = head.split_whitespace();
    if parts.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(n, "not a detector checkpoint".into()));
    }
    let version: u32 = parts
        .next()
        .and_then(|v| v.parse().ok())
        .ok_or_else(|| bad(n, "missing version".into()))?;
    if version != CHECKPOINT_VERSION {
        return Err(bad(n, format!("unsupported version {version}")));
    }

    let mut field = |key: &str| -> Result<usize> {
        let (n, line) = next(key)?;
        match line.split_once(' ') {
            Some((k, v)) if k == key => v.trim().parse().map_err(|_| bad(n, format!("bad {key}"))),
            _ => Err(bad(n, format!("expected `{key}`"))),
        }
    };
    let config = DetectorConfig {
        grid: field("grid")?,
        hidden: field("hidden")?,
        num_classes: field("classes")?,
        channels: field("channels")?,
        radius: field("radius")?,
        subdivision: field("subdivision")?,
    };
    let mut params = ToyDetectorParams::zeros(config)?;
    let l = config.layout();
    let blocks = [
        ("w1", config.hidden, config.input_dim(), l.w1),
        ("b1", 1, config.hidden, l.b1),
        ("w2", config.output_dim(), config.hidden, l.w2),
        ("b2", 1, config.output_dim(), l.b2),
    ];
    for (name, rows, cols, off) in blocks {
        let (n, line) = next(name)?;
        let expect = format!("tensor {name} {rows} {cols}");
        if line.trim() != expect {
            return Err(bad(n, format!("expected `{expect}`, found `{line}`")));
        }
        for r in 0..rows {
            let (n, line) = next(name)?;
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|v| v.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| bad(n, format!("{e}")))?;
            if vals.len() != cols {
                return Err(bad(n, format!("expected {cols} values, found {}", vals.len())));
            }
            params.values[off + r * cols..off + (r + 1) * cols].copy_from_slice(&vals);
        }
    }
    Ok(params)
}

pub fn save_checkpoint(params: &ToyDetectorParams, path: &Path) -> Result<()> {
    std::fs::write(path, checkpoint_to_string(params)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<ToyDetectorParams> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_str(&text)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn small_config() -> DetectorConfig {
        DetectorConfig {
            grid: 4,
            hidden: 6,
            num_classes: 2,
            channels: 3,
            radius: 1,
            subdivision: 1,
        }
    }

    fn random_image(rng: &mut ChaCha8Rng, w: usize, h: usize) -> Image {
        let data = (0..w * h * 3).map(|_| rng.random_range(0.0..1.0f32)).collect();
        Image::new(w, h, 3, data).unwrap()
    }

    #[test]
    fn zero_params_decode_to_cell_centers() {
        let cfg = DetectorConfig::default();
        let p = ToyDetectorParams::zeros(cfg).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let img = random_image(&mut rng, 64, 64);
        let fwd = forward(&p, &img).unwrap();
        let dets = fwd.detections();
        assert_eq!(dets.len(), 64);
        for (i, _) in dets.iter().enumerate() {
            let c = fwd.cell(i);
            assert_eq!(c.objectness, 0.5);
            let (col, row) = ((i % 8) as f64, (i / 8) as f64);
            assert!((c.mu[0] - (col + 0.5) / 8.0).abs() < 1e-15);
            assert!((c.mu[1] - (row + 0.5) / 8.0).abs() < 1e-15);
        }
    }

    #[test]
    fn forward_is_deterministic_and_consistent() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let p = ToyDetectorParams::init(DetectorConfig::default(), &mut rng).unwrap();
        let img = random_image(&mut rng, 64, 64);
        let a = forward(&p, &img).unwrap();
        let b = forward(&p, &img).unwrap();
        assert_eq!(a.outputs, b.outputs);
        for (i, d) in a.detections().iter().enumerate() {
            let probs = a.class_probs(i);
            let best = probs.iter().cloned().fold(f64::MIN, f64::max);
            assert_eq!(d.c_det, a.cell(i).objectness * best);
            assert!(d.c_det > 0.0 && d.c_det < 1.0);
            let [x1, y1, x2, y2] = [
                (i % 8) as f64 / 8.0,
                (i / 8) as f64 / 8.0,
                (i % 8 + 1) as f64 / 8.0,
                (i / 8 + 1) as f64 / 8.0,
            ];
            let b = d.bbox();
            assert!(b.cx > x1 && b.cx < x2 && b.cy > y1 && b.cy < y2);
            assert!(b.w > 0.0 && b.w <= 1.0 && b.h > 0.0 && b.h <= 1.0);
        }
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let p = ToyDetectorParams::zeros(DetectorConfig::default()).unwrap();
        let img = Image::filled(60, 64, 3, 0.5).unwrap();
        assert!(forward(&p, &img).is_err());
        let gray = Image::filled(64, 64, 1, 0.5).unwrap();
        assert!(forward(&p, &gray).is_err());
    }

    #[test]
    fn descriptor_of_flat_image() {
        let img = Image::filled(16, 16, 3, 0.25).unwrap();
        let d = descriptors(&img, 2).unwrap();
        assert_eq!(d.len(), 4 * 13);
        for cell in d.chunks(13) {
            assert!(cell[..3].iter().all(|&v| (v - 0.25).abs() < 1e-7));
            assert!(cell[3..].iter().all(|&v| v.abs() < 1e-7));
        }
    }

    #[test]
    fn orientation_bins_follow_edges() {
        // vertical edge => horizontal gradient => bin 0
        let mut img = Image::filled(16, 16, 3, 0.0).unwrap();
        for y in 0..16 {
            for x in 8..16 {
                for c in 0..3 {
                    img.set(x, y, c, 1.0);
                }
            }
        }
        let d = descriptors(&img, 1).unwrap();
        assert!(d[9] > 0.0);
        assert_eq!(d[10], 0.0);
        assert_eq!(d[11], 0.0);
        assert_eq!(d[12], 0.0);
    }

    #[test]
    fn match_targets_rules() {
        let t = |cx, cy, w, h, class_id| Target {
            bbox: BBox::new(cx, cy, w, h).unwrap(),
            class_id,
        };
        let owner = match_targets(&[t(0.5, 0.5, 0.2, 0.2, 0)], 8);
        assert_eq!(owner[4 * 8 + 4], Some(0));
        assert_eq!(owner.iter().filter(|o| o.is_some()).count(), 1);

        let owner = match_targets(&[t(0.51, 0.51, 0.1, 0.1, 0), t(0.52, 0.52, 0.3, 0.3, 1)], 8);
        assert_eq!(owner[4 * 8 + 4], Some(1));
        let owner = match_targets(&[t(1.0, 1.0, 0.1, 0.1, 0)], 8);
        assert_eq!(owner[63], Some(0));
    }

    fn targets_for(rng: &mut ChaCha8Rng, n: usize) -> Vec<Target> {
        (0..n)
            .map(|_| Target {
                bbox: BBox::new(
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.05..0.95),
                    rng.random_range(0.1..0.4),
                    rng.random_range(0.1..0.4),
                )
                .unwrap(),
                class_id: rng.random_range(0..2),
            })
            .collect()
    }

    #[test]
    fn backward_matches_finite_differences() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for likelihood in [losses::Likelihood::Kernel, losses::Likelihood::ScaledPdf] {
            let mut loss_cfg = DetectionLossConfig::for_grid(cfg.grid);
            loss_cfg.box_loss.likelihood = likelihood;
            for _ in 0..5 {
                let p = ToyDetectorParams::init(cfg, &mut rng).unwrap();
                let img = random_image(&mut rng, 32, 32);
                let targets = targets_for(&mut rng, 3);
                let (_, g) = backward(&p, &img, &targets, &loss_cfg).unwrap();
                let h = 1e-5;
                for _ in 0..40 {
                    let i = rng.random_range(0..p.len());
                    let eval = |d: f64| {
                        let mut q = p.clone();
                        q.values[i] += d;
                        let f = forward(&q, &img).unwrap();
                        loss_and_output_grad(&f, &targets, &loss_cfg).0.total
                    };
                    let fd = (eval(h) - eval(-h)) / (2.0 * h);
                    let scale = g[i].abs().max(fd.abs());
                    if scale < 1e-7 {
                        continue;
                    }
                    assert!((g[i] - fd).abs() / scale < 1e-4, "param {i}: an={} fd={fd}", g[i]);
                }
            }
        }
    }

    #[test]
    fn no_targets_means_no_box_gradient() {
        let cfg = small_config();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = ToyDetectorParams::init(cfg, &mut rng).unwrap();
        let img = random_image(&mut rng, 32, 32);
        let fwd = forward(&p, &img).unwrap();
        let targets = vec![Target {
            bbox: BBox::new(0.1, 0.1, 0.2, 0.2).unwrap(),
            class_id: 0,
        }];
        let (_, d_out) = loss_and_output_grad(&fwd, &targets, &DetectionLossConfig::for_grid(4));
        let no = cfg.output_dim();
        for cell in 1..cfg.cells() {
            for j in 0..4 {
                assert_eq!(d_out[cell * no + box_slot(&cfg, j)], 0.0);
                assert_eq!(d_out[cell * no + var_slot(&cfg, j)], 0.0);
            }
        }
        assert!((0..4).any(|j| d_out[box_slot(&cfg, j)] != 0.0));
    }

    #[test]
    fn zero_loss_gives_zero_gradient() {
        let cfg = small_config();
        let p = ToyDetectorParams::zeros(cfg).unwrap();
        let img = Image::filled(32, 32, 3, 0.3).unwrap();
        let loss_cfg = DetectionLossConfig {
            weights: LossWeights {
                box_weight: 1.0,
                obj_weight: 0.0,
                cls_weight: 0.0,
                obj_pos_weight: 1.0,
            },
            ..DetectionLossConfig::for_grid(4)
        };
        // a target sitting exactly on the decoded zero-weight box
        let targets = vec![Target {
            bbox: BBox::new(0.125, 0.125, 0.5, 0.5).unwrap(),
            class_id: 0,
        }];
        let (loss, g) = backward(&p, &img, &targets, &loss_cfg).unwrap();
        assert_eq!(loss.total, 0.0);
        assert!(g.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn sgd_examples() {
        let mut p = vec![1.0, -2.0];
        let mut v = vec![0.0; 2];
        sgd_step(&mut p, &[0.0, 0.0], 0.1, 0.9, &mut v);
        assert_eq!(p, vec![1.0, -2.0]);
        sgd_step(&mut p, &[3.0, 1.0], 0.0, 0.9, &mut v);
        assert_eq!(p, vec![1.0, -2.0]);

        // hand sequence: lr 0.1, momentum 0.5, grads 1 then 1
        // v1 = 1, p1 = 1 - 0.1 = 0.9; v2 = 0.5 + 1 = 1.5, p2 = 0.9 - 0.15 = 0.75
        let mut p = vec![1.0];
        let mut v = vec![0.0];
        sgd_step(&mut p, &[1.0], 0.1, 0.5, &mut v);
        assert!((p[0] - 0.9).abs() < 1e-15);
        sgd_step(&mut p, &[1.0], 0.1, 0.5, &mut v);
        assert!((p[0] - 0.75).abs() < 1e-15);
        // one combined step with the summed gradient lands elsewhere
        let mut q = vec![1.0];
        sgd_step(&mut q, &[2.0], 0.1, 0.5, &mut [0.0]);
        assert!((q[0] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut p = ToyDetectorParams::init(DetectorConfig::default(), &mut rng).unwrap();
        p.values[0] = 1.0 / 3.0;
        p.values[1] = -0.0;
        p.values[2] = 1e-300;
        let text = checkpoint_to_string(&p);
        let q = checkpoint_from_str(&text).unwrap();
        assert_eq!(p.config, q.config);
        for (a, b) in p.values.iter().zip(&q.values) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert_eq!(checkpoint_to_string(&q), text);
    }

    #[test]
    fn checkpoint_errors() {
        assert!(checkpoint_from_str("").is_err());
        assert!(checkpoint_from_str("something else 1\n").is_err());
        let p = ToyDetectorParams::zeros(small_config()).unwrap();
        let text = checkpoint_to_string(&p);
        let truncated: String = text.lines().take(9).collect::<Vec<_>>().join("\n");
        assert!(checkpoint_from_str(&truncated).is_err());
        let corrupted = text.replacen("0.0", "zero", 1);
        assert!(checkpoint_from_str(&corrupted).is_err());
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let cfg = DetectorConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let mut p = ToyDetectorParams::init(cfg, &mut rng).unwrap();
        // bright squares on a dark background
        let mut batch = Vec::new();
        for k in 0..4 {
            let mut img = Image::filled(64, 64, 3, 0.1).unwrap();
            let (x0, y0) = (8 + 8 * k, 16 + 4 * k);
            for y in y0..y0 + 16 {
                for x in x0..x0 + 16 {
                    for c in 0..3 {
                        img.set(x, y, c, 0.9);
                    }
                }
            }
            let t = Target {
                bbox: BBox::new((x0 + 8) as f64 / 64.0, (y0 + 8) as f64 / 64.0, 0.25, 0.25).unwrap(),
                class_id: 0,
            };
            batch.push((img, vec![t]));
        }
        let loss_cfg = DetectionLossConfig::for_grid(cfg.grid);
        let total = |p: &ToyDetectorParams| -> f64 {
            batch
                .iter()
                .map(|(img, t)| backward(p, img, t, &loss_cfg).unwrap().0.total)
                .sum()
        };
        let before = total(&p);
        let mut opt = Sgd::new(1e-2, 0.9, p.len());
        for _ in 0..100 {
            for (img, t) in &batch {
                let (_, g) = backward(&p, img, t, &loss_cfg).unwrap();
                opt.step(&mut p, &g);
            }
        }
        let after = total(&p);
        assert!(after < before, "loss went from {before} to {after}");
    }
}

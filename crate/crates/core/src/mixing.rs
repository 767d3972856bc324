//! Confidence-guided region mixing.
//!
//! The target image is divided into regions, each region is scored by the
//! mean confidence of the pseudo detections whose centers fall inside it, and
//! the best region is pasted onto the source image. The same plan decides
//! which pseudo detections survive into the merged label set.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Detection};
use crate::image::Image;

/// Clipped boxes at or below this normalized extent are dropped.
pub const MIN_CLIPPED_EXTENT: f64 = 1e-3;

/// CutMix rectangle area as a fraction of the image.
pub const CUTMIX_AREA: (f64, f64) = (0.25, 0.5);
/// CutMix rectangle aspect ratio (width / height).
pub const CUTMIX_ASPECT: (f64, f64) = (0.5, 2.0);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixStrategy {
    FourDivision,
    SixDivision,
    NineDivision,
    VerticalHalves,
    HorizontalHalves,
    TwoRegionMix,
    #[serde(rename = "cutmix_random")]
    CutMixRandom,
}

impl Default for MixStrategy {
    fn default() -> Self {
        MixStrategy::FourDivision
    }
}

impl MixStrategy {
    pub const ALL: [MixStrategy; 7] = [
        MixStrategy::CutMixRandom,
        MixStrategy::VerticalHalves,
        MixStrategy::HorizontalHalves,
        MixStrategy::TwoRegionMix,
        MixStrategy::SixDivision,
        MixStrategy::NineDivision,
        MixStrategy::FourDivision,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MixStrategy::FourDivision => "four_division",
            MixStrategy::SixDivision => "six_division",
            MixStrategy::NineDivision => "nine_division",
            MixStrategy::VerticalHalves => "vertical_halves",
            MixStrategy::HorizontalHalves => "horizontal_halves",
            MixStrategy::TwoRegionMix => "two_region_mix",
            MixStrategy::CutMixRandom => "cutmix_random",
        }
    }

    /// `(rows, cols)` of the region grid, or `None` for the random rectangle.
    pub fn grid(&self) -> Option<(usize, usize)> {
        match self {
            MixStrategy::FourDivision | MixStrategy::TwoRegionMix => Some((2, 2)),
            MixStrategy::SixDivision => Some((2, 3)),
            MixStrategy::NineDivision => Some((3, 3)),
            // a vertical cut gives left/right halves
            MixStrategy::VerticalHalves => Some((1, 2)),
            MixStrategy::HorizontalHalves => Some((2, 1)),
            MixStrategy::CutMixRandom => None,
        }
    }

    fn regions_selected(&self) -> usize {
        match self {
            MixStrategy::TwoRegionMix => 2,
            _ => 1,
        }
    }
}

impl std::str::FromStr for MixStrategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MixStrategy::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown mix strategy `{s}`")))
    }
}

/// Half-open pixel rectangle `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Rect {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl Rect {
    pub fn area(&self) -> usize {
        (self.x1 - self.x0) * (self.y1 - self.y0)
    }

    pub fn contains_pixel(&self, x: usize, y: usize) -> bool {
        x >= self.x0 && x < self.x1 && y >= self.y0 && y < self.y1
    }

    /// Point test in pixel units. Intervals are half-open except at the far
    /// image border, which is closed so that coordinate 1.0 still lands
    /// somewhere.
    pub fn contains_point(&self, px: f64, py: f64, width: usize, height: usize) -> bool {
        let in_x = px >= self.x0 as f64
            && (px < self.x1 as f64 || (self.x1 == width && px <= width as f64));
        let in_y = py >= self.y0 as f64
            && (py < self.y1 as f64 || (self.y1 == height && py <= height as f64));
        in_x && in_y
    }

    /// Normalized corners `[x1, y1, x2, y2]`.
    pub fn normalized(&self, width: usize, height: usize) -> [f64; 4] {
        [
            self.x0 as f64 / width as f64,
            self.y0 as f64 / height as f64,
            self.x1 as f64 / width as f64,
            self.y1 as f64 / height as f64,
        ]
    }
}

/// A set of rectangles tiling a `width x height` image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionLayout {
    pub width: usize,
    pub height: usize,
    pub rects: Vec<Rect>,
    /// Column and row boundaries when the layout is a regular grid.
    grid: Option<(Vec<usize>, Vec<usize>)>,
}

impl RegionLayout {
    /// Row-major `rows x cols` grid; boundaries at `floor(k * side / n)`.
    pub fn grid(width: usize, height: usize, rows: usize, cols: usize) -> Self {
        let xs: Vec<usize> = (0..=cols).map(|k| k * width / cols).collect();
        let ys: Vec<usize> = (0..=rows).map(|k| k * height / rows).collect();
        let mut rects = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                rects.push(Rect {
                    x0: xs[c],
                    y0: ys[r],
                    x1: xs[c + 1],
                    y1: ys[r + 1],
                });
            }
        }
        Self {
            width,
            height,
            rects,
            grid: Some((xs, ys)),
        }
    }

    /// `cut` followed by the bands of the image around it.
    pub fn around(width: usize, height: usize, cut: Rect) -> Self {
        let candidates = [
            cut,
            Rect { x0: 0, y0: 0, x1: width, y1: cut.y0 },
            Rect { x0: 0, y0: cut.y1, x1: width, y1: height },
            Rect { x0: 0, y0: cut.y0, x1: cut.x0, y1: cut.y1 },
            Rect { x0: cut.x1, y0: cut.y0, x1: width, y1: cut.y1 },
        ];
        Self {
            width,
            height,
            rects: candidates.into_iter().filter(|r| r.area() > 0).collect(),
            grid: None,
        }
    }

    pub fn len(&self) -> usize {
        self.rects.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rects.is_empty()
    }

    /// Index of the region containing the normalized point `(cx, cy)`.
    pub fn locate(&self, cx: f64, cy: f64) -> usize {
        let px = cx * self.width as f64;
        let py = cy * self.height as f64;
        if let Some((xs, ys)) = &self.grid {
            let cols = xs.len() - 1;
            let col = band_index(xs, px, self.width);
            let row = band_index(ys, py, self.height);
            return row * cols + col;
        }
        self.rects
            .iter()
            .position(|r| r.contains_point(px, py, self.width, self.height))
            .unwrap_or(self.rects.len() - 1)
    }
}

fn band_index(bounds: &[usize], p: f64, side: usize) -> usize {
    let n = bounds.len() - 1;
    if p >= side as f64 {
        return n - 1;
    }
    // number of interior boundaries at or left of p
    bounds[1..n].iter().take_while(|&&b| p >= b as f64).count()
}

/// Per-region lists of indices into `dets`, assigned by box center.
pub fn assign_regions(dets: &[Detection], layout: &RegionLayout) -> Vec<Vec<usize>> {
    let mut out = vec![Vec::new(); layout.len()];
    for (i, d) in dets.iter().enumerate() {
        out[layout.locate(d.bbox().cx, d.bbox().cy)].push(i);
    }
    out
}

/// Mean of `score` over the region's detections; `None` when empty.
pub fn region_confidence<'a, I, F>(dets_in_region: I, score: F) -> Option<f64>
where
    I: IntoIterator<Item = &'a Detection>,
    F: Fn(&Detection) -> f64,
{
    let (sum, n) = dets_in_region
        .into_iter()
        .fold((0.0, 0usize), |(s, n), d| (s + score(d), n + 1));
    (n > 0).then(|| sum / n as f64)
}

/// Binary `W x H` mask: 1 keeps the source pixel, 0 takes the target pixel.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mask {
    pub width: usize,
    pub height: usize,
    data: Vec<u8>,
}

impl Mask {
    pub fn ones(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![1; width * height],
        }
    }

    pub fn zeros(width: usize, height: usize) -> Self {
        Self {
            width,
            height,
            data: vec![0; width * height],
        }
    }

    pub fn from_fn(width: usize, height: usize, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut m = Self::zeros(width, height);
        for y in 0..height {
            for x in 0..width {
                m.data[y * width + x] = f(x, y) as u8;
            }
        }
        m
    }

    #[inline]
    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.data[y * self.width + x]
    }

    pub fn count_zeros(&self) -> usize {
        self.data.iter().filter(|&&v| v == 0).count()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixPlan {
    pub strategy: MixStrategy,
    pub layout: RegionLayout,
    pub region_conf: Vec<Option<f64>>,
    pub selected: Vec<usize>,
    pub mask: Mask,
    /// Set when every region was empty: nothing is pasted and the mask is all ones.
    pub no_mix: bool,
}

impl MixPlan {
    pub fn selected_rects(&self) -> impl Iterator<Item = &Rect> {
        self.selected.iter().map(|&i| &self.layout.rects[i])
    }
}

/// Build the mixing plan for one target image.
///
/// `score` ranks detections inside a region. For [`MixStrategy::CutMixRandom`]
/// the rectangle is drawn from `rng` without looking at any detection.
pub fn plan_mix<R, F>(
    target_dets: &[Detection],
    strategy: MixStrategy,
    width: usize,
    height: usize,
    score: F,
    rng: &mut R,
) -> MixPlan
where
    R: Rng + ?Sized,
    F: Fn(&Detection) -> f64,
{
    let (layout, selected) = match strategy.grid() {
        Some((rows, cols)) => {
            let layout = RegionLayout::grid(width, height, rows, cols);
            (layout, None)
        }
        None => {
            let cut = random_rect(width, height, rng);
            (RegionLayout::around(width, height, cut), Some(vec![0]))
        }
    };

    let assigned = assign_regions(target_dets, &layout);
    let region_conf: Vec<Option<f64>> = assigned
        .iter()
        .map(|idx| region_confidence(idx.iter().map(|&i| &target_dets[i]), &score))
        .collect();

    let selected = selected.unwrap_or_else(|| top_regions(&region_conf, strategy.regions_selected()));
    let no_mix = selected.is_empty();
    let mask = if no_mix {
        Mask::ones(width, height)
    } else {
        let rects: Vec<Rect> = selected.iter().map(|&i| layout.rects[i]).collect();
        Mask::from_fn(width, height, |x, y| !rects.iter().any(|r| r.contains_pixel(x, y)))
    };

    MixPlan {
        strategy,
        layout,
        region_conf,
        selected,
        mask,
        no_mix,
    }
}

/// Highest-scoring non-empty regions, ties to the lower index.
fn top_regions(conf: &[Option<f64>], k: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..conf.len()).filter(|&i| conf[i].is_some()).collect();
    order.sort_by(|&a, &b| {
        conf[b]
            .partial_cmp(&conf[a])
            .unwrap_or(std::cmp::Ordering::Equal)
    });
    order.truncate(k);
    order.sort_unstable();
    order
}

fn random_rect<R: Rng + ?Sized>(width: usize, height: usize, rng: &mut R) -> Rect {
    let area_frac = rng.random_range(CUTMIX_AREA.0..=CUTMIX_AREA.1);
    let aspect = rng.random_range(CUTMIX_ASPECT.0..=CUTMIX_ASPECT.1);
    let area = area_frac * (width * height) as f64;
    let w = ((area * aspect).sqrt().round() as usize).clamp(1, width);
    let h = ((area / aspect).sqrt().round() as usize).clamp(1, height);
    let x0 = rng.random_range(0..=width - w);
    let y0 = rng.random_range(0..=height - h);
    Rect {
        x0,
        y0,
        x1: x0 + w,
        y1: y0 + h,
    }
}

/// Pixel-wise `mask * source + (1 - mask) * target`.
pub fn compose(source: &Image, target: &Image, mask: &Mask) -> Result<Image> {
    if !source.same_shape(target) {
        return Err(Error::ShapeMismatch(format!(
            "source {}x{}x{} vs target {}x{}x{}",
            source.width(),
            source.height(),
            source.channels(),
            target.width(),
            target.height(),
            target.channels()
        )));
    }
    if mask.width != source.width() || mask.height != source.height() {
        return Err(Error::ShapeMismatch(format!(
            "mask {}x{} vs image {}x{}",
            mask.width,
            mask.height,
            source.width(),
            source.height()
        )));
    }
    let mut out = target.clone();
    let c = source.channels();
    for y in 0..source.height() {
        for x in 0..source.width() {
            if mask.get(x, y) == 1 {
                let i = (y * source.width() + x) * c;
                out.data_mut()[i..i + c].copy_from_slice(&source.data()[i..i + c]);
            }
        }
    }
    Ok(out)
}

/// Merge target detections inside the pasted region(s) with source
/// detections outside them.
///
/// Target boxes are clipped to the pasted area. Source boxes shrink to the
/// largest box that keeps their center and stays clear of every pasted
/// rectangle. Boxes left with an extent at or below
/// [`MIN_CLIPPED_EXTENT`] are dropped. A `no_mix` plan yields nothing.
pub fn combine_labels(
    target_dets: &[Detection],
    source_dets: &[Detection],
    plan: &MixPlan,
) -> Vec<Detection> {
    if plan.no_mix {
        return Vec::new();
    }
    let (w, h) = (plan.layout.width, plan.layout.height);
    let pasted: Vec<Rect> = plan.selected_rects().copied().collect();
    let union = union_rect(&pasted);
    let pasted_norm: Vec<[f64; 4]> = pasted.iter().map(|r| r.normalized(w, h)).collect();

    let mut out = Vec::new();
    for d in target_dets {
        let r = plan.layout.locate(d.bbox().cx, d.bbox().cy);
        if !plan.selected.contains(&r) {
            continue;
        }
        let clip = union.unwrap_or(plan.layout.rects[r]).normalized(w, h);
        let c = d.bbox().corners();
        let clipped = [
            c[0].max(clip[0]),
            c[1].max(clip[1]),
            c[2].min(clip[2]),
            c[3].min(clip[3]),
        ];
        if let Some(b) = finish_clip(clipped) {
            out.push(d.with_box(b));
        }
    }
    for d in source_dets {
        let r = plan.layout.locate(d.bbox().cx, d.bbox().cy);
        if plan.selected.contains(&r) {
            continue;
        }
        let c = d.bbox().corners().map(|v| v.clamp(0.0, 1.0));
        let c = largest_clear_box(c, d.bbox().cx, d.bbox().cy, &pasted_norm);
        if let Some(b) = finish_clip(c) {
            out.push(d.with_box(b));
        }
    }
    out
}

/// The bounding rectangle of `rects` when their union is exactly that rectangle.
fn union_rect(rects: &[Rect]) -> Option<Rect> {
    let first = rects.first()?;
    let bound = rects.iter().fold(*first, |a, r| Rect {
        x0: a.x0.min(r.x0),
        y0: a.y0.min(r.y0),
        x1: a.x1.max(r.x1),
        y1: a.y1.max(r.y1),
    });
    // tiles are disjoint, so equal areas mean the union fills the bound
    let sum: usize = rects.iter().map(Rect::area).sum();
    (sum == bound.area()).then_some(bound)
}

/// Largest sub-box of `c` that keeps the point `(cx, cy)` and does not
/// overlap any of `rects`. A box clear of a rectangle lies entirely on one
/// side of it, so every choice of side per rectangle is tried. Equal areas
/// go to the lexicographically smaller corners. Returns a degenerate box
/// when nothing fits.
fn largest_clear_box(c: [f64; 4], cx: f64, cy: f64, rects: &[[f64; 4]]) -> [f64; 4] {
    let mut best: Option<([f64; 4], f64)> = None;
    let combos = 4usize.pow(rects.len() as u32);
    for code in 0..combos {
        let mut b = c;
        let mut k = code;
        for r in rects {
            match k % 4 {
                0 => b[2] = b[2].min(r[0]),
                1 => b[0] = b[0].max(r[2]),
                2 => b[3] = b[3].min(r[1]),
                _ => b[1] = b[1].max(r[3]),
            }
            k /= 4;
        }
        let holds = b[0] <= cx && cx <= b[2] && b[1] <= cy && cy <= b[3];
        if !holds || b[0] >= b[2] || b[1] >= b[3] {
            continue;
        }
        let area = (b[2] - b[0]) * (b[3] - b[1]);
        let better = match best {
            None => true,
            Some((kb, ka)) => area > ka || (area == ka && b < kb),
        };
        if better {
            best = Some((b, area));
        }
    }
    best.map_or([c[0], c[1], c[0], c[1]], |(b, _)| b)
}

fn finish_clip(c: [f64; 4]) -> Option<BBox> {
    let c = c.map(|v| v.clamp(0.0, 1.0));
    let (bw, bh) = (c[2] - c[0], c[3] - c[1]);
    if bw <= MIN_CLIPPED_EXTENT || bh <= MIN_CLIPPED_EXTENT {
        return None;
    }
    BBox::new(c[0] + bw / 2.0, c[1] + bh / 2.0, bw, bh).ok()
}

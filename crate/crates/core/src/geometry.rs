//! Box geometry and the Gaussian-box confidence metrics.
//!
//! Boxes are stored center-normalized (`cx, cy, w, h` in image fractions).
//! Corner form `[x1, y1, x2, y2]` is only materialized for overlap tests and
//! clipping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Axis-aligned box in normalized center form.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl BBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64) -> Result<Self> {
        let finite = [cx, cy, w, h].iter().all(|v| v.is_finite());
        if !finite || !(0.0..=1.0).contains(&cx) || !(0.0..=1.0).contains(&cy) {
            return Err(Error::InvalidBox(format!(
                "center ({cx}, {cy}) must lie in [0,1]"
            )));
        }
        if w <= 0.0 || h <= 0.0 {
            return Err(Error::InvalidBox(format!(
                "extent ({w}, {h}) must be positive"
            )));
        }
        Ok(Self { cx, cy, w, h })
    }

    pub fn from_corners(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        Self::new((x1 + x2) / 2.0, (y1 + y2) / 2.0, x2 - x1, y2 - y1)
    }

    pub fn corners(&self) -> [f64; 4] {
        [
            self.cx - self.w / 2.0,
            self.cy - self.h / 2.0,
            self.cx + self.w / 2.0,
            self.cy + self.h / 2.0,
        ]
    }

    /// Corner form clamped to the unit square.
    pub fn clipped_corners(&self) -> [f64; 4] {
        self.corners().map(|v| v.clamp(0.0, 1.0))
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn iou(&self, other: &BBox) -> f64 {
        iou_corners(&self.corners(), &other.corners())
    }
}

/// Intersection-over-union of two corner-form boxes. Degenerate unions give 0.
pub fn iou_corners(a: &[f64; 4], b: &[f64; 4]) -> f64 {
    let iw = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let ih = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let area_a = (a[2] - a[0]) * (a[3] - a[1]);
    let area_b = (b[2] - b[0]) * (b[3] - b[1]);
    let union = area_a + area_b - inter;
    if union <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// A box whose four coordinates are Gaussian: `mu` holds the means and
/// `sigma` the variances of `(cx, cy, w, h)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GaussianBox {
    pub mu: BBox,
    pub sigma: [f64; 4],
}

impl GaussianBox {
    /// Variances must lie strictly inside (0, 1), as produced by a sigmoid head.
    pub fn new(mu: BBox, sigma: [f64; 4]) -> Result<Self> {
        if sigma.iter().any(|s| !(*s > 0.0 && *s < 1.0)) {
            return Err(Error::InvalidBox(format!(
                "variances {sigma:?} must lie in (0,1)"
            )));
        }
        Ok(Self { mu, sigma })
    }

    pub fn box_confidence(&self) -> f64 {
        box_confidence(&self.sigma)
    }
}

/// Box confidence: one minus the mean coordinate variance.
pub fn box_confidence(sigma: &[f64; 4]) -> f64 {
    1.0 - sigma.iter().sum::<f64>() / 4.0
}

/// Product of the detector confidence and the box confidence.
pub fn combined_confidence(c_det: f64, c_box: f64) -> f64 {
    c_det * c_box
}

/// One predicted object with its cached confidences.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub gbox: GaussianBox,
    pub class_id: usize,
    pub c_det: f64,
    pub c_box: f64,
    pub c_comb: f64,
}

impl Detection {
    pub fn new(gbox: GaussianBox, class_id: usize, c_det: f64) -> Self {
        let c_box = gbox.box_confidence();
        Self {
            gbox,
            class_id,
            c_det,
            c_box,
            c_comb: combined_confidence(c_det, c_box),
        }
    }

    pub fn bbox(&self) -> &BBox {
        &self.gbox.mu
    }

    /// Same detection with its mean box replaced; confidences are kept.
    pub fn with_box(&self, mu: BBox) -> Self {
        Self {
            gbox: GaussianBox { mu, ..self.gbox },
            ..*self
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_confidence_examples() {
        assert_eq!(box_confidence(&[0.0; 4]), 1.0);
        assert_eq!(box_confidence(&[1.0; 4]), 0.0);
        assert!((box_confidence(&[0.2, 0.4, 0.1, 0.3]) - 0.75).abs() < 1e-12);
    }

    #[test]
    fn combined_confidence_examples() {
        assert_eq!(combined_confidence(1.0, 0.75), 0.75);
        for x in [0.0, 0.3, 1.0] {
            assert_eq!(combined_confidence(0.0, x), 0.0);
        }
        assert!((combined_confidence(0.8, 0.75) - 0.6).abs() < 1e-12);
    }

    #[test]
    fn iou_examples() {
        let a = BBox::new(0.5, 0.5, 0.2, 0.2).unwrap();
        assert_eq!(a.iou(&a), 1.0);
        let b = BBox::new(0.1, 0.1, 0.1, 0.1).unwrap();
        assert_eq!(a.iou(&b), 0.0);
        let third = iou_corners(&[0.0, 0.0, 2.0, 2.0], &[1.0, 0.0, 3.0, 2.0]);
        assert!((third - 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn touching_boxes_have_zero_iou() {
        assert_eq!(iou_corners(&[0.0, 0.0, 1.0, 1.0], &[1.0, 0.0, 2.0, 1.0]), 0.0);
    }

    #[test]
    fn box_validation() {
        assert!(BBox::new(1.2, 0.5, 0.1, 0.1).is_err());
        assert!(BBox::new(0.5, 0.5, 0.0, 0.1).is_err());
        assert!(BBox::new(0.5, f64::NAN, 0.1, 0.1).is_err());
        let mu = BBox::new(0.5, 0.5, 0.1, 0.1).unwrap();
        assert!(GaussianBox::new(mu, [0.1, 0.2, 0.0, 0.3]).is_err());
        assert!(GaussianBox::new(mu, [0.1, 0.2, 1.0, 0.3]).is_err());
    }

    #[test]
    fn detection_caches_confidences() {
        let mu = BBox::new(0.5, 0.5, 0.1, 0.1).unwrap();
        let g = GaussianBox::new(mu, [0.2, 0.4, 0.1, 0.3]).unwrap();
        let d = Detection::new(g, 1, 0.8);
        assert!((d.c_box - 0.75).abs() < 1e-12);
        assert!((d.c_comb - d.c_det * d.c_box).abs() < 1e-12);
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn arb_box() -> impl Strategy<Value = BBox> {
            (0.0..=1.0f64, 0.0..=1.0f64, 0.01..0.6f64, 0.01..0.6f64)
                .prop_map(|(cx, cy, w, h)| BBox::new(cx, cy, w, h).unwrap())
        }

        proptest! {
            #[test]
            fn iou_symmetric_and_bounded(a in arb_box(), b in arb_box()) {
                let ab = a.iou(&b);
                prop_assert_eq!(ab, b.iou(&a));
                prop_assert!((0.0..=1.0).contains(&ab));
                prop_assert!((a.iou(&a) - 1.0).abs() < 1e-12);
            }

            #[test]
            fn combined_bounded_and_monotone(
                c_det in 0.0..=1.0f64, c_box in 0.0..=1.0f64, bump in 0.0..0.5f64
            ) {
                let c = combined_confidence(c_det, c_box);
                prop_assert!(c <= c_det.min(c_box) + 1e-15);
                prop_assert!(combined_confidence((c_det + bump).min(1.0), c_box) >= c);
                prop_assert!(combined_confidence(c_det, (c_box + bump).min(1.0)) >= c);
            }

            #[test]
            fn box_confidence_affine_decreasing(
                s in proptest::array::uniform4(0.0..1.0f64), k in 0usize..4, step in 0.0..0.1f64
            ) {
                let mut t = s;
                t[k] += step;
                let drop = box_confidence(&s) - box_confidence(&t);
                prop_assert!((drop - step / 4.0).abs() < 1e-12);
            }
        }
    }
}

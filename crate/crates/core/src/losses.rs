//! Detection losses with analytic gradients.
//!
//! The box term is one minus the mean per-coordinate likelihood of the target
//! under the predicted Gaussian. Objectness and classification use mean
//! binary cross-entropy. Every function returns its value together with the
//! gradient with respect to its inputs.

use serde::{Deserialize, Serialize};

use crate::geometry::{BBox, Detection, GaussianBox};
use crate::schedule::Blend;

/// Default lower bound applied to predicted variances.
pub const DEFAULT_VAR_FLOOR: f64 = 1e-3;
/// Default consistency-weight threshold.
pub const DEFAULT_GAMMA_THRESH: f64 = 0.5;

const PROB_EPS: f64 = 1e-12;

/// How a single coordinate's likelihood `p(y | mu, var)` is evaluated.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Likelihood {
    /// `exp(-(y - mu)^2 / (2 var))`, equal to 1 at a perfect fit.
    #[default]
    Kernel,
    /// The normal density itself, clamped to `[0, 1]`.
    RawPdf,
    /// The normal density times `sqrt(2 pi var_floor)`, so that it peaks at 1
    /// for a perfect fit at the variance floor and penalizes inflated variance.
    ScaledPdf,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxLossConfig {
    pub likelihood: Likelihood,
    pub var_floor: f64,
    /// Residuals are multiplied by this before entering the likelihood, which
    /// sets the units the variances are expressed in.
    pub coord_scale: f64,
}

impl Default for BoxLossConfig {
    fn default() -> Self {
        Self {
            likelihood: Likelihood::Kernel,
            var_floor: DEFAULT_VAR_FLOOR,
            coord_scale: 1.0,
        }
    }
}

/// A prediction paired with the label it is trained against.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchedPair {
    pub pred: GaussianBox,
    pub objectness: f64,
    pub class_probs: Vec<f64>,
    pub target: BBox,
    pub class_id: usize,
}

/// Per-pair gradient of the box loss.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct BoxGrad {
    pub d_mu: [f64; 4],
    pub d_sigma: [f64; 4],
}

#[derive(Debug, Clone, PartialEq)]
pub struct BoxLoss {
    pub value: f64,
    pub grads: Vec<BoxGrad>,
}

/// Value and gradient of a loss with respect to a flat input vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossGrad {
    pub value: f64,
    pub grad: Vec<f64>,
}

pub fn box_array(b: &BBox) -> [f64; 4] {
    [b.cx, b.cy, b.w, b.h]
}

/// One pair's contribution `1 - mean_k p_k` and its gradient.
pub fn box_term(
    mu: &[f64; 4],
    sigma: &[f64; 4],
    target: &[f64; 4],
    cfg: &BoxLossConfig,
) -> (f64, BoxGrad) {
    let mut mean_p = 0.0;
    let mut g = BoxGrad::default();
    let s = cfg.coord_scale;
    for k in 0..4 {
        let floored = sigma[k] < cfg.var_floor;
        let var = if floored { cfg.var_floor } else { sigma[k] };
        let e = (target[k] - mu[k]) * s;
        let kernel = (-e * e / (2.0 * var)).exp();
        // p, dp/dvar with the residual held fixed
        let (p, dp_dvar) = match cfg.likelihood {
            Likelihood::Kernel => (kernel, kernel * e * e / (2.0 * var * var)),
            Likelihood::RawPdf => {
                let q = kernel / (2.0 * std::f64::consts::PI * var).sqrt();
                if q >= 1.0 {
                    (1.0, 0.0)
                } else {
                    (q, q * (e * e / (2.0 * var * var) - 0.5 / var))
                }
            }
            Likelihood::ScaledPdf => {
                let q = kernel * (cfg.var_floor / var).sqrt();
                (q, q * (e * e / (2.0 * var * var) - 0.5 / var))
            }
        };
        let saturated = matches!(cfg.likelihood, Likelihood::RawPdf) && p >= 1.0;
        let dp_dmu = if saturated { 0.0 } else { p * e * s / var };
        mean_p += p / 4.0;
        g.d_mu[k] = -dp_dmu / 4.0;
        g.d_sigma[k] = if floored { 0.0 } else { -dp_dvar / 4.0 };
    }
    (1.0 - mean_p, g)
}

/// Mean box loss over `pairs`. An empty list gives zero loss.
pub fn gaussian_box_loss(pairs: &[MatchedPair], cfg: &BoxLossConfig) -> BoxLoss {
    if pairs.is_empty() {
        return BoxLoss {
            value: 0.0,
            grads: Vec::new(),
        };
    }
    let n = pairs.len() as f64;
    let mut value = 0.0;
    let grads = pairs
        .iter()
        .map(|p| {
            let (v, mut g) = box_term(
                &box_array(&p.pred.mu),
                &p.pred.sigma,
                &box_array(&p.target),
                cfg,
            );
            value += v;
            g.d_mu.iter_mut().for_each(|d| *d /= n);
            g.d_sigma.iter_mut().for_each(|d| *d /= n);
            g
        })
        .collect();
    BoxLoss {
        value: value / n,
        grads,
    }
}

fn bce_prob(p: f64, t: f64) -> (f64, f64) {
    let p = p.clamp(PROB_EPS, 1.0 - PROB_EPS);
    let v = -(t * p.ln() + (1.0 - t) * (1.0 - p).ln());
    (v, (p - t) / (p * (1.0 - p)))
}

/// Mean BCE of probabilities `pred` against `target`; gradient w.r.t. `pred`.
pub fn bce_mean(pred: &[f64], target: &[f64]) -> LossGrad {
    assert_eq!(pred.len(), target.len(), "prediction/target length mismatch");
    if pred.is_empty() {
        return LossGrad {
            value: 0.0,
            grad: Vec::new(),
        };
    }
    let n = pred.len() as f64;
    let mut value = 0.0;
    let grad = pred
        .iter()
        .zip(target)
        .map(|(&p, &t)| {
            let (v, g) = bce_prob(p, t);
            value += v;
            g / n
        })
        .collect();
    LossGrad {
        value: value / n,
        grad,
    }
}

/// Mean BCE evaluated from logits; gradient w.r.t. the logits.
pub fn bce_mean_logits(logits: &[f64], target: &[f64]) -> LossGrad {
    bce_mean_logits_weighted(logits, target, 1.0)
}

/// Mean BCE from logits with the positive term scaled by `pos_weight`:
/// `-(w t ln s + (1 - t) ln(1 - s))` with `s = sigmoid(z)`.
pub fn bce_mean_logits_weighted(logits: &[f64], target: &[f64], pos_weight: f64) -> LossGrad {
    assert_eq!(logits.len(), target.len(), "prediction/target length mismatch");
    if logits.is_empty() {
        return LossGrad {
            value: 0.0,
            grad: Vec::new(),
        };
    }
    let n = logits.len() as f64;
    let mut value = 0.0;
    let grad = logits
        .iter()
        .zip(target)
        .map(|(&z, &t)| {
            // softplus(z) = -ln(1 - s), softplus(z) - z = -ln s
            let sp = z.max(0.0) + (-z.abs()).exp().ln_1p();
            value += pos_weight * t * (sp - z) + (1.0 - t) * sp;
            let s = sigmoid(z);
            ((1.0 - t) * s - pos_weight * t * (1.0 - s)) / n
        })
        .collect();
    LossGrad {
        value: value / n,
        grad,
    }
}

/// Mean BCE of per-cell objectness probabilities.
pub fn objectness_loss(pred_obj: &[f64], target_obj: &[f64]) -> LossGrad {
    bce_mean(pred_obj, target_obj)
}

fn one_vs_all(targets: &[usize], num_classes: usize) -> Vec<f64> {
    let mut t = vec![0.0; targets.len() * num_classes];
    for (i, &c) in targets.iter().enumerate() {
        assert!(c < num_classes, "class id {c} out of range");
        t[i * num_classes + c] = 1.0;
    }
    t
}

/// One-vs-all BCE over matched cells. `pred_cls` is row-major
/// `targets.len() x num_classes` class probabilities.
pub fn classification_loss(pred_cls: &[f64], targets: &[usize], num_classes: usize) -> LossGrad {
    bce_mean(pred_cls, &one_vs_all(targets, num_classes))
}

/// [`classification_loss`] evaluated from logits.
pub fn classification_loss_logits(logits: &[f64], targets: &[usize], num_classes: usize) -> LossGrad {
    bce_mean_logits(logits, &one_vs_all(targets, num_classes))
}

/// Fraction of merged pseudo detections whose blended confidence reaches
/// `gamma_thresh`; zero for an empty set.
pub fn consistency_weight(combined: &[Detection], gamma_thresh: f64, blend: Blend) -> f64 {
    if combined.is_empty() {
        return 0.0;
    }
    let reliable = combined
        .iter()
        .filter(|d| blend.confidence(d) >= gamma_thresh)
        .count();
    reliable as f64 / combined.len() as f64
}

pub fn total_loss(l_det: f64, l_cons: f64, gamma: f64) -> f64 {
    l_det + gamma * l_cons
}

/// Weight on the consistency term.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(try_from = "GammaRepr", into = "String")]
pub enum GammaMode {
    /// Recomputed every iteration from the merged pseudo labels.
    #[default]
    Dynamic,
    Constant(f64),
}

impl GammaMode {
    pub fn name(&self) -> String {
        match self {
            GammaMode::Dynamic => "dynamic".into(),
            GammaMode::Constant(g) => format!("{g}"),
        }
    }
}

/// Accepts `"dynamic"`, a numeric string, or a bare number.
#[derive(Deserialize)]
#[serde(untagged)]
enum GammaRepr {
    Num(f64),
    Str(String),
}

impl TryFrom<GammaRepr> for GammaMode {
    type Error = crate::error::Error;

    fn try_from(r: GammaRepr) -> crate::error::Result<Self> {
        match r {
            GammaRepr::Num(g) => g.to_string().parse(),
            GammaRepr::Str(s) => s.parse(),
        }
    }
}

impl From<GammaMode> for String {
    fn from(g: GammaMode) -> String {
        g.name()
    }
}

impl std::str::FromStr for GammaMode {
    type Err = crate::error::Error;

    fn from_str(s: &str) -> crate::error::Result<Self> {
        if s == "dynamic" {
            return Ok(GammaMode::Dynamic);
        }
        match s.parse::<f64>() {
            Ok(g) if (0.0..=1.0).contains(&g) => Ok(GammaMode::Constant(g)),
            _ => Err(crate::error::Error::Config(format!(
                "gamma must be `dynamic` or a number in [0,1], got `{s}`"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_box: f64,
    pub l_obj: f64,
    pub l_cl: f64,
    pub l_det: f64,
    pub l_cons: f64,
    pub gamma: f64,
    pub l_total: f64,
}

#[inline]
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

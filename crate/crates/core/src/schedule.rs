//! Progressive pseudo-label confidence.
//!
//! Over the adaptation run the filtering metric moves from the detector
//! confidence `c_det` toward the stricter combined confidence `c_comb`. The
//! blend weight is either the raw progress ratio (linear modes) or the
//! sigmoid-shaped shifting weight.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Detection;

/// Default scale modulator of the shifting weight.
pub const DEFAULT_ALPHA: f64 = 5.0;
/// Default pseudo-label confidence threshold.
pub const DEFAULT_CONF_THRESH: f64 = 0.25;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleMode {
    DetOnly,
    CombOnly,
    DetToCombLinear,
    CombToDetLinear,
    DetToCombDelta,
    CombToDetDelta,
}

impl ScheduleMode {
    pub const ALL: [ScheduleMode; 6] = [
        ScheduleMode::DetOnly,
        ScheduleMode::CombOnly,
        ScheduleMode::CombToDetLinear,
        ScheduleMode::DetToCombLinear,
        ScheduleMode::CombToDetDelta,
        ScheduleMode::DetToCombDelta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ScheduleMode::DetOnly => "det_only",
            ScheduleMode::CombOnly => "comb_only",
            ScheduleMode::DetToCombLinear => "det_to_comb_linear",
            ScheduleMode::CombToDetLinear => "comb_to_det_linear",
            ScheduleMode::DetToCombDelta => "det_to_comb_delta",
            ScheduleMode::CombToDetDelta => "comb_to_det_delta",
        }
    }

    fn is_linear(&self) -> bool {
        matches!(
            self,
            ScheduleMode::DetToCombLinear | ScheduleMode::CombToDetLinear
        )
    }
}

impl Default for ScheduleMode {
    fn default() -> Self {
        ScheduleMode::DetToCombDelta
    }
}

impl std::str::FromStr for ScheduleMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ScheduleMode::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown schedule mode `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub alpha: f64,
    pub total_epochs: u64,
    pub batches_per_epoch: u64,
    pub mode: ScheduleMode,
}

impl Schedule {
    pub fn new(alpha: f64, total_epochs: u64, batches_per_epoch: u64, mode: ScheduleMode) -> Result<Self> {
        if !(alpha > 0.0 && alpha.is_finite()) {
            return Err(Error::Config(format!("alpha must be positive, got {alpha}")));
        }
        if total_epochs == 0 || batches_per_epoch == 0 {
            return Err(Error::Config(
                "schedule needs at least one epoch and one batch per epoch".into(),
            ));
        }
        Ok(Self {
            alpha,
            total_epochs,
            batches_per_epoch,
            mode,
        })
    }

    pub fn total_iterations(&self) -> u64 {
        self.total_epochs * self.batches_per_epoch
    }

    /// Blend weight at the given clock: `r` for linear modes, `delta` otherwise.
    pub fn weight(&self, clock: Clock) -> f64 {
        let r = progress_ratio(clock, self);
        if self.mode.is_linear() {
            r
        } else {
            shifting_weight(r, self.alpha)
        }
    }

    pub fn blend_at(&self, clock: Clock) -> Blend {
        Blend {
            weight: self.weight(clock),
            mode: self.mode,
        }
    }
}

/// Global adaptation iteration counter, starting at zero.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Clock {
    pub t: u64,
}

impl Clock {
    pub fn advance(&mut self) {
        self.t += 1;
    }
}

pub fn progress_ratio(clock: Clock, sched: &Schedule) -> f64 {
    let total = sched.total_iterations();
    debug_assert!(clock.t <= total, "clock {} past end {}", clock.t, total);
    (clock.t.min(total)) as f64 / total as f64
}

/// `2 / (1 + exp(-alpha * r)) - 1`, rising from 0 at `r = 0` toward 1.
pub fn shifting_weight(r: f64, alpha: f64) -> f64 {
    2.0 / (1.0 + (-alpha * r).exp()) - 1.0
}

pub fn blended_confidence(det: &Detection, weight: f64, mode: ScheduleMode) -> f64 {
    match mode {
        ScheduleMode::DetOnly => det.c_det,
        ScheduleMode::CombOnly => det.c_comb,
        ScheduleMode::DetToCombLinear | ScheduleMode::DetToCombDelta => {
            (1.0 - weight) * det.c_det + weight * det.c_comb
        }
        ScheduleMode::CombToDetLinear | ScheduleMode::CombToDetDelta => {
            (1.0 - weight) * det.c_comb + weight * det.c_det
        }
    }
}

/// The confidence rule in force at one point of the schedule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Blend {
    pub weight: f64,
    pub mode: ScheduleMode,
}

impl Blend {
    pub fn confidence(&self, det: &Detection) -> f64 {
        blended_confidence(det, self.weight, self.mode)
    }
}

/// Keep detections whose blended confidence is strictly above `conf_thresh`.
pub fn filter_pseudo(dets: &[Detection], conf_thresh: f64, blend: Blend) -> Vec<Detection> {
    dets.iter()
        .filter(|d| blend.confidence(d) > conf_thresh)
        .copied()
        .collect()
}

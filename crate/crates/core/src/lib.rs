//! Confidence-guided region mixing for adapting a detector to an unlabelled
//! target domain, plus the toy detector, synthetic domains and evaluation
//! used to exercise it.

pub mod detector;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod image;
pub mod losses;
pub mod mixing;
pub mod nms;
pub mod schedule;
pub mod synth;
pub mod train;

pub use detector::{DetectorConfig, Target, ToyDetectorParams};
pub use error::{Error, Result};
pub use geometry::{BBox, Detection, GaussianBox};
pub use image::Image;
pub use losses::{BoxLossConfig, GammaMode, Likelihood};
pub use mixing::{MixPlan, MixStrategy};
pub use schedule::{Blend, Clock, Schedule, ScheduleMode};

//! Detector abstractions.
//!
//! Two tiers: [`DifferentiableDetector`]s expose pre-NMS candidates and a
//! backward pass onto image pixels, so patches can be trained against them;
//! any [`Detector`] (including black-box subprocess adapters) can only be
//! queried for final detections and is used for evaluation and transfer.

mod blackbox;
mod nms;
mod toy;

use ndarray::Array3;
use serde::{Deserialize, Serialize};

pub use blackbox::{AdapterError, BlackBoxAdapter, WireDetection, WireRequest, WireResponse, DEFAULT_TIMEOUT};
pub use nms::greedy_nms;
pub use toy::{ToyDetector, ToyDetectorConfig, DISTRACTOR_LABEL};

use crate::error::Result;
use crate::geometry::Detection;
use crate::losses::CandidateGrad;
use crate::raster::SceneImage;

/// Pre-NMS candidate set in the detector's canonical order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct RawCandidates {
    pub detections: Vec<Detection>,
}

/// Final detections after thresholding and NMS.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct DetectorOutput {
    pub detections: Vec<Detection>,
}

/// Post-processing thresholds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NmsParams {
    pub iou_threshold: f64,
    pub score_threshold: f64,
}

impl Default for NmsParams {
    fn default() -> Self {
        Self {
            iou_threshold: 0.5,
            score_threshold: 0.5,
        }
    }
}

/// A detector that can only be observed through its final output.
pub trait Detector: Send + Sync {
    fn detect(&self, image: &SceneImage) -> Result<DetectorOutput>;
}

/// A detector whose candidates are differentiable with respect to pixels.
pub trait DifferentiableDetector: Send + Sync {
    fn forward(&self, image: &SceneImage) -> Result<RawCandidates>;

    /// Gradient with respect to the image of `sum_n g_conf[n] * c_n +
    /// sum_n <g_box[n], B_n>`, where `grad` is indexed like the candidates
    /// returned by [`forward`](Self::forward) on the same image.
    fn backward(&self, image: &SceneImage, grad: &CandidateGrad) -> Result<Array3<f64>>;
}

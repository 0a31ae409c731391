//! The triple-loss objective and the appearance regularizer.
//!
//! Every loss has a value form and an accumulating form that adds
//! `scale * dL/d(input)` into a gradient buffer, so the weighted total and
//! its gradient come out of a single pass.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{iou_with_grad, BoundingBox, Detection};
use crate::raster::Patch;

pub const PERSON_LABEL: &str = "person";

/// Weights of the four terms in the total loss.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossWeights {
    pub det: f64,
    pub iou: f64,
    pub nms: f64,
    pub app: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            det: 1.0,
            iou: 1.0,
            nms: 0.5,
            app: 0.1,
        }
    }
}

impl LossWeights {
    pub fn zero() -> Self {
        Self {
            det: 0.0,
            iou: 0.0,
            nms: 0.0,
            app: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("det", self.det), ("iou", self.iou), ("nms", self.nms), ("app", self.app)] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "weights.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AppearanceConfig {
    /// Minimum standard deviation before the contrast penalty kicks in.
    pub sigma_min: f64,
    /// Weight of the squared spatial-gradient penalty.
    pub smooth: f64,
}

impl Default for AppearanceConfig {
    fn default() -> Self {
        Self {
            sigma_min: 0.1,
            smooth: 0.01,
        }
    }
}

impl AppearanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_min.is_finite() && self.sigma_min >= 0.0 && self.smooth.is_finite() && self.smooth >= 0.0) {
            return Err(Error::InvalidConfig(
                "appearance.sigma_min and appearance.smooth must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AttackThresholds {
    /// Candidates at or below this confidence are ignored by the det/iou terms.
    pub conf: f64,
    /// NMS overlap threshold used inside the NMS-disruption term.
    pub nms: f64,
    /// Number of top-confidence candidates paired by the NMS-disruption term.
    pub top_k: usize,
    /// Final detection threshold.
    pub det: f64,
    /// Class label whose candidates are attacked.
    pub person_label: String,
}

impl Default for AttackThresholds {
    fn default() -> Self {
        Self {
            conf: 0.25,
            nms: 0.5,
            top_k: 20,
            det: 0.5,
            person_label: PERSON_LABEL.to_string(),
        }
    }
}

impl AttackThresholds {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [("conf", self.conf), ("nms", self.nms), ("det", self.det)] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::InvalidConfig(format!("thresholds.{name} must be in [0, 1], got {v}")));
            }
        }
        if self.top_k < 2 {
            return Err(Error::InvalidConfig(format!(
                "thresholds.top_k must be >= 2, got {}",
                self.top_k
            )));
        }
        Ok(())
    }
}

/// Per-term values and their weighted sum.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub l_det: f64,
    pub l_iou: f64,
    pub l_nms: f64,
    pub l_app: f64,
    pub total: f64,
}

impl LossBreakdown {
    pub fn combine(weights: &LossWeights, l_det: f64, l_iou: f64, l_nms: f64, l_app: f64) -> Self {
        Self {
            l_det,
            l_iou,
            l_nms,
            l_app,
            total: weights.det * l_det + weights.iou * l_iou + weights.nms * l_nms + weights.app * l_app,
        }
    }

    /// Name of the first non-finite term, if any.
    pub fn non_finite_term(&self) -> Option<&'static str> {
        [
            ("l_det", self.l_det),
            ("l_iou", self.l_iou),
            ("l_nms", self.l_nms),
            ("l_app", self.l_app),
            ("total", self.total),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

/// Gradient of a scalar with respect to every candidate's confidence and box.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGrad {
    pub confidence: Vec<f64>,
    pub boxes: Vec<[f64; 4]>,
}

impl CandidateGrad {
    pub fn zeros(n: usize) -> Self {
        Self {
            confidence: vec![0.0; n],
            boxes: vec![[0.0; 4]; n],
        }
    }

    pub fn len(&self) -> usize {
        self.confidence.len()
    }

    pub fn is_empty(&self) -> bool {
        self.confidence.is_empty()
    }

    /// Candidates with any non-zero gradient component.
    pub fn active(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).filter(|&i| self.confidence[i] != 0.0 || self.boxes[i].iter().any(|&g| g != 0.0))
    }
}

/// Where an accumulating loss writes `scale * gradient`.
pub type Sink<'a> = Option<(&'a mut CandidateGrad, f64)>;

/// Indices of person candidates with confidence strictly above `tau_conf`.
pub fn person_candidates(candidates: &[Detection], person: &str, tau_conf: f64) -> Vec<usize> {
    candidates
        .iter()
        .enumerate()
        .filter(|(_, d)| d.label == person && d.confidence > tau_conf)
        .map(|(i, _)| i)
        .collect()
}

/// Mean confidence over the person candidate set; zero when it is empty.
pub fn detection_confidence_loss(candidates: &[Detection], person: &str, tau_conf: f64) -> f64 {
    accumulate_detection_confidence(candidates, person, tau_conf, None)
}

pub fn accumulate_detection_confidence(
    candidates: &[Detection],
    person: &str,
    tau_conf: f64,
    sink: Sink<'_>,
) -> f64 {
    let set = person_candidates(candidates, person, tau_conf);
    if set.is_empty() {
        return 0.0;
    }
    let inv = 1.0 / set.len() as f64;
    if let Some((grad, scale)) = sink {
        for &n in &set {
            grad.confidence[n] += scale * inv;
        }
    }
    set.iter().map(|&n| candidates[n].confidence).sum::<f64>() * inv
}

/// Confidence-weighted IoU between person candidates and ground-truth boxes,
/// normalized by `|S| * |B*|`.
pub fn bbox_iou_loss(candidates: &[Detection], person: &str, tau_conf: f64, gt_boxes: &[BoundingBox]) -> f64 {
    accumulate_bbox_iou(candidates, person, tau_conf, gt_boxes, None)
}

pub fn accumulate_bbox_iou(
    candidates: &[Detection],
    person: &str,
    tau_conf: f64,
    gt_boxes: &[BoundingBox],
    mut sink: Sink<'_>,
) -> f64 {
    let set = person_candidates(candidates, person, tau_conf);
    if set.is_empty() || gt_boxes.is_empty() {
        return 0.0;
    }
    let norm = 1.0 / (set.len() * gt_boxes.len()) as f64;
    let mut total = 0.0;
    for &n in &set {
        let cand = &candidates[n];
        let mut iou_sum = 0.0;
        let mut box_grad = [0.0; 4];
        for gt in gt_boxes {
            let (v, g, _) = iou_with_grad(&cand.bbox, gt);
            iou_sum += v;
            for k in 0..4 {
                box_grad[k] += g[k];
            }
        }
        total += iou_sum * cand.confidence;
        if let Some((grad, scale)) = sink.as_mut() {
            grad.confidence[n] += *scale * norm * iou_sum;
            for k in 0..4 {
                grad.boxes[n][k] += *scale * norm * cand.confidence * box_grad[k];
            }
        }
    }
    total * norm
}

/// `log(1 + e^u)` without overflow.
pub fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u + (-u).exp().ln_1p()
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

/// Top-`k` person candidates by confidence; ties go to the lower index.
pub fn top_k_person(candidates: &[Detection], person: &str, k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..candidates.len())
        .filter(|&i| candidates[i].label == person)
        .collect();
    idx.sort_by(|&a, &b| {
        candidates[b]
            .confidence
            .total_cmp(&candidates[a].confidence)
            .then(a.cmp(&b))
    });
    idx.truncate(k);
    idx
}

/// Mean of `softplus(IoU - tau_nms) * c_i * c_j` over ordered pairs of the
/// top-`k` person candidates; zero with fewer than two.
pub fn nms_disruption_loss(candidates: &[Detection], person: &str, k: usize, tau_nms: f64) -> f64 {
    accumulate_nms_disruption(candidates, person, k, tau_nms, None)
}

pub fn accumulate_nms_disruption(
    candidates: &[Detection],
    person: &str,
    k: usize,
    tau_nms: f64,
    mut sink: Sink<'_>,
) -> f64 {
    let top = top_k_person(candidates, person, k);
    let n = top.len();
    if n < 2 {
        return 0.0;
    }
    // The summand is symmetric, so each unordered pair counts twice.
    let pair_weight = 2.0 / (n * (n - 1)) as f64;
    let mut total = 0.0;
    for a in 0..n {
        for b in (a + 1)..n {
            let (i, j) = (top[a], top[b]);
            let (ci, cj) = (candidates[i].confidence, candidates[j].confidence);
            let (v, gi, gj) = iou_with_grad(&candidates[i].bbox, &candidates[j].bbox);
            let u = v - tau_nms;
            let phi = softplus(u);
            total += phi * ci * cj;
            if let Some((grad, scale)) = sink.as_mut() {
                let s = *scale * pair_weight;
                grad.confidence[i] += s * phi * cj;
                grad.confidence[j] += s * phi * ci;
                let dphi = s * sigmoid(u) * ci * cj;
                for q in 0..4 {
                    grad.boxes[i][q] += dphi * gi[q];
                    grad.boxes[j][q] += dphi * gj[q];
                }
            }
        }
    }
    total * pair_weight
}

/// Global mean and population standard deviation over all values.
pub fn patch_statistics(patch: &Patch) -> (f64, f64) {
    let data = patch.as_slice();
    let n = data.len() as f64;
    let mean = data.iter().sum::<f64>() / n;
    let var = data.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn squared_gradient_norm(patch: &Patch) -> f64 {
    let p = patch.pixels();
    let (h, w, c) = p.dim();
    let mut s = 0.0;
    for ch in 0..c {
        for i in 0..h {
            for j in 0..w {
                if i + 1 < h {
                    let d = p[[i + 1, j, ch]] - p[[i, j, ch]];
                    s += d * d;
                }
                if j + 1 < w {
                    let d = p[[i, j + 1, ch]] - p[[i, j, ch]];
                    s += d * d;
                }
            }
        }
    }
    s
}

/// Brightness, contrast and smoothness regularizer on the raw patch.
pub fn appearance_loss(patch: &Patch, cfg: &AppearanceConfig) -> f64 {
    let (mean, std) = patch_statistics(patch);
    (mean - 0.5).powi(2) + (cfg.sigma_min - std).max(0.0) + cfg.smooth * squared_gradient_norm(patch)
}

/// Appearance loss and its gradient with respect to every patch value.
///
/// The standard deviation's gradient is taken as zero at `std == 0`.
pub fn appearance_loss_with_grad(patch: &Patch, cfg: &AppearanceConfig) -> (f64, Array3<f64>) {
    let value = appearance_loss(patch, cfg);
    let (mean, std) = patch_statistics(patch);
    let p = patch.pixels();
    let (h, w, c) = p.dim();
    let n = (h * w * c) as f64;
    let d_mean = 2.0 * (mean - 0.5) / n;
    let contrast_active = cfg.sigma_min - std > 0.0 && std > 0.0;
    let mut grad = Array3::from_shape_fn((h, w, c), |(i, j, ch)| {
        let mut g = d_mean;
        if contrast_active {
            g -= (p[[i, j, ch]] - mean) / (n * std);
        }
        g
    });
    if cfg.smooth != 0.0 {
        let k = 2.0 * cfg.smooth;
        for ch in 0..c {
            for i in 0..h {
                for j in 0..w {
                    if i + 1 < h {
                        let d = p[[i + 1, j, ch]] - p[[i, j, ch]];
                        grad[[i + 1, j, ch]] += k * d;
                        grad[[i, j, ch]] -= k * d;
                    }
                    if j + 1 < w {
                        let d = p[[i, j + 1, ch]] - p[[i, j, ch]];
                        grad[[i, j + 1, ch]] += k * d;
                        grad[[i, j, ch]] -= k * d;
                    }
                }
            }
        }
    }
    (value, grad)
}

/// The three detector-facing terms for one image.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct SceneTerms {
    pub l_det: f64,
    pub l_iou: f64,
    pub l_nms: f64,
}

/// Computes the detector-facing terms, accumulating their weighted gradient
/// into `grad` when given.
pub fn scene_terms(
    candidates: &[Detection],
    gt_boxes: &[BoundingBox],
    weights: &LossWeights,
    thresholds: &AttackThresholds,
    mut grad: Option<&mut CandidateGrad>,
) -> SceneTerms {
    let person = thresholds.person_label.as_str();
    let l_det = accumulate_detection_confidence(
        candidates,
        person,
        thresholds.conf,
        grad.as_deref_mut().map(|g| (g, weights.det)),
    );
    let l_iou = accumulate_bbox_iou(
        candidates,
        person,
        thresholds.conf,
        gt_boxes,
        grad.as_deref_mut().map(|g| (g, weights.iou)),
    );
    let l_nms = accumulate_nms_disruption(
        candidates,
        person,
        thresholds.top_k,
        thresholds.nms,
        grad.as_deref_mut().map(|g| (g, weights.nms)),
    );
    SceneTerms { l_det, l_iou, l_nms }
}

/// All four terms and their weighted sum for a single image.
pub fn total_loss(
    candidates: &[Detection],
    gt_boxes: &[BoundingBox],
    patch: &Patch,
    weights: &LossWeights,
    thresholds: &AttackThresholds,
    app: &AppearanceConfig,
) -> LossBreakdown {
    let t = scene_terms(candidates, gt_boxes, weights, thresholds, None);
    LossBreakdown::combine(weights, t.l_det, t.l_iou, t.l_nms, appearance_loss(patch, app))
}

/// [`total_loss`] together with its gradient with respect to the candidates
/// and the patch.
pub fn total_loss_with_grad(
    candidates: &[Detection],
    gt_boxes: &[BoundingBox],
    patch: &Patch,
    weights: &LossWeights,
    thresholds: &AttackThresholds,
    app: &AppearanceConfig,
) -> (LossBreakdown, CandidateGrad, Array3<f64>) {
    let mut grad = CandidateGrad::zeros(candidates.len());
    let t = scene_terms(candidates, gt_boxes, weights, thresholds, Some(&mut grad));
    let (l_app, mut patch_grad) = appearance_loss_with_grad(patch, app);
    patch_grad.mapv_inplace(|g| g * weights.app);
    (
        LossBreakdown::combine(weights, t.l_det, t.l_iou, t.l_nms, l_app),
        grad,
        patch_grad,
    )
}

//! A template-correlation detector with closed-form gradients.
//!
//! Each template slides over the image at a fixed stride. A window's score is
//! `s = <w, window> + b` and its confidence `sigmoid(a * s)`. Four further
//! linear heads give box offsets squashed by `tanh`, so a predicted box never
//! moves or resizes by more than `max_offset` of the window size.
//!
//! Templates are built once from a fixed seed. The person-analog template is
//! a high-contrast cell pattern whose weights are concentrated around the
//! upper torso; synthetic scenes plant exactly that pattern.

use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{greedy_nms, Detector, DetectorOutput, DifferentiableDetector, NmsParams, RawCandidates};
use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, Detection};
use crate::losses::{CandidateGrad, PERSON_LABEL};
use crate::raster::{SceneImage, CHANNELS};

pub const DISTRACTOR_LABEL: &str = "distractor";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ToyDetectorConfig {
    /// Square window / template side in pixels.
    pub window: usize,
    pub stride: usize,
    /// Sigmoid sharpness `a`.
    pub sharpness: f64,
    /// Template response to its own tile, before the bias.
    pub match_score: f64,
    pub bias: f64,
    /// Side of the square cells of the tile pattern.
    pub cell: usize,
    /// Spread of the spatial weighting; `None` weights the window uniformly.
    pub emphasis_sigma: Option<f64>,
    /// Vertical center of the person template's weighting, as a fraction of
    /// the window height.
    pub emphasis_anchor: f64,
    /// L2 norm of each offset head.
    pub offset_gain: f64,
    /// Offset bound as a fraction of the window size.
    pub max_offset: f64,
    pub seed: u64,
    pub nms: NmsParams,
}

impl Default for ToyDetectorConfig {
    fn default() -> Self {
        Self {
            window: 24,
            stride: 4,
            sharpness: 6.0,
            match_score: 2.0,
            bias: -1.0,
            cell: 4,
            emphasis_sigma: Some(4.0),
            emphasis_anchor: 0.4,
            offset_gain: 0.3,
            max_offset: 0.25,
            seed: 0x7011_da7a,
            nms: NmsParams::default(),
        }
    }
}

#[derive(Debug, Clone)]
struct Template {
    label: &'static str,
    /// `(T, T, 3)` appearance the template was built from.
    tile: Array3<f64>,
    /// Score head followed by the four offset heads (dx, dy, dw, dh).
    heads: [Vec<f64>; 5],
    biases: [f64; 5],
}

#[derive(Debug, Clone)]
pub struct ToyDetector {
    cfg: ToyDetectorConfig,
    templates: Vec<Template>,
}

fn sigmoid(u: f64) -> f64 {
    if u >= 0.0 {
        1.0 / (1.0 + (-u).exp())
    } else {
        let e = u.exp();
        e / (1.0 + e)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn cell_pattern(rng: &mut ChaCha8Rng, t: usize, cell: usize) -> Array3<f64> {
    let cells = t.div_ceil(cell);
    let bits: Vec<f64> = (0..cells * cells * CHANNELS)
        .map(|_| if rng.random::<bool>() { 0.95 } else { 0.05 })
        .collect();
    Array3::from_shape_fn((t, t, CHANNELS), |(i, j, ch)| {
        bits[((i / cell) * cells + j / cell) * CHANNELS + ch]
    })
}

fn emphasis(t: usize, sigma: Option<f64>, anchor_y: f64) -> Array3<f64> {
    let cx = t as f64 / 2.0;
    let cy = anchor_y * t as f64;
    Array3::from_shape_fn((t, t, CHANNELS), |(i, j, _)| match sigma {
        Some(s) => {
            let dx = j as f64 + 0.5 - cx;
            let dy = i as f64 + 0.5 - cy;
            (-(dx * dx + dy * dy) / (2.0 * s * s)).exp()
        }
        None => 1.0,
    })
}

fn zero_sum(mut v: Vec<f64>) -> Vec<f64> {
    let mean = v.iter().sum::<f64>() / v.len() as f64;
    v.iter_mut().for_each(|x| *x -= mean);
    v
}

impl Template {
    fn build(
        label: &'static str,
        tile: Array3<f64>,
        weight: &Array3<f64>,
        cfg: &ToyDetectorConfig,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let flat_tile: Vec<f64> = tile.iter().copied().collect();
        let raw: Vec<f64> = tile.iter().zip(weight.iter()).map(|(p, g)| g * (p - 0.5)).collect();
        let mut score = zero_sum(raw);
        let k = cfg.match_score / dot(&score, &flat_tile);
        score.iter_mut().for_each(|x| *x *= k);

        let mut heads: [Vec<f64>; 5] = Default::default();
        let mut biases = [cfg.bias, 0.0, 0.0, 0.0, 0.0];
        heads[0] = score;
        for h in 1..5 {
            let raw: Vec<f64> = weight
                .iter()
                .map(|g| g * rng.sample::<f64, _>(StandardNormal))
                .collect();
            let mut w = zero_sum(raw);
            let norm = dot(&w, &w).sqrt();
            w.iter_mut().for_each(|x| *x *= cfg.offset_gain / norm);
            // A perfectly aligned tile regresses to the window itself.
            biases[h] = -dot(&w, &flat_tile);
            heads[h] = w;
        }
        Self {
            label,
            tile,
            heads,
            biases,
        }
    }
}

/// Per-window pre-activations.
struct WindowResponse {
    score: f64,
    offsets: [f64; 4],
}

impl ToyDetector {
    pub fn new(cfg: ToyDetectorConfig) -> Result<Self> {
        if cfg.window == 0 || cfg.stride == 0 || cfg.cell == 0 {
            return Err(Error::InvalidConfig("toy detector window, stride and cell must be >= 1".into()));
        }
        if !(cfg.max_offset > 0.0 && cfg.max_offset < 1.0) {
            return Err(Error::InvalidConfig("toy detector max_offset must be in (0, 1)".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let t = cfg.window;
        let person_tile = cell_pattern(&mut rng, t, cfg.cell);
        let distractor_tile = cell_pattern(&mut rng, t, cfg.cell);
        let person_weight = emphasis(t, cfg.emphasis_sigma, cfg.emphasis_anchor);
        let distractor_weight = emphasis(t, cfg.emphasis_sigma, 0.5);
        let templates = vec![
            Template::build(PERSON_LABEL, person_tile, &person_weight, &cfg, &mut rng),
            Template::build(DISTRACTOR_LABEL, distractor_tile, &distractor_weight, &cfg, &mut rng),
        ];
        Ok(Self { cfg, templates })
    }

    pub fn config(&self) -> &ToyDetectorConfig {
        &self.cfg
    }

    pub fn window(&self) -> usize {
        self.cfg.window
    }

    pub fn stride(&self) -> usize {
        self.cfg.stride
    }

    pub fn person_label(&self) -> &'static str {
        PERSON_LABEL
    }

    /// Appearance the person-analog template responds to most strongly.
    pub fn person_tile(&self) -> &Array3<f64> {
        &self.templates[0].tile
    }

    pub fn distractor_tile(&self) -> &Array3<f64> {
        &self.templates[1].tile
    }

    /// Confidence of the person template on its own tile.
    pub fn matched_confidence(&self) -> f64 {
        sigmoid(self.cfg.sharpness * (self.cfg.match_score + self.cfg.bias))
    }

    fn grid(&self, height: usize, width: usize) -> Result<(usize, usize)> {
        let t = self.cfg.window;
        if height < t || width < t {
            return Err(Error::ImageTooSmall {
                height,
                width,
                required: t,
            });
        }
        Ok(((height - t) / self.cfg.stride + 1, (width - t) / self.cfg.stride + 1))
    }

    fn respond(&self, data: &[f64], width: usize, tmpl: &Template, r0: usize, c0: usize) -> WindowResponse {
        let t = self.cfg.window;
        let row_len = t * CHANNELS;
        let mut acc = [0.0; 5];
        for i in 0..t {
            let start = ((r0 + i) * width + c0) * CHANNELS;
            let x = &data[start..start + row_len];
            let off = i * row_len;
            for (h, a) in acc.iter_mut().enumerate() {
                *a += dot(&tmpl.heads[h][off..off + row_len], x);
            }
        }
        WindowResponse {
            score: acc[0] + tmpl.biases[0],
            offsets: [
                acc[1] + tmpl.biases[1],
                acc[2] + tmpl.biases[2],
                acc[3] + tmpl.biases[3],
                acc[4] + tmpl.biases[4],
            ],
        }
    }

    fn decode_box(&self, r0: usize, c0: usize, offsets: &[f64; 4]) -> BoundingBox {
        let t = self.cfg.window as f64;
        let m = self.cfg.max_offset;
        let cx = c0 as f64 + t / 2.0 + m * t * offsets[0].tanh();
        let cy = r0 as f64 + t / 2.0 + m * t * offsets[1].tanh();
        let w = t * (1.0 + m * offsets[2].tanh());
        let h = t * (1.0 + m * offsets[3].tanh());
        BoundingBox::new(cx - w / 2.0, cy - h / 2.0, cx + w / 2.0, cy + h / 2.0)
    }

    /// `(template, window row, window col)` of a candidate index.
    fn locate(&self, index: usize, rows: usize, cols: usize) -> (usize, usize, usize) {
        let per = rows * cols;
        let t = index / per;
        let rem = index % per;
        (t, (rem / cols) * self.cfg.stride, (rem % cols) * self.cfg.stride)
    }
}

impl DifferentiableDetector for ToyDetector {
    fn forward(&self, image: &SceneImage) -> Result<RawCandidates> {
        let (rows, cols) = self.grid(image.height(), image.width())?;
        let data = image.as_slice();
        let width = image.width();
        let a = self.cfg.sharpness;
        let mut detections = Vec::with_capacity(self.templates.len() * rows * cols);
        for tmpl in &self.templates {
            for wr in 0..rows {
                for wc in 0..cols {
                    let (r0, c0) = (wr * self.cfg.stride, wc * self.cfg.stride);
                    let resp = self.respond(data, width, tmpl, r0, c0);
                    detections.push(Detection::new(
                        self.decode_box(r0, c0, &resp.offsets),
                        tmpl.label,
                        sigmoid(a * resp.score),
                    ));
                }
            }
        }
        Ok(RawCandidates { detections })
    }

    fn backward(&self, image: &SceneImage, grad: &CandidateGrad) -> Result<Array3<f64>> {
        let (rows, cols) = self.grid(image.height(), image.width())?;
        let total = self.templates.len() * rows * cols;
        assert_eq!(grad.len(), total, "gradient does not match the candidate set");
        let data = image.as_slice();
        let width = image.width();
        let t = self.cfg.window;
        let tf = t as f64;
        let m = self.cfg.max_offset;
        let a = self.cfg.sharpness;
        let row_len = t * CHANNELS;

        let mut out = Array3::zeros((image.height(), width, CHANNELS));
        let g = out.as_slice_mut().expect("standard layout");
        for n in grad.active() {
            let (ti, r0, c0) = self.locate(n, rows, cols);
            let tmpl = &self.templates[ti];
            let resp = self.respond(data, width, tmpl, r0, c0);
            let conf = sigmoid(a * resp.score);
            let [gx1, gy1, gx2, gy2] = grad.boxes[n];

            // Box corners as functions of the squashed offsets.
            let d_ex = m * tf * (gx1 + gx2);
            let d_ey = m * tf * (gy1 + gy2);
            let d_ew = 0.5 * m * tf * (gx2 - gx1);
            let d_eh = 0.5 * m * tf * (gy2 - gy1);

            let mut coeff = [0.0; 5];
            coeff[0] = grad.confidence[n] * a * conf * (1.0 - conf);
            for (k, d) in [d_ex, d_ey, d_ew, d_eh].into_iter().enumerate() {
                let th = resp.offsets[k].tanh();
                coeff[k + 1] = d * (1.0 - th * th);
            }
            for i in 0..t {
                let start = ((r0 + i) * width + c0) * CHANNELS;
                let dst = &mut g[start..start + row_len];
                let off = i * row_len;
                for (h, &c) in coeff.iter().enumerate() {
                    if c == 0.0 {
                        continue;
                    }
                    for (d, w) in dst.iter_mut().zip(&tmpl.heads[h][off..off + row_len]) {
                        *d += c * w;
                    }
                }
            }
        }
        Ok(out)
    }
}

impl Detector for ToyDetector {
    fn detect(&self, image: &SceneImage) -> Result<DetectorOutput> {
        let raw = self.forward(image)?;
        Ok(greedy_nms(
            &raw.detections,
            self.cfg.nms.iou_threshold,
            self.cfg.nms.score_threshold,
        ))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn assert_box_near(a: &BoundingBox, b: &BoundingBox) {
        for (x, y) in a.to_array().iter().zip(b.to_array()) {
            assert!((x - y).abs() < 1e-9, "{a:?} vs {b:?}");
        }
    }

    fn small() -> ToyDetector {
        ToyDetector::new(ToyDetectorConfig {
            window: 8,
            stride: 2,
            cell: 2,
            emphasis_sigma: Some(2.5),
            ..Default::default()
        })
        .unwrap()
    }

    fn plant(tile: &Array3<f64>, h: usize, w: usize, r: usize, c: usize, background: f64) -> SceneImage {
        let mut img = Array3::from_elem((h, w, 3), background);
        let t = tile.dim().0;
        for i in 0..t {
            for j in 0..t {
                for ch in 0..3 {
                    img[[r + i, c + j, ch]] = tile[[i, j, ch]];
                }
            }
        }
        SceneImage::new(img).unwrap()
    }

    #[test]
    fn matched_tile_fires_and_zero_image_sits_at_bias() {
        let det = ToyDetector::new(ToyDetectorConfig {
            sharpness: 20.0,
            ..Default::default()
        })
        .unwrap();
        let img = plant(det.person_tile(), 96, 96, 32, 40, 0.0);
        let raw = det.forward(&img).unwrap();
        let (rows, cols) = det.grid(96, 96).unwrap();
        let hit = (32 / 4) * cols + 40 / 4;
        assert!(raw.detections[hit].confidence > 0.999_99);
        assert_box_near(&raw.detections[hit].bbox, &BoundingBox::new(40.0, 32.0, 64.0, 56.0));
        let far = 0;
        assert!((raw.detections[far].confidence - sigmoid(-20.0)).abs() < 1e-12);
        assert_eq!(raw.detections.len(), 2 * rows * cols);

        let det = ToyDetector::new(ToyDetectorConfig {
            sharpness: 5.0,
            bias: -1.0,
            ..Default::default()
        })
        .unwrap();
        let raw = det.forward(&SceneImage::filled(40, 40, 0.0)).unwrap();
        for d in &raw.detections {
            assert!((d.confidence - 0.006_692_850_924_284_856).abs() < 1e-15);
        }
    }

    #[test]
    fn too_small_image_is_an_error() {
        let det = small();
        assert!(matches!(
            det.forward(&SceneImage::filled(7, 20, 0.5)),
            Err(Error::ImageTooSmall { .. })
        ));
    }

    #[test]
    fn deterministic() {
        let a = small();
        let b = small();
        let img = plant(a.person_tile(), 20, 20, 4, 6, 0.5);
        assert_eq!(a.forward(&img).unwrap(), b.forward(&img).unwrap());
    }

    #[test]
    fn detect_runs_nms() {
        let det = ToyDetector::new(ToyDetectorConfig::default()).unwrap();
        let img = plant(det.person_tile(), 64, 64, 20, 16, 0.5);
        let out = det.detect(&img).unwrap();
        assert_eq!(out.detections.len(), 1);
        assert_eq!(out.detections[0].label, PERSON_LABEL);
        assert_box_near(&out.detections[0].bbox, &BoundingBox::new(16.0, 20.0, 40.0, 44.0));
    }

    #[test]
    fn backward_matches_finite_differences() {
        let det = ToyDetector::new(ToyDetectorConfig {
            window: 6,
            stride: 2,
            cell: 2,
            sharpness: 2.0,
            ..Default::default()
        })
        .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let img = SceneImage::from_clamped(Array3::from_shape_simple_fn((10, 10, 3), || 0.2 + 0.6 * rng.random::<f64>()));
        let n = det.forward(&img).unwrap().detections.len();
        let mut grad = CandidateGrad::zeros(n);
        for i in 0..n {
            grad.confidence[i] = rng.random::<f64>() - 0.5;
            for k in 0..4 {
                grad.boxes[i][k] = rng.random::<f64>() - 0.5;
            }
        }
        let objective = |im: &SceneImage| -> f64 {
            let raw = det.forward(im).unwrap();
            raw.detections
                .iter()
                .enumerate()
                .map(|(i, d)| {
                    grad.confidence[i] * d.confidence
                        + d.bbox.to_array().iter().zip(&grad.boxes[i]).map(|(b, g)| b * g).sum::<f64>()
                })
                .sum()
        };
        let analytic = det.backward(&img, &grad).unwrap();
        let h = 1e-5;
        for idx in 0..300 {
            let mut plus = img.as_array().clone();
            let mut minus = img.as_array().clone();
            plus.as_slice_mut().unwrap()[idx] += h;
            minus.as_slice_mut().unwrap()[idx] -= h;
            let fd = (objective(&SceneImage::new(plus).unwrap()) - objective(&SceneImage::new(minus).unwrap())) / (2.0 * h);
            let an = analytic.as_slice().unwrap()[idx];
            assert!((fd - an).abs() <= 1e-6 * fd.abs().max(an.abs()).max(1.0), "{idx}: {fd} vs {an}");
        }
    }
}

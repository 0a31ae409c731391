//! Patch training: Adam on the batch-averaged attack objective, with the
//! patch projected back onto [0, 1] after every step.

use std::path::Path;

use ndarray::Array3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::augment::{augment_with_tape, sample_augmentation, AugmentConfig};
use crate::compositor::{placement_map, JitterRanges, PlacementJitter, PlacementSpec};
use crate::data_io::{save_patch, SceneRecord};
use crate::detector::DifferentiableDetector;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::losses::{
    appearance_loss_with_grad, scene_terms, AppearanceConfig, AttackThresholds, CandidateGrad, LossBreakdown,
    LossWeights, SceneTerms,
};
use crate::raster::{resize_bilinear, Patch, CHANNELS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "kebab-case")]
pub enum PatchInit {
    Gray,
    #[default]
    UniformRandom,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// `(height, width)` every scene is resized to.
    pub input_resolution: (usize, usize),
    /// `(height, width)` of the patch.
    pub patch_resolution: (usize, usize),
    pub init: PatchInit,
    pub seed: u64,
    pub weights: LossWeights,
    pub thresholds: AttackThresholds,
    pub appearance: AppearanceConfig,
    pub augment: AugmentConfig,
    pub placement: PlacementSpec,
    pub jitter: JitterRanges,
    /// Write a checkpoint every this many steps; 0 disables checkpoints.
    pub checkpoint_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.02,
            batch_size: 8,
            epochs: 25,
            input_resolution: (640, 640),
            patch_resolution: (128, 128),
            init: PatchInit::default(),
            seed: 42,
            weights: LossWeights::default(),
            thresholds: AttackThresholds::default(),
            appearance: AppearanceConfig::default(),
            augment: AugmentConfig::default(),
            placement: PlacementSpec::default(),
            jitter: JitterRanges::default(),
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return bad(format!("train.learning_rate must be > 0, got {}", self.learning_rate));
        }
        if self.batch_size == 0 {
            return bad("train.batch_size must be >= 1".into());
        }
        if self.epochs == 0 {
            return bad("train.epochs must be >= 1".into());
        }
        for (name, (h, w)) in [
            ("input_resolution", self.input_resolution),
            ("patch_resolution", self.patch_resolution),
        ] {
            if h == 0 || w == 0 {
                return bad(format!("train.{name} must be >= 1 in both dimensions"));
            }
        }
        self.weights.validate()?;
        self.thresholds.validate()?;
        self.appearance.validate()?;
        self.augment.validate()?;
        self.placement.validate()
    }
}

/// Constant 0.5, or i.i.d. uniform values from `seed`. Values are rounded to
/// f32 so the stored patch is exactly what the sidecar holds.
pub fn init_patch(resolution: (usize, usize), mode: PatchInit, seed: u64) -> Patch {
    let (h, w) = resolution;
    match mode {
        PatchInit::Gray => Patch::filled(h, w, 0.5),
        PatchInit::UniformRandom => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut p = Patch::from_clamped(Array3::from_shape_simple_fn((h, w, CHANNELS), || rng.random::<f64>()));
            p.quantize_f32();
            p
        }
    }
}

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const EPS: f64 = 1e-8;

#[derive(Debug, Clone)]
pub struct TrainState {
    pub patch: Patch,
    pub step: usize,
    pub m: Array3<f64>,
    pub v: Array3<f64>,
    pub history: Vec<LossBreakdown>,
}

impl TrainState {
    pub fn new(patch: Patch) -> Self {
        let dim = patch.as_array().dim();
        Self {
            patch,
            step: 0,
            m: Array3::zeros(dim),
            v: Array3::zeros(dim),
            history: Vec::new(),
        }
    }

    fn adam_update(&mut self, grad: &Array3<f64>, lr: f64) {
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - BETA1.powi(t);
        let c2 = 1.0 - BETA2.powi(t);
        let mut p = self.patch.as_array().clone();
        ndarray::Zip::from(&mut p)
            .and(&mut self.m)
            .and(&mut self.v)
            .and(grad)
            .for_each(|p, m, v, &g| {
                *m = BETA1 * *m + (1.0 - BETA1) * g;
                *v = BETA2 * *v + (1.0 - BETA2) * g * g;
                *p -= lr * (*m / c1) / ((*v / c2).sqrt() + EPS);
            });
        self.patch = Patch::from_clamped(p);
        self.patch.quantize_f32();
    }
}

/// Scene resized to `(height, width)` with boxes scaled to match.
pub fn prepare_scene(record: &SceneRecord, resolution: (usize, usize)) -> SceneRecord {
    let (h, w) = resolution;
    let (h0, w0) = (record.image.height(), record.image.width());
    if (h, w) == (h0, w0) {
        return record.clone();
    }
    let sx = w as f64 / w0 as f64;
    let sy = h as f64 / h0 as f64;
    SceneRecord {
        id: record.id.clone(),
        image: resize_bilinear(&record.image, h, w),
        person_boxes: record
            .person_boxes
            .iter()
            .map(|b| BoundingBox::new(b.x1 * sx, b.y1 * sy, b.x2 * sx, b.y2 * sy))
            .collect(),
    }
}

/// SplitMix64 finalizer, used to derive independent stream seeds.
fn mix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Random stream for one scene in one epoch, independent of batch layout.
pub fn scene_rng(seed: u64, epoch: usize, index: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(mix(mix(mix(seed) ^ epoch as u64) ^ index as u64))
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(mix(mix(seed ^ 0x5eed_0f_5eed) ^ epoch as u64));
    order.shuffle(&mut rng);
    order
}

/// Per-image detector terms and their gradient on the patch.
fn scene_objective(
    patch: &Patch,
    scene: &SceneRecord,
    detector: &dyn DifferentiableDetector,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<(SceneTerms, Array3<f64>)> {
    let jitter: Vec<PlacementJitter> = if cfg.jitter.is_disabled() {
        Vec::new()
    } else {
        scene.person_boxes.iter().map(|_| cfg.jitter.sample(rng)).collect()
    };
    let (map, _) = placement_map(&scene.image, patch, &scene.person_boxes, &cfg.placement, &jitter);
    let composite = map.render(&scene.image, patch);
    let (h, w) = (composite.height(), composite.width());

    let draws = cfg.augment.draws_per_step;
    let mut terms = SceneTerms::default();
    let mut grad = Array3::zeros(patch.as_array().dim());
    for _ in 0..draws {
        let draw = sample_augmentation(&cfg.augment, rng, h, w);
        let (seen, tape) = augment_with_tape(&composite, &draw);
        let gt: Vec<BoundingBox> = scene.person_boxes.iter().map(|b| draw.transform_box(b)).collect();
        let raw = detector.forward(&seen)?;
        let mut cand_grad = CandidateGrad::zeros(raw.detections.len());
        let t = scene_terms(&raw.detections, &gt, &cfg.weights, &cfg.thresholds, Some(&mut cand_grad));
        terms.l_det += t.l_det;
        terms.l_iou += t.l_iou;
        terms.l_nms += t.l_nms;
        if cand_grad.active().next().is_some() {
            let g_seen = detector.backward(&seen, &cand_grad)?;
            grad += &map.backward(&tape.backward(&g_seen));
        }
    }
    let k = 1.0 / draws as f64;
    terms.l_det *= k;
    terms.l_iou *= k;
    terms.l_nms *= k;
    grad *= k;
    Ok((terms, grad))
}

/// Batch loss and its gradient with respect to the patch.
///
/// `batch` pairs each scene with its dataset index; together with `epoch`
/// that fixes the random draws, so this is a pure function of its inputs.
/// Scenes are assumed already resized to the input resolution.
pub fn batch_objective(
    patch: &Patch,
    batch: &[(usize, &SceneRecord)],
    detector: &dyn DifferentiableDetector,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<(LossBreakdown, Array3<f64>)> {
    if batch.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let per_image: Vec<Result<(SceneTerms, Array3<f64>)>> = batch
        .par_iter()
        .map(|&(index, scene)| {
            let mut rng = scene_rng(cfg.seed, epoch, index);
            scene_objective(patch, scene, detector, cfg, &mut rng)
        })
        .collect();

    let n = batch.len() as f64;
    let mut mean = SceneTerms::default();
    let mut grad = Array3::zeros(patch.as_array().dim());
    for r in per_image {
        let (t, g) = r?;
        mean.l_det += t.l_det;
        mean.l_iou += t.l_iou;
        mean.l_nms += t.l_nms;
        grad += &g;
    }
    mean.l_det /= n;
    mean.l_iou /= n;
    mean.l_nms /= n;
    grad /= n;

    let (l_app, app_grad) = appearance_loss_with_grad(patch, &cfg.appearance);
    grad.scaled_add(cfg.weights.app, &app_grad);
    Ok((LossBreakdown::combine(&cfg.weights, mean.l_det, mean.l_iou, mean.l_nms, l_app), grad))
}

/// One Adam step on one batch. Fails without touching `state` if the loss
/// or its gradient is not finite.
pub fn train_step(
    state: &mut TrainState,
    batch: &[(usize, &SceneRecord)],
    detector: &dyn DifferentiableDetector,
    cfg: &TrainConfig,
    epoch: usize,
) -> Result<LossBreakdown> {
    let (loss, grad) = batch_objective(&state.patch, batch, detector, cfg, epoch)?;
    if let Some(term) = loss.non_finite_term() {
        return Err(Error::NonFinite { term: term.to_string() });
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFinite {
            term: "patch gradient".to_string(),
        });
    }
    state.adam_update(&grad, cfg.learning_rate);
    state.history.push(loss);
    Ok(loss)
}

/// Full training run. Equivalent to [`train_with`] without a step callback.
pub fn train(dataset: &[SceneRecord], detector: &dyn DifferentiableDetector, cfg: &TrainConfig) -> Result<TrainState> {
    train_with(dataset, detector, cfg, |_| Ok(()))
}

/// Trains for `cfg.epochs` epochs over a per-epoch shuffle of `dataset`,
/// calling `on_step` after every step.
pub fn train_with(
    dataset: &[SceneRecord],
    detector: &dyn DifferentiableDetector,
    cfg: &TrainConfig,
    mut on_step: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainState> {
    cfg.validate()?;
    if dataset.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let scenes: Vec<SceneRecord> = dataset
        .par_iter()
        .map(|r| prepare_scene(r, cfg.input_resolution))
        .collect();
    let mut state = TrainState::new(init_patch(cfg.patch_resolution, cfg.init, cfg.seed));
    for epoch in 0..cfg.epochs {
        let order = epoch_order(scenes.len(), cfg.seed, epoch);
        for chunk in order.chunks(cfg.batch_size) {
            let batch: Vec<(usize, &SceneRecord)> = chunk.iter().map(|&i| (i, &scenes[i])).collect();
            train_step(&mut state, &batch, detector, cfg, epoch)?;
            on_step(&state)?;
        }
        log::info!(
            "epoch {}/{}: total loss {:.5}",
            epoch + 1,
            cfg.epochs,
            state.history.last().map_or(f64::NAN, |l| l.total)
        );
    }
    Ok(state)
}

#[derive(Debug, Serialize)]
struct CheckpointMeta<'a> {
    step: usize,
    m_norm: f64,
    v_norm: f64,
    history_tail: &'a [LossBreakdown],
}

const HISTORY_TAIL: usize = 16;

/// Writes `checkpoint-<step>.tpch` and `checkpoint-<step>.json` into `dir`.
pub fn write_checkpoint(dir: &Path, state: &TrainState) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    let stem = format!("checkpoint-{:06}", state.step);
    save_patch(&dir.join(format!("{stem}.tpch")), &state.patch)?;
    let tail = &state.history[state.history.len().saturating_sub(HISTORY_TAIL)..];
    let meta = CheckpointMeta {
        step: state.step,
        m_norm: state.m.iter().map(|x| x * x).sum::<f64>().sqrt(),
        v_norm: state.v.iter().map(|x| x * x).sum::<f64>().sqrt(),
        history_tail: tail,
    };
    let json = serde_json::to_string_pretty(&meta).expect("checkpoint serializes");
    std::fs::write(dir.join(format!("{stem}.json")), json)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn init_modes() {
        let g = init_patch((128, 128), PatchInit::Gray, 1);
        assert!(g.as_slice().iter().all(|&v| v == 0.5));
        let a = init_patch((128, 128), PatchInit::UniformRandom, 9);
        let b = init_patch((128, 128), PatchInit::UniformRandom, 9);
        assert_eq!(a, b);
        let mean = a.as_slice().iter().sum::<f64>() / a.as_slice().len() as f64;
        assert!((mean - 0.5).abs() < 0.01, "{mean}");
    }

    #[test]
    fn adam_first_step_moves_by_lr() {
        let mut s = TrainState::new(Patch::filled(1, 1, 0.5));
        let g = Array3::from_shape_vec((1, 1, 3), vec![3.0, -0.2, 0.0]).unwrap();
        s.adam_update(&g, 0.02);
        let p = s.patch.as_slice();
        assert!((p[0] - 0.48).abs() < 1e-6);
        assert!((p[1] - 0.52).abs() < 1e-6);
        assert_eq!(p[2], 0.5);
    }

    #[test]
    fn shuffles_are_permutations_and_seeded() {
        let a = epoch_order(10, 3, 0);
        let mut sorted = a.clone();
        sorted.sort();
        assert_eq!(sorted, (0..10).collect::<Vec<_>>());
        assert_eq!(a, epoch_order(10, 3, 0));
        assert_ne!(a, epoch_order(10, 3, 1));
    }

    #[test]
    fn validation_names_fields() {
        let cfg = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(cfg.validate().unwrap_err().to_string().contains("train.epochs"));
    }
}

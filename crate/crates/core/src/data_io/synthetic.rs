use ndarray::{s, Array3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use serde::{Deserialize, Serialize};

use super::{DataError, Dataset, DatasetFormat, DatasetManifest, SceneRecord};
use crate::detector::ToyDetector;
use crate::geometry::BoundingBox;
use crate::raster::{SceneImage, CHANNELS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticConfig {
    pub count: usize,
    pub height: usize,
    pub width: usize,
    pub targets_per_image: usize,
    pub seed: u64,
    /// Background is `N(0.5, noise_std)` per value, clamped.
    pub noise_std: f64,
    /// Each target is planted as `0.5 + c * (tile - 0.5)` with `c` uniform in
    /// this range, so targets differ in how hard they are to suppress.
    pub contrast_range: (f64, f64),
}

impl Default for SyntheticConfig {
    fn default() -> Self {
        Self {
            count: 64,
            height: 128,
            width: 128,
            targets_per_image: 2,
            seed: 42,
            noise_std: 0.1,
            contrast_range: (0.6, 1.0),
        }
    }
}

const ATTEMPTS_PER_TARGET: usize = 200;

/// Noise scenes with the toy detector's person tile planted at random,
/// non-overlapping, stride-aligned positions. The planted squares are the
/// ground truth.
pub fn generate_synthetic(cfg: &SyntheticConfig, detector: &ToyDetector) -> Result<Dataset, DataError> {
    let t = detector.window();
    let stride = detector.stride();
    let tile = detector.person_tile();
    let noise = Normal::new(0.5, cfg.noise_std.max(0.0)).expect("finite std");
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);

    let mut records = Vec::with_capacity(cfg.count);
    for scene in 0..cfg.count {
        let mut pixels = Array3::from_shape_simple_fn((cfg.height, cfg.width, CHANNELS), || {
            rng.sample(noise).clamp(0.0, 1.0)
        });
        let mut boxes: Vec<BoundingBox> = Vec::with_capacity(cfg.targets_per_image);
        if cfg.targets_per_image > 0 && (cfg.height < t || cfg.width < t) {
            return Err(DataError::PlacementFailed {
                scene,
                targets: cfg.targets_per_image,
                attempts: 0,
            });
        }
        let attempts = ATTEMPTS_PER_TARGET * cfg.targets_per_image;
        let mut tried = 0;
        while boxes.len() < cfg.targets_per_image {
            if tried == attempts {
                return Err(DataError::PlacementFailed {
                    scene,
                    targets: cfg.targets_per_image,
                    attempts,
                });
            }
            tried += 1;
            let r = rng.random_range(0..=(cfg.height - t) / stride) * stride;
            let c = rng.random_range(0..=(cfg.width - t) / stride) * stride;
            let b = BoundingBox::new(c as f64, r as f64, (c + t) as f64, (r + t) as f64);
            if boxes.iter().any(|o| overlaps(o, &b)) {
                continue;
            }
            let (lo, hi) = cfg.contrast_range;
            let k = if hi > lo { rng.random_range(lo..=hi) } else { lo };
            pixels
                .slice_mut(s![r..r + t, c..c + t, ..])
                .assign(&tile.mapv(|v| 0.5 + k * (v - 0.5)));
            boxes.push(b);
        }
        records.push(SceneRecord {
            id: format!("synthetic-{scene:05}"),
            image: SceneImage::from_clamped(pixels),
            person_boxes: boxes,
        });
    }
    Ok(Dataset {
        manifest: DatasetManifest {
            root: std::path::PathBuf::new(),
            format: DatasetFormat::Synthetic,
            class_filter: crate::losses::PERSON_LABEL.to_string(),
            record_count: records.len(),
        },
        records,
        dropped_boxes: 0,
    })
}

fn overlaps(a: &BoundingBox, b: &BoundingBox) -> bool {
    a.x1 < b.x2 && b.x1 < a.x2 && a.y1 < b.y2 && b.y1 < a.y2
}

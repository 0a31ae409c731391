//! Physical-robustness augmentation: `clip(alpha * transform(x) + eta, 0, 1)`.

use ndarray::Array3;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::{bilinear_taps, sample_taps, SceneImage, Tap, CHANNELS};
use crate::warp::Homography;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentConfig {
    /// Half-width of the brightness interval around 1.
    pub brightness: f64,
    /// Standard deviation of the additive Gaussian noise.
    pub noise_std: f64,
    /// Rotation is drawn from `[-rotation_range, rotation_range]` radians.
    pub rotation_range: f64,
    pub scale_range: (f64, f64),
    /// Keystone coefficients are drawn from `[-perspective, perspective]`.
    pub perspective: f64,
    /// Fresh draws per image per optimization step.
    pub draws_per_step: usize,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            brightness: 0.2,
            noise_std: 0.02,
            rotation_range: 10f64.to_radians(),
            scale_range: (0.9, 1.1),
            perspective: 0.05,
            draws_per_step: 1,
        }
    }
}

impl AugmentConfig {
    /// No photometric or geometric change at all.
    pub fn identity() -> Self {
        Self {
            brightness: 0.0,
            noise_std: 0.0,
            rotation_range: 0.0,
            scale_range: (1.0, 1.0),
            perspective: 0.0,
            draws_per_step: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::InvalidConfig(format!("augment.{m}")));
        if !(0.0..1.0).contains(&self.brightness) {
            return bad("brightness must be in [0, 1)");
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return bad("noise_std must be >= 0");
        }
        let (lo, hi) = self.scale_range;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return bad("scale_range must satisfy 0 < min <= max");
        }
        if !(self.rotation_range.is_finite() && self.perspective.is_finite()) {
            return bad("rotation_range and perspective must be finite");
        }
        if self.draws_per_step == 0 {
            return bad("draws_per_step must be >= 1");
        }
        Ok(())
    }
}

/// One realization of the augmentation distribution for an image size.
#[derive(Debug, Clone)]
pub struct AugmentDraw {
    pub brightness: f64,
    /// `(H, W, 3)` additive noise.
    pub noise: Array3<f64>,
    /// Maps source pixel coordinates to output pixel coordinates.
    pub transform: Homography,
}

impl AugmentDraw {
    pub fn identity(height: usize, width: usize) -> Self {
        Self {
            brightness: 1.0,
            noise: Array3::zeros((height, width, CHANNELS)),
            transform: Homography::identity(),
        }
    }

    /// Axis-aligned bounds of a box after the geometric transform, clipped to
    /// the frame.
    pub fn transform_box(&self, b: &BoundingBox) -> BoundingBox {
        let (h, w) = (self.noise.dim().0 as f64, self.noise.dim().1 as f64);
        match self.transform.map_rect_bounds(b.x1, b.y1, b.x2, b.y2) {
            Some((x1, y1, x2, y2)) => BoundingBox::new(x1, y1, x2, y2).clip(w, h),
            None => *b,
        }
    }
}

/// Geometric transform about the image center.
fn geometric(height: usize, width: usize, rotation: f64, scale: f64, px: f64, py: f64) -> Homography {
    let (cx, cy) = (width as f64 / 2.0, height as f64 / 2.0);
    // Keystone coefficients act on center-relative coordinates normalized by
    // the image size.
    let normalize = Homography::scaling(1.0 / width as f64, 1.0 / height as f64);
    let denormalize = Homography::scaling(width as f64, height as f64);
    Homography::translation(cx, cy)
        .after(&Homography::rotation(rotation))
        .after(&Homography::scaling(scale, scale))
        .after(&denormalize)
        .after(&Homography::perspective(px, py))
        .after(&normalize)
        .after(&Homography::translation(-cx, -cy))
}

pub fn sample_augmentation<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R, height: usize, width: usize) -> AugmentDraw {
    let sym = |rng: &mut R, r: f64| r * (2.0 * rng.random::<f64>() - 1.0);
    let brightness = 1.0 + sym(rng, cfg.brightness);
    let rotation = sym(rng, cfg.rotation_range);
    let (lo, hi) = cfg.scale_range;
    let scale = lo + (hi - lo) * rng.random::<f64>();
    let px = sym(rng, cfg.perspective);
    let py = sym(rng, cfg.perspective);
    let noise = if cfg.noise_std > 0.0 {
        let normal = Normal::new(0.0, cfg.noise_std).expect("validated std");
        Array3::from_shape_simple_fn((height, width, CHANNELS), || normal.sample(rng))
    } else {
        Array3::zeros((height, width, CHANNELS))
    };
    let transform = if rotation == 0.0 && scale == 1.0 && px == 0.0 && py == 0.0 {
        Homography::identity()
    } else {
        geometric(height, width, rotation, scale, px, py)
    };
    AugmentDraw {
        brightness,
        noise,
        transform,
    }
}

/// What [`augment_with_tape`] needs to pull gradients back.
#[derive(Debug, Clone)]
pub struct AugmentTape {
    height: usize,
    width: usize,
    brightness: f64,
    taps: Option<Vec<[Tap; 4]>>,
    /// Per pixel-channel: output strictly inside `(0, 1)` before clamping.
    active: Vec<bool>,
}

impl AugmentTape {
    /// Gradient with respect to the input image given the output gradient.
    pub fn backward(&self, grad_out: &Array3<f64>) -> Array3<f64> {
        let mut grad = Array3::zeros((self.height, self.width, CHANNELS));
        let g = grad.as_slice_mut().expect("standard layout");
        let go = grad_out.as_slice().expect("standard layout");
        for pix in 0..self.height * self.width {
            for ch in 0..CHANNELS {
                let k = pix * CHANNELS + ch;
                if !self.active[k] || go[k] == 0.0 {
                    continue;
                }
                let up = self.brightness * go[k];
                match &self.taps {
                    Some(taps) => {
                        for &(i, w) in &taps[pix] {
                            g[i as usize * CHANNELS + ch] += w * up;
                        }
                    }
                    None => g[k] += up,
                }
            }
        }
        grad
    }
}

pub fn augment(image: &SceneImage, draw: &AugmentDraw) -> SceneImage {
    augment_with_tape(image, draw).0
}

/// Applies the draw and keeps the resampling coefficients for backward.
pub fn augment_with_tape(image: &SceneImage, draw: &AugmentDraw) -> (SceneImage, AugmentTape) {
    let (h, w) = (image.height(), image.width());
    assert_eq!(draw.noise.dim(), (h, w, CHANNELS), "draw sampled for a different image size");
    let src = image.as_slice();
    let noise = draw.noise.as_slice().expect("standard layout");
    let taps = if draw.transform.is_identity() {
        None
    } else {
        let inv = draw.transform.inverse().expect("augmentation transform is invertible");
        let mut taps = Vec::with_capacity(h * w);
        for r in 0..h {
            for c in 0..w {
                let (x, y) = inv
                    .apply(c as f64 + 0.5, r as f64 + 0.5)
                    .unwrap_or((c as f64 + 0.5, r as f64 + 0.5));
                taps.push(bilinear_taps(x, y, w, h));
            }
        }
        Some(taps)
    };
    let mut out = Array3::zeros((h, w, CHANNELS));
    let o = out.as_slice_mut().expect("standard layout");
    let mut active = vec![false; h * w * CHANNELS];
    for pix in 0..h * w {
        for ch in 0..CHANNELS {
            let k = pix * CHANNELS + ch;
            let v = match &taps {
                Some(t) => sample_taps(src, &t[pix], ch),
                None => src[k],
            };
            let y = draw.brightness * v + noise[k];
            active[k] = y > 0.0 && y < 1.0;
            o[k] = y.clamp(0.0, 1.0);
        }
    }
    (
        SceneImage::from_clamped(out),
        AugmentTape {
            height: h,
            width: w,
            brightness: draw.brightness,
            taps,
            active,
        },
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_image(h: usize, w: usize, seed: u64) -> SceneImage {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        SceneImage::from_clamped(Array3::from_shape_simple_fn((h, w, 3), || rng.random::<f64>()))
    }

    #[test]
    fn degenerate_ranges_give_degenerate_draws() {
        let cfg = AugmentConfig {
            brightness: 0.0,
            noise_std: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let d = sample_augmentation(&cfg, &mut rng, 4, 5);
            assert_eq!(d.brightness, 1.0);
            assert!(d.noise.iter().all(|&v| v == 0.0));
        }
    }

    #[test]
    fn draws_are_deterministic() {
        let cfg = AugmentConfig::default();
        let a = sample_augmentation(&cfg, &mut ChaCha8Rng::seed_from_u64(9), 6, 6);
        let b = sample_augmentation(&cfg, &mut ChaCha8Rng::seed_from_u64(9), 6, 6);
        assert_eq!(a.brightness, b.brightness);
        assert_eq!(a.noise, b.noise);
        assert_eq!(a.transform, b.transform);
    }

    #[test]
    fn identity_is_bit_exact() {
        let img = random_image(7, 9, 3);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let d = sample_augmentation(&AugmentConfig::identity(), &mut rng, 7, 9);
        assert!(d.transform.is_identity());
        assert_eq!(augment(&img, &d), img);
    }

    #[test]
    fn brightness_and_noise_clamp() {
        let img = SceneImage::filled(4, 4, 0.6);
        let mut d = AugmentDraw::identity(4, 4);
        d.brightness = 2.0;
        assert!(augment(&img, &d).as_slice().iter().all(|&v| v == 1.0));

        let mut d = AugmentDraw::identity(4, 4);
        d.noise.fill(-1.0);
        assert!(augment(&img, &d).as_slice().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn output_stays_in_unit_range() {
        let cfg = AugmentConfig {
            brightness: 0.9,
            noise_std: 0.5,
            ..AugmentConfig::default()
        };
        let img = random_image(10, 10, 4);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10 {
            let d = sample_augmentation(&cfg, &mut rng, 10, 10);
            assert!(augment(&img, &d).as_slice().iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn brightness_mean_concentrates() {
        let cfg = AugmentConfig {
            noise_std: 0.0,
            ..AugmentConfig::default()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 10_000;
        let mean = (0..n)
            .map(|_| sample_augmentation(&cfg, &mut rng, 1, 1).brightness)
            .sum::<f64>()
            / n as f64;
        assert!((mean - 1.0).abs() <= cfg.brightness / 50.0, "mean {mean}");
    }

    #[test]
    fn rotation_moves_content_about_center() {
        let mut arr = Array3::zeros((21, 21, 3));
        arr[[10, 15, 0]] = 1.0;
        let img = SceneImage::new(arr).unwrap();
        let draw = AugmentDraw {
            brightness: 1.0,
            noise: Array3::zeros((21, 21, 3)),
            transform: geometric(21, 21, std::f64::consts::FRAC_PI_2, 1.0, 0.0, 0.0),
        };
        let out = augment(&img, &draw);
        // (15.5, 10.5) rotates by +90 degrees (y down) about (10.5, 10.5) to (10.5, 15.5).
        assert!((out.pixels()[[15, 10, 0]] - 1.0).abs() < 1e-9);
        let b = draw.transform_box(&BoundingBox::new(15.0, 10.0, 16.0, 11.0));
        assert!((b.x1 - 10.0).abs() < 1e-9 && (b.y1 - 15.0).abs() < 1e-9);
    }
}

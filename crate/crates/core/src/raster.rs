//! RGB float rasters in `(height, width, 3)` layout with values in `[0, 1]`.

use ndarray::{Array3, ArrayView3};

use crate::error::{Error, Result};

pub const CHANNELS: usize = 3;

fn check_unit_range(pixels: &Array3<f64>, what: &'static str) -> Result<()> {
    let (h, w, c) = pixels.dim();
    if h == 0 || w == 0 || c != CHANNELS {
        return Err(Error::InvalidShape {
            what,
            shape: vec![h, w, c],
        });
    }
    if let Some(v) = pixels.iter().find(|v| !(0.0..=1.0).contains(*v)) {
        return Err(Error::OutOfRange { what, value: *v });
    }
    Ok(())
}

macro_rules! raster_type {
    ($name:ident, $what:literal) => {
        #[derive(Debug, Clone, PartialEq)]
        pub struct $name {
            pixels: Array3<f64>,
        }

        impl $name {
            /// Wraps an `(H, W, 3)` array, rejecting values outside `[0, 1]`.
            pub fn new(pixels: Array3<f64>) -> Result<Self> {
                check_unit_range(&pixels, $what)?;
                Ok(Self { pixels })
            }

            /// Clamps every value into `[0, 1]` instead of rejecting.
            pub fn from_clamped(mut pixels: Array3<f64>) -> Self {
                pixels.mapv_inplace(|v| v.clamp(0.0, 1.0));
                Self { pixels }
            }

            pub fn filled(height: usize, width: usize, value: f64) -> Self {
                Self::from_clamped(Array3::from_elem((height, width, CHANNELS), value))
            }

            pub fn height(&self) -> usize {
                self.pixels.dim().0
            }

            pub fn width(&self) -> usize {
                self.pixels.dim().1
            }

            pub fn pixels(&self) -> ArrayView3<'_, f64> {
                self.pixels.view()
            }

            pub fn as_array(&self) -> &Array3<f64> {
                &self.pixels
            }

            pub fn into_array(self) -> Array3<f64> {
                self.pixels
            }

            /// Row-major `(H, W, 3)` contiguous data.
            pub fn as_slice(&self) -> &[f64] {
                self.pixels
                    .as_slice()
                    .expect("raster storage is always standard layout")
            }
        }
    };
}

raster_type!(SceneImage, "scene image");
raster_type!(Patch, "patch");

impl Patch {
    /// Rounds every value to the nearest `f32`, the precision of the patch
    /// sidecar format.
    pub fn quantize_f32(&mut self) {
        self.pixels.mapv_inplace(|v| v as f32 as f64);
    }
}

/// One bilinear sample tap: flat pixel index and weight.
pub type Tap = (u32, f64);

/// Bilinear taps at continuous position `(x, y)`, where pixel `(r, c)` has its
/// center at `(c + 0.5, r + 0.5)`. Out-of-range neighbours clamp to the edge.
pub fn bilinear_taps(x: f64, y: f64, width: usize, height: usize) -> [Tap; 4] {
    let fx = x - 0.5;
    let fy = y - 0.5;
    let x0 = fx.floor();
    let y0 = fy.floor();
    let tx = fx - x0;
    let ty = fy - y0;
    let clamp = |v: f64, n: usize| -> usize { (v.max(0.0) as usize).min(n - 1) };
    let c0 = clamp(x0, width);
    let c1 = clamp(x0 + 1.0, width);
    let r0 = clamp(y0, height);
    let r1 = clamp(y0 + 1.0, height);
    let idx = |r: usize, c: usize| (r * width + c) as u32;
    [
        (idx(r0, c0), (1.0 - tx) * (1.0 - ty)),
        (idx(r0, c1), tx * (1.0 - ty)),
        (idx(r1, c0), (1.0 - tx) * ty),
        (idx(r1, c1), tx * ty),
    ]
}

/// Weighted sum of one channel over the taps.
#[inline]
pub fn sample_taps(data: &[f64], taps: &[Tap; 4], channel: usize) -> f64 {
    taps.iter()
        .map(|&(i, w)| w * data[i as usize * CHANNELS + channel])
        .sum()
}

/// Bilinear resize to `(height, width)`; pixel centers are aligned.
pub fn resize_bilinear(image: &SceneImage, height: usize, width: usize) -> SceneImage {
    if image.height() == height && image.width() == width {
        return image.clone();
    }
    let sx = image.width() as f64 / width as f64;
    let sy = image.height() as f64 / height as f64;
    let src = image.as_slice();
    let mut out = Array3::zeros((height, width, CHANNELS));
    for r in 0..height {
        for c in 0..width {
            let taps = bilinear_taps(
                (c as f64 + 0.5) * sx,
                (r as f64 + 0.5) * sy,
                image.width(),
                image.height(),
            );
            for ch in 0..CHANNELS {
                out[[r, c, ch]] = sample_taps(src, &taps, ch);
            }
        }
    }
    SceneImage::from_clamped(out)
}

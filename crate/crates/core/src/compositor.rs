//! Patch placement and compositing.
//!
//! A placement is a homography from the patch's normalized unit square
//! `[0, 1]^2` to image coordinates. Compositing inverse-warps every image
//! pixel center through it; pixels whose preimage lands inside the unit
//! square take the bilinearly resampled patch value, all others are left
//! untouched. For a fixed placement the output is linear in the patch values,
//! and [`CompositeMap`] records the coefficients so gradients can be pulled
//! back onto the patch.

use ndarray::Array3;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::raster::{bilinear_taps, Patch, SceneImage, Tap, CHANNELS};
use crate::warp::Homography;

/// Where and how the patch sits on a person box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlacementSpec {
    /// Patch width as a fraction of the person-box width.
    pub scale_fraction: f64,
    /// Patch center height below the box top, as a fraction of box height.
    pub vertical_anchor: f64,
    /// Radians.
    pub rotation: f64,
    /// Horizontal keystone strength in patch-normalized units.
    pub perspective: f64,
}

impl Default for PlacementSpec {
    fn default() -> Self {
        Self {
            scale_fraction: 0.3,
            vertical_anchor: 0.4,
            rotation: 0.0,
            perspective: 0.0,
        }
    }
}

impl PlacementSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.scale_fraction > 0.0 && self.scale_fraction <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "placement.scale_fraction must be in (0, 1], got {}",
                self.scale_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.vertical_anchor) {
            return Err(Error::InvalidConfig(format!(
                "placement.vertical_anchor must be in [0, 1], got {}",
                self.vertical_anchor
            )));
        }
        if !self.rotation.is_finite() || !self.perspective.is_finite() {
            return Err(Error::InvalidConfig("placement.rotation/perspective must be finite".into()));
        }
        Ok(())
    }
}

/// A drawn per-placement perturbation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PlacementJitter {
    pub rotation: f64,
    pub scale: f64,
    pub perspective: f64,
}

impl Default for PlacementJitter {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            scale: 1.0,
            perspective: 0.0,
        }
    }
}

/// Ranges that [`PlacementJitter`] draws come from. All-zero ranges disable jitter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct JitterRanges {
    pub rotation: f64,
    pub scale: (f64, f64),
    pub perspective: f64,
}

impl Default for JitterRanges {
    fn default() -> Self {
        Self {
            rotation: 0.0,
            scale: (1.0, 1.0),
            perspective: 0.0,
        }
    }
}

impl JitterRanges {
    pub fn is_disabled(&self) -> bool {
        self.rotation == 0.0 && self.scale == (1.0, 1.0) && self.perspective == 0.0
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> PlacementJitter {
        let sym = |rng: &mut R, r: f64| r * (2.0 * rng.random::<f64>() - 1.0);
        let rotation = sym(rng, self.rotation);
        let scale = self.scale.0 + (self.scale.1 - self.scale.0) * rng.random::<f64>();
        let perspective = sym(rng, self.perspective);
        PlacementJitter {
            rotation,
            scale,
            perspective,
        }
    }
}

/// Maps the patch unit square onto the person box.
///
/// `aspect` is the patch's height / width ratio, preserved by the placement.
pub fn compute_placement(
    gt_box: &BoundingBox,
    spec: &PlacementSpec,
    jitter: Option<&PlacementJitter>,
    aspect: f64,
) -> Result<Homography> {
    if !(gt_box.area() > 0.0) {
        return Err(Error::InvalidAnnotation(*gt_box));
    }
    let j = jitter.copied().unwrap_or_default();
    let width = spec.scale_fraction * gt_box.width() * j.scale;
    let height = width * aspect;
    let (cx, _) = gt_box.center();
    let cy = gt_box.y1 + spec.vertical_anchor * gt_box.height();

    Ok(Homography::translation(cx, cy)
        .after(&Homography::rotation(spec.rotation + j.rotation))
        .after(&Homography::scaling(width, height))
        .after(&Homography::perspective(spec.perspective + j.perspective, 0.0))
        .after(&Homography::translation(-0.5, -0.5)))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PlacementWarning {
    /// The warped patch covers no pixel of the image.
    OutsideFrame { placement: usize },
    /// The person box was degenerate and got skipped.
    DegenerateBox { placement: usize },
}

/// Sparse record of which image pixels take which patch taps.
///
/// Later stamps overwrite earlier ones pixel by pixel.
#[derive(Debug, Clone)]
pub struct CompositeMap {
    height: usize,
    width: usize,
    patch_height: usize,
    patch_width: usize,
    slot: Vec<u32>,
    entries: Vec<(u32, [Tap; 4])>,
}

const EMPTY: u32 = u32::MAX;

impl CompositeMap {
    pub fn new(height: usize, width: usize, patch_height: usize, patch_width: usize) -> Self {
        Self {
            height,
            width,
            patch_height,
            patch_width,
            slot: vec![EMPTY; height * width],
            entries: Vec::new(),
        }
    }

    pub fn for_image(image: &SceneImage, patch: &Patch) -> Self {
        Self::new(image.height(), image.width(), patch.height(), patch.width())
    }

    /// Writes one placement into the map; returns the number of pixels it covers.
    pub fn stamp(&mut self, transform: &Homography) -> usize {
        let Some(inv) = transform.inverse() else {
            return 0;
        };
        let (h, w) = (self.height as f64, self.width as f64);
        let (r0, r1, c0, c1) = match transform.map_rect_bounds(0.0, 0.0, 1.0, 1.0) {
            Some((x1, y1, x2, y2)) => {
                if x2 < 0.0 || y2 < 0.0 || x1 > w || y1 > h {
                    return 0;
                }
                (
                    (y1 - 1.0).floor().max(0.0) as usize,
                    ((y2 + 1.0).ceil().min(h)) as usize,
                    (x1 - 1.0).floor().max(0.0) as usize,
                    ((x2 + 1.0).ceil().min(w)) as usize,
                )
            }
            None => (0, self.height, 0, self.width),
        };
        let (pw, ph) = (self.patch_width as f64, self.patch_height as f64);
        let mut covered = 0;
        for r in r0..r1 {
            for c in c0..c1 {
                let Some((u, v)) = inv.apply(c as f64 + 0.5, r as f64 + 0.5) else {
                    continue;
                };
                if !((0.0..1.0).contains(&u) && (0.0..1.0).contains(&v)) {
                    continue;
                }
                let taps = bilinear_taps(u * pw, v * ph, self.patch_width, self.patch_height);
                let pix = r * self.width + c;
                match self.slot[pix] {
                    EMPTY => {
                        self.slot[pix] = self.entries.len() as u32;
                        self.entries.push((pix as u32, taps));
                    }
                    s => self.entries[s as usize].1 = taps,
                }
                covered += 1;
            }
        }
        covered
    }

    pub fn is_covered(&self, row: usize, col: usize) -> bool {
        self.slot[row * self.width + col] != EMPTY
    }

    pub fn covered_count(&self) -> usize {
        self.entries.len()
    }

    /// Composites `patch` onto `image` according to the map.
    pub fn render(&self, image: &SceneImage, patch: &Patch) -> SceneImage {
        assert_eq!((image.height(), image.width()), (self.height, self.width));
        assert_eq!((patch.height(), patch.width()), (self.patch_height, self.patch_width));
        let mut out = image.as_array().clone();
        let data = out.as_slice_mut().expect("standard layout");
        let src = patch.as_slice();
        for (pix, taps) in &self.entries {
            let base = *pix as usize * CHANNELS;
            for ch in 0..CHANNELS {
                let v: f64 = taps
                    .iter()
                    .map(|&(i, w)| w * src[i as usize * CHANNELS + ch])
                    .sum();
                data[base + ch] = v.clamp(0.0, 1.0);
            }
        }
        SceneImage::from_clamped(out)
    }

    /// Pulls an image-space gradient back onto the patch.
    pub fn backward(&self, grad_image: &Array3<f64>) -> Array3<f64> {
        let mut grad = Array3::zeros((self.patch_height, self.patch_width, CHANNELS));
        let g = grad.as_slice_mut().expect("standard layout");
        let gi = grad_image.as_slice().expect("standard layout");
        for (pix, taps) in &self.entries {
            let base = *pix as usize * CHANNELS;
            for ch in 0..CHANNELS {
                let up = gi[base + ch];
                if up == 0.0 {
                    continue;
                }
                for &(i, w) in taps {
                    g[i as usize * CHANNELS + ch] += w * up;
                }
            }
        }
        grad
    }
}

/// Result of compositing: the new image plus any placement warnings.
#[derive(Debug, Clone)]
pub struct Composite {
    pub image: SceneImage,
    pub map: CompositeMap,
    pub warnings: Vec<PlacementWarning>,
}

/// `x ⊕ p` for a single placement.
pub fn apply_patch(image: &SceneImage, patch: &Patch, transform: &Homography) -> Composite {
    let mut map = CompositeMap::for_image(image, patch);
    let mut warnings = Vec::new();
    if map.stamp(transform) == 0 {
        log::warn!("patch placement falls entirely outside the image");
        warnings.push(PlacementWarning::OutsideFrame { placement: 0 });
    }
    Composite {
        image: map.render(image, patch),
        map,
        warnings,
    }
}

/// Builds the composite map for one patch per person box, in annotation order.
pub fn placement_map(
    image: &SceneImage,
    patch: &Patch,
    boxes: &[BoundingBox],
    spec: &PlacementSpec,
    jitter: &[PlacementJitter],
) -> (CompositeMap, Vec<PlacementWarning>) {
    let mut map = CompositeMap::for_image(image, patch);
    let mut warnings = Vec::new();
    let aspect = patch.height() as f64 / patch.width() as f64;
    for (k, b) in boxes.iter().enumerate() {
        match compute_placement(b, spec, jitter.get(k), aspect) {
            Ok(t) => {
                if map.stamp(&t) == 0 {
                    warnings.push(PlacementWarning::OutsideFrame { placement: k });
                }
            }
            Err(_) => warnings.push(PlacementWarning::DegenerateBox { placement: k }),
        }
    }
    (map, warnings)
}

/// Applies the patch once per person box; later boxes overwrite earlier ones.
pub fn apply_to_all_persons(
    image: &SceneImage,
    patch: &Patch,
    boxes: &[BoundingBox],
    spec: &PlacementSpec,
) -> Composite {
    let (map, warnings) = placement_map(image, patch, boxes, spec, &[]);
    Composite {
        image: map.render(image, patch),
        map,
        warnings,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_patch(h: usize, w: usize, seed: u64) -> Patch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Patch::from_clamped(Array3::from_shape_fn((h, w, 3), |_| rng.random::<f64>()))
    }

    fn gray(h: usize, w: usize) -> SceneImage {
        SceneImage::filled(h, w, 0.5)
    }

    /// Places the unit square as an axis-aligned `w x h` rectangle at `(x, y)`.
    fn axis_aligned(x: f64, y: f64, w: f64, h: f64) -> Homography {
        Homography::translation(x, y).after(&Homography::scaling(w, h))
    }

    // Per-pixel inverse warp with explicit bilinear interpolation, written
    // without the shared tap helper.
    fn oracle_pixel(patch: &Patch, inv: &Homography, r: usize, c: usize, ch: usize) -> Option<f64> {
        let (u, v) = inv.apply(c as f64 + 0.5, r as f64 + 0.5)?;
        if !(0.0..1.0).contains(&u) || !(0.0..1.0).contains(&v) {
            return None;
        }
        let px = u * patch.width() as f64 - 0.5;
        let py = v * patch.height() as f64 - 0.5;
        let fetch = |rr: f64, cc: f64| {
            let rr = rr.clamp(0.0, (patch.height() - 1) as f64) as usize;
            let cc = cc.clamp(0.0, (patch.width() - 1) as f64) as usize;
            patch.pixels()[[rr, cc, ch]]
        };
        let (x0, y0) = (px.floor(), py.floor());
        let (ax, ay) = (px - x0, py - y0);
        let top = fetch(y0, x0) * (1.0 - ax) + fetch(y0, x0 + 1.0) * ax;
        let bottom = fetch(y0 + 1.0, x0) * (1.0 - ax) + fetch(y0 + 1.0, x0 + 1.0) * ax;
        Some(top * (1.0 - ay) + bottom * ay)
    }

    #[test]
    fn placement_examples() {
        let b = BoundingBox::new(0.0, 0.0, 100.0, 200.0);
        let spec = PlacementSpec {
            scale_fraction: 0.5,
            vertical_anchor: 0.4,
            ..Default::default()
        };
        let t = compute_placement(&b, &spec, None, 1.0).unwrap();
        let (x1, y1, x2, y2) = t.map_rect_bounds(0.0, 0.0, 1.0, 1.0).unwrap();
        assert!((x1 - 25.0).abs() < 1e-12 && (x2 - 75.0).abs() < 1e-12);
        assert!((y1 - 55.0).abs() < 1e-12 && (y2 - 105.0).abs() < 1e-12);

        let spec = PlacementSpec {
            scale_fraction: 1.0,
            vertical_anchor: 0.5,
            ..Default::default()
        };
        let t = compute_placement(&b, &spec, None, 1.0).unwrap();
        let (x1, y1, x2, y2) = t.map_rect_bounds(0.0, 0.0, 1.0, 1.0).unwrap();
        assert_eq!((x1, x2), (0.0, 100.0));
        assert_eq!((y1, y2), (50.0, 150.0));
    }

    #[test]
    fn rotation_by_pi_flips_about_center() {
        let b = BoundingBox::new(10.0, 20.0, 70.0, 140.0);
        let base = PlacementSpec::default();
        let flipped = PlacementSpec {
            rotation: std::f64::consts::PI,
            ..base
        };
        let t0 = compute_placement(&b, &base, None, 1.0).unwrap();
        let tpi = compute_placement(&b, &flipped, None, 1.0).unwrap();
        let about_center = Homography::translation(0.5, 0.5)
            .after(&Homography::rotation(std::f64::consts::PI))
            .after(&Homography::translation(-0.5, -0.5));
        let composed = t0.after(&about_center);
        for (u, v) in [(0.0, 0.0), (1.0, 0.3), (0.2, 0.9), (0.5, 0.5)] {
            let a = tpi.apply(u, v).unwrap();
            let c = composed.apply(u, v).unwrap();
            assert!((a.0 - c.0).abs() < 1e-9 && (a.1 - c.1).abs() < 1e-9);
        }
    }

    #[test]
    fn zero_area_box_is_rejected() {
        let b = BoundingBox::new(5.0, 5.0, 5.0, 9.0);
        assert!(matches!(
            compute_placement(&b, &PlacementSpec::default(), None, 1.0),
            Err(Error::InvalidAnnotation(_))
        ));
    }

    #[test]
    fn identity_warp_replaces_region_exactly() {
        let img = gray(8, 8);
        let patch = random_patch(2, 2, 1);
        let out = apply_patch(&img, &patch, &axis_aligned(3.0, 2.0, 2.0, 2.0));
        assert!(out.warnings.is_empty());
        let mut untouched = 0;
        for r in 0..8 {
            for c in 0..8 {
                for ch in 0..3 {
                    let v = out.image.pixels()[[r, c, ch]];
                    if (2..4).contains(&r) && (3..5).contains(&c) {
                        assert_eq!(v, patch.pixels()[[r - 2, c - 3, ch]]);
                    } else {
                        assert_eq!(v.to_bits(), 0.5f64.to_bits());
                    }
                }
                untouched += (!out.map.is_covered(r, c)) as usize;
            }
        }
        assert_eq!(untouched, 60);

        let zeros = Patch::filled(2, 2, 0.0);
        let out = apply_patch(&img, &zeros, &axis_aligned(3.0, 2.0, 2.0, 2.0));
        for r in 2..4 {
            for c in 3..5 {
                assert_eq!(out.image.pixels()[[r, c, 0]], 0.0);
            }
        }
    }

    #[test]
    fn half_pixel_offset_matches_oracle() {
        let img = gray(12, 12);
        let patch = random_patch(4, 4, 2);
        let t = axis_aligned(3.5, 4.5, 4.0, 4.0);
        let inv = t.inverse().unwrap();
        let out = apply_patch(&img, &patch, &t);
        let mut covered = 0;
        for r in 0..12 {
            for c in 0..12 {
                for ch in 0..3 {
                    let got = out.image.pixels()[[r, c, ch]];
                    match oracle_pixel(&patch, &inv, r, c, ch) {
                        Some(want) => {
                            assert!((got - want).abs() < 1e-6);
                            covered += 1;
                        }
                        None => assert_eq!(got, 0.5),
                    }
                }
            }
        }
        assert_eq!(covered, 16 * 3);
    }

    #[test]
    fn rotated_perspective_matches_oracle() {
        let img = gray(40, 40);
        let patch = random_patch(6, 5, 3);
        let b = BoundingBox::new(5.0, 4.0, 35.0, 38.0);
        let spec = PlacementSpec {
            scale_fraction: 0.6,
            vertical_anchor: 0.45,
            rotation: 0.4,
            perspective: 0.2,
        };
        let t = compute_placement(&b, &spec, None, 6.0 / 5.0).unwrap();
        let inv = t.inverse().unwrap();
        let out = apply_patch(&img, &patch, &t);
        for r in 0..40 {
            for c in 0..40 {
                let got = out.image.pixels()[[r, c, 1]];
                match oracle_pixel(&patch, &inv, r, c, 1) {
                    Some(want) => assert!((got - want).abs() < 1e-9),
                    None => assert_eq!(got, 0.5),
                }
            }
        }
    }

    #[test]
    fn outside_frame_warns_and_leaves_image() {
        let img = gray(8, 8);
        let patch = random_patch(2, 2, 4);
        let out = apply_patch(&img, &patch, &axis_aligned(20.0, 20.0, 2.0, 2.0));
        assert_eq!(out.image, img);
        assert_eq!(out.warnings, vec![PlacementWarning::OutsideFrame { placement: 0 }]);
    }

    #[test]
    fn partially_outside_is_clipped() {
        let img = gray(8, 8);
        let patch = random_patch(4, 4, 5);
        let out = apply_patch(&img, &patch, &axis_aligned(6.0, 6.0, 4.0, 4.0));
        assert_eq!(out.map.covered_count(), 4);
        assert_eq!(out.image.pixels()[[7, 7, 0]], patch.pixels()[[1, 1, 0]]);
    }

    #[test]
    fn all_persons_reductions() {
        let img = gray(64, 64);
        let patch = random_patch(8, 8, 6);
        let spec = PlacementSpec::default();
        assert_eq!(apply_to_all_persons(&img, &patch, &[], &spec).image, img);

        let b1 = BoundingBox::new(2.0, 2.0, 22.0, 40.0);
        let b2 = BoundingBox::new(35.0, 10.0, 60.0, 60.0);
        let single = |b: &BoundingBox| {
            let t = compute_placement(b, &spec, None, 1.0).unwrap();
            apply_patch(&img, &patch, &t).image
        };
        assert_eq!(apply_to_all_persons(&img, &patch, &[b1], &spec).image, single(&b1));

        let both = apply_to_all_persons(&img, &patch, &[b1, b2], &spec).image;
        let (s1, s2) = (single(&b1), single(&b2));
        for r in 0..64 {
            for c in 0..64 {
                for ch in 0..3 {
                    let v = both.pixels()[[r, c, ch]];
                    let a = s1.pixels()[[r, c, ch]];
                    let b = s2.pixels()[[r, c, ch]];
                    let want = if c < 30 { a } else { b };
                    assert_eq!(v, want);
                }
            }
        }
    }

    #[test]
    fn later_boxes_overwrite_earlier() {
        let img = gray(32, 32);
        let p = Patch::filled(4, 4, 0.0);
        let spec = PlacementSpec {
            scale_fraction: 0.5,
            ..Default::default()
        };
        let b1 = BoundingBox::new(4.0, 4.0, 20.0, 20.0);
        let b2 = BoundingBox::new(6.0, 4.0, 22.0, 20.0);
        let (map, _) = placement_map(&img, &p, &[b1, b2], &spec, &[]);
        let last = compute_placement(&b2, &spec, None, 1.0).unwrap();
        let mut only_last = CompositeMap::for_image(&img, &p);
        only_last.stamp(&last);
        // Every pixel of the second placement is owned by it.
        for r in 0..32 {
            for c in 0..32 {
                if only_last.is_covered(r, c) {
                    assert!(map.is_covered(r, c));
                }
            }
        }
        let p2 = random_patch(4, 4, 9);
        let a = map.render(&img, &p2);
        let b = only_last.render(&img, &p2);
        for r in 0..32 {
            for c in 0..32 {
                if only_last.is_covered(r, c) {
                    assert_eq!(a.pixels()[[r, c, 2]], b.pixels()[[r, c, 2]]);
                }
            }
        }
    }

    #[test]
    fn linear_in_patch_values() {
        let img = gray(30, 30);
        let p1 = random_patch(5, 5, 10);
        let p2 = random_patch(5, 5, 11);
        let alpha = 0.3;
        let mix = Patch::from_clamped(p1.as_array() * alpha + p2.as_array() * (1.0 - alpha));
        let t = compute_placement(
            &BoundingBox::new(3.0, 3.0, 27.0, 29.0),
            &PlacementSpec {
                rotation: 0.2,
                perspective: 0.1,
                ..Default::default()
            },
            None,
            1.0,
        )
        .unwrap();
        let a = apply_patch(&img, &p1, &t);
        let b = apply_patch(&img, &p2, &t);
        let m = apply_patch(&img, &mix, &t);
        for r in 0..30 {
            for c in 0..30 {
                if a.map.is_covered(r, c) {
                    for ch in 0..3 {
                        let want = alpha * a.image.pixels()[[r, c, ch]]
                            + (1.0 - alpha) * b.image.pixels()[[r, c, ch]];
                        assert!((m.image.pixels()[[r, c, ch]] - want).abs() < 1e-6);
                    }
                }
            }
        }
    }
}

//! Planar projective transforms.

use nalgebra::Matrix3;

/// A 3x3 homography acting on `(x, y, 1)` column vectors.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Homography(pub Matrix3<f64>);

impl Homography {
    pub fn identity() -> Self {
        Self(Matrix3::identity())
    }

    pub fn translation(dx: f64, dy: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, dx, 0.0, 1.0, dy, 0.0, 0.0, 1.0))
    }

    pub fn scaling(sx: f64, sy: f64) -> Self {
        Self(Matrix3::new(sx, 0.0, 0.0, 0.0, sy, 0.0, 0.0, 0.0, 1.0))
    }

    /// Counter-clockwise in a y-up frame; clockwise on screen (y down).
    pub fn rotation(theta: f64) -> Self {
        let (s, c) = theta.sin_cos();
        Self(Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0))
    }

    /// Keystone distortion `(x, y) -> (x, y) / (1 + px * x + py * y)`.
    pub fn perspective(px: f64, py: f64) -> Self {
        Self(Matrix3::new(1.0, 0.0, 0.0, 0.0, 1.0, 0.0, px, py, 1.0))
    }

    /// `self` applied after `first`.
    pub fn after(&self, first: &Homography) -> Self {
        Self(self.0 * first.0)
    }

    pub fn inverse(&self) -> Option<Self> {
        self.0.try_inverse().map(Self)
    }

    pub fn is_identity(&self) -> bool {
        self.0 == Matrix3::identity()
    }

    /// Maps a point; `None` when it lands on or behind the horizon line.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[(2, 0)] * x + m[(2, 1)] * y + m[(2, 2)];
        if w <= 0.0 || !w.is_finite() {
            return None;
        }
        let u = (m[(0, 0)] * x + m[(0, 1)] * y + m[(0, 2)]) / w;
        let v = (m[(1, 0)] * x + m[(1, 1)] * y + m[(1, 2)]) / w;
        Some((u, v))
    }

    /// Axis-aligned bounds of the image of a rectangle's corners.
    pub fn map_rect_bounds(&self, x1: f64, y1: f64, x2: f64, y2: f64) -> Option<(f64, f64, f64, f64)> {
        let corners = [(x1, y1), (x2, y1), (x1, y2), (x2, y2)];
        let mut b = (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for (x, y) in corners {
            let (u, v) = self.apply(x, y)?;
            b.0 = b.0.min(u);
            b.1 = b.1.min(v);
            b.2 = b.2.max(u);
            b.3 = b.3.max(v);
        }
        Some(b)
    }
}

impl Default for Homography {
    fn default() -> Self {
        Self::identity()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn compose_and_invert() {
        let h = Homography::translation(3.0, -2.0)
            .after(&Homography::rotation(0.3))
            .after(&Homography::scaling(2.0, 0.5))
            .after(&Homography::perspective(0.01, -0.02));
        let inv = h.inverse().unwrap();
        let (u, v) = h.apply(1.5, 2.5).unwrap();
        let (x, y) = inv.apply(u, v).unwrap();
        assert!((x - 1.5).abs() < 1e-12 && (y - 2.5).abs() < 1e-12);
    }

    #[test]
    fn horizon_is_rejected() {
        let h = Homography::perspective(-1.0, 0.0);
        assert!(h.apply(1.0, 0.0).is_none());
        assert!(h.apply(0.5, 0.0).is_some());
    }
}

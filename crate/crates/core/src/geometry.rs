//! Axis-aligned boxes and overlap measures.
//!
//! Boxes are in corner format `(x1, y1, x2, y2)` over continuous pixel
//! coordinates. Area is `max(0, x2 - x1) * max(0, y2 - y1)`, so a collapsed
//! box has zero area and zero overlap with everything.

use ndarray::Array2;
use serde::{Deserialize, Serialize};

/// Axis-aligned rectangle in image space.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoundingBox {
    pub const fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self { x1, y1, x2, y2 }
    }

    /// Builds a box from COCO-style `(x, y, w, h)`.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self::new(x, y, x + w, y + h)
    }

    pub fn from_array(c: [f64; 4]) -> Self {
        Self::new(c[0], c[1], c[2], c[3])
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Finite coordinates with `x1 <= x2` and `y1 <= y2`.
    pub fn is_valid(&self) -> bool {
        self.to_array().iter().all(|v| v.is_finite()) && self.x1 <= self.x2 && self.y1 <= self.y2
    }

    pub fn width(&self) -> f64 {
        (self.x2 - self.x1).max(0.0)
    }

    pub fn height(&self) -> f64 {
        (self.y2 - self.y1).max(0.0)
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    /// Clamps the corners into `[0, width] x [0, height]`.
    pub fn clip(&self, width: f64, height: f64) -> Self {
        clip_box(self, width, height)
    }
}

/// A single detector output: box, class label and confidence in `[0, 1]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub label: String,
    #[serde(rename = "score")]
    pub confidence: f64,
}

impl Detection {
    pub fn new(bbox: BoundingBox, label: impl Into<String>, confidence: f64) -> Self {
        Self {
            bbox,
            label: label.into(),
            confidence,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.bbox.is_valid() && (0.0..=1.0).contains(&self.confidence)
    }
}

/// Intersection over union. Zero when either the intersection or the union
/// is empty.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

/// IoU together with its partial derivatives with respect to the corners of
/// `a` and of `b`.
///
/// The derivative is one-sided at overlap boundaries; where the intersection
/// is empty both gradients are zero.
pub fn iou_with_grad(a: &BoundingBox, b: &BoundingBox) -> (f64, [f64; 4], [f64; 4]) {
    let zero = (0.0, [0.0; 4], [0.0; 4]);
    let left = a.x1.max(b.x1);
    let right = a.x2.min(b.x2);
    let top = a.y1.max(b.y1);
    let bottom = a.y2.min(b.y2);
    let iw = right - left;
    let ih = bottom - top;
    if iw <= 0.0 || ih <= 0.0 {
        return zero;
    }
    let inter = iw * ih;
    let (aw, ah) = (a.width(), a.height());
    let (bw, bh) = (b.width(), b.height());
    let union = aw * ah + bw * bh - inter;
    if union <= 0.0 {
        return zero;
    }
    let value = inter / union;

    // d(I/U) = dI * (U + I) / U^2 - I / U^2 * (dA_a + dA_b)
    let d_inter = (union + inter) / (union * union);
    let d_area = -inter / (union * union);

    // Intersection partials: the winning corner of each max/min owns the
    // derivative; ties go to `a`.
    let a_left = a.x1 >= b.x1;
    let a_right = a.x2 <= b.x2;
    let a_top = a.y1 >= b.y1;
    let a_bottom = a.y2 <= b.y2;

    let di_dx1 = -ih;
    let di_dx2 = ih;
    let di_dy1 = -iw;
    let di_dy2 = iw;

    let side = |owns: bool, di: f64| if owns { di } else { 0.0 };

    let grad_a = [
        d_inter * side(a_left, di_dx1) + d_area * (-ah),
        d_inter * side(a_top, di_dy1) + d_area * (-aw),
        d_inter * side(a_right, di_dx2) + d_area * ah,
        d_inter * side(a_bottom, di_dy2) + d_area * aw,
    ];
    let grad_b = [
        d_inter * side(!a_left, di_dx1) + d_area * (-bh),
        d_inter * side(!a_top, di_dy1) + d_area * (-bw),
        d_inter * side(!a_right, di_dx2) + d_area * bh,
        d_inter * side(!a_bottom, di_dy2) + d_area * bw,
    ];
    (value, grad_a, grad_b)
}

/// Square matrix of pairwise IoU values.
pub fn pairwise_iou(boxes: &[BoundingBox]) -> Array2<f64> {
    let n = boxes.len();
    let mut out = Array2::zeros((n, n));
    for i in 0..n {
        out[[i, i]] = iou(&boxes[i], &boxes[i]);
        for j in (i + 1)..n {
            let v = iou(&boxes[i], &boxes[j]);
            out[[i, j]] = v;
            out[[j, i]] = v;
        }
    }
    out
}

pub fn clip_box(b: &BoundingBox, width: f64, height: f64) -> BoundingBox {
    BoundingBox::new(
        b.x1.clamp(0.0, width),
        b.y1.clamp(0.0, height),
        b.x2.clamp(0.0, width),
        b.y2.clamp(0.0, height),
    )
}

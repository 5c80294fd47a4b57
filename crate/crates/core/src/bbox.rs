use serde::{Deserialize, Serialize};

/// Axis-aligned box in pixel units, stored as center and extent.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Self {
        Self { x, y, w, h }
    }

    pub fn from_corners(x0: f64, y0: f64, x1: f64, y1: f64) -> Self {
        Self {
            x: 0.5 * (x0 + x1),
            y: 0.5 * (y0 + y1),
            w: x1 - x0,
            h: y1 - y0,
        }
    }

    /// `(x0, y0, x1, y1)`
    pub fn corners(&self) -> (f64, f64, f64, f64) {
        (
            self.x - 0.5 * self.w,
            self.y - 0.5 * self.h,
            self.x + 0.5 * self.w,
            self.y + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.x.is_finite() && self.y.is_finite()
    }

    /// Clips the box to `[0, size]²`.
    pub fn clamped(&self, size: f64) -> Self {
        let (x0, y0, x1, y1) = self.corners();
        Self::from_corners(x0.max(0.0), y0.max(0.0), x1.min(size), y1.min(size))
    }

    pub fn within(&self, size: f64) -> bool {
        let (x0, y0, x1, y1) = self.corners();
        const TOL: f64 = 1e-9;
        x0 >= -TOL && y0 >= -TOL && x1 <= size + TOL && y1 <= size + TOL
    }
}

/// Intersection over union; 0 for disjoint boxes.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let (ax0, ay0, ax1, ay1) = a.corners();
    let (bx0, by0, bx1, by1) = b.corners();
    let iw = (ax1.min(bx1) - ax0.max(bx0)).max(0.0);
    let ih = (ay1.min(by1) - ay0.max(by0)).max(0.0);
    let inter = iw * ih;
    if inter <= 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

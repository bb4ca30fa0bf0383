//! Axis-aligned boxes in pixel coordinates and the offset parameterization
//! used by the regression head.

use serde::{Deserialize, Serialize};

/// Box as (x1, y1, x2, y2) with x1 < x2, y1 < y2.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxF {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BoxF {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        BoxF { x1, y1, x2, y2 }
    }

    /// Build from COCO-style (x, y, w, h).
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Self {
        BoxF::new(x, y, x + w, y + h)
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn is_valid(&self) -> bool {
        self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn intersection_area(&self, other: &BoxF) -> f64 {
        let iw = (self.x2.min(other.x2) - self.x1.max(other.x1)).max(0.0);
        let ih = (self.y2.min(other.y2) - self.y1.max(other.y1)).max(0.0);
        iw * ih
    }

    /// Intersection over union; 0 for disjoint or degenerate pairs.
    pub fn iou(&self, other: &BoxF) -> f64 {
        let inter = self.intersection_area(other);
        let union = self.area() + other.area() - inter;
        if union <= 0.0 {
            0.0
        } else {
            inter / union
        }
    }

    pub fn clip(&self, width: f64, height: f64) -> BoxF {
        BoxF::new(
            self.x1.clamp(0.0, width),
            self.y1.clamp(0.0, height),
            self.x2.clamp(0.0, width),
            self.y2.clamp(0.0, height),
        )
    }

    /// Mirror horizontally inside an image of the given width.
    pub fn hflip(&self, image_width: f64) -> BoxF {
        BoxF::new(image_width - self.x2, self.y1, image_width - self.x1, self.y2)
    }

    pub fn contains_point(&self, x: f64, y: f64) -> bool {
        x >= self.x1 && x < self.x2 && y >= self.y1 && y < self.y2
    }
}

/// Encode a target box against an anchor as (dx, dy, log dw, log dh), with
/// the translation terms normalized by the anchor size.
pub fn encode_offsets(gt: &BoxF, anchor: &BoxF) -> [f64; 4] {
    let (gx, gy) = gt.center();
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    [
        (gx - ax) / aw,
        (gy - ay) / ah,
        (gt.width() / aw).ln(),
        (gt.height() / ah).ln(),
    ]
}

/// Invert [`encode_offsets`]. A non-positive decoded width or height is
/// clamped to 1 px and flagged.
pub fn decode_offsets(anchor: &BoxF, t: &[f64; 4]) -> (BoxF, bool) {
    let (ax, ay) = anchor.center();
    let (aw, ah) = (anchor.width(), anchor.height());
    let cx = ax + t[0] * aw;
    let cy = ay + t[1] * ah;
    let mut w = aw * t[2].exp();
    let mut h = ah * t[3].exp();
    let mut clamped = false;
    if !(w > 0.0) {
        w = 1.0;
        clamped = true;
    }
    if !(h > 0.0) {
        h = 1.0;
        clamped = true;
    }
    (
        BoxF::new(cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h),
        clamped,
    )
}

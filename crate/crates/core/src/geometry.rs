//! Axis-aligned box geometry.
//!
//! Boxes are kept in corner form `(x_min, y_min, x_max, y_max)`. COCO's
//! `(x, y, w, h)` layout is only used at the file boundary.

use serde::{Deserialize, Serialize};

use crate::error::{CuratorError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    /// Builds a box without validation. Use [`BoundingBox::try_new`] for
    /// untrusted input.
    pub const fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Self {
        Self {
            x_min,
            y_min,
            x_max,
            y_max,
        }
    }

    pub fn try_new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self> {
        let b = Self::new(x_min, y_min, x_max, y_max);
        if !b.is_valid() {
            return Err(CuratorError::InvalidInput(format!(
                "malformed box ({x_min}, {y_min}, {x_max}, {y_max})"
            )));
        }
        Ok(b)
    }

    /// Converts a COCO `[x, y, width, height]` box.
    pub fn from_xywh(x: f64, y: f64, w: f64, h: f64) -> Result<Self> {
        if !(w >= 0.0 && h >= 0.0) {
            return Err(CuratorError::InvalidInput(format!(
                "negative box extent (w={w}, h={h})"
            )));
        }
        Self::try_new(x, y, x + w, y + h)
    }

    pub fn to_xywh(&self) -> [f64; 4] {
        [self.x_min, self.y_min, self.width(), self.height()]
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_max >= self.x_min
            && self.y_max >= self.y_min
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn intersection_area(&self, other: &BoundingBox) -> f64 {
        let w = self.x_max.min(other.x_max) - self.x_min.max(other.x_min);
        let h = self.y_max.min(other.y_max) - self.y_min.max(other.y_min);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// Lexicographic order over the four coordinates, used for tie-breaks.
    pub fn total_cmp(&self, other: &BoundingBox) -> std::cmp::Ordering {
        self.x_min
            .total_cmp(&other.x_min)
            .then(self.y_min.total_cmp(&other.y_min))
            .then(self.x_max.total_cmp(&other.x_max))
            .then(self.y_max.total_cmp(&other.y_max))
    }
}

/// Intersection over union. Zero-area unions give 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

/// Intersection over foreground, normalised by the area of `a` (the first
/// argument). A small box fully inside a large one has `iof(small, large) == 1`.
/// Zero-area `a` gives 0.
pub fn iof(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let area = a.area();
    if area <= 0.0 {
        return 0.0;
    }
    (a.intersection_area(b) / area).clamp(0.0, 1.0)
}

/// `result[i][j] == iou(&a[i], &b[j])`.
pub fn pairwise_iou(a: &[BoundingBox], b: &[BoundingBox]) -> Vec<Vec<f64>> {
    a.iter().map(|x| b.iter().map(|y| iou(x, y)).collect()).collect()
}

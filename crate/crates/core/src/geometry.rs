//! Axis-aligned boxes, intersection-over-union and the perturbation region of interest.

use serde::{Deserialize, Serialize};

use crate::detection::Annotation;
use crate::error::Error;

/// Closed axis-aligned rectangle in continuous image coordinates (origin top-left).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x_min: f64,
    pub y_min: f64,
    pub x_max: f64,
    pub y_max: f64,
}

impl BoundingBox {
    pub fn new(x_min: f64, y_min: f64, x_max: f64, y_max: f64) -> Result<Self, Error> {
        let b = BoundingBox {
            x_min,
            y_min,
            x_max,
            y_max,
        };
        if b.is_valid() {
            Ok(b)
        } else {
            Err(Error::InvalidBox(format!(
                "[{x_min}, {y_min}, {x_max}, {y_max}]"
            )))
        }
    }

    pub fn is_valid(&self) -> bool {
        [self.x_min, self.y_min, self.x_max, self.y_max]
            .iter()
            .all(|v| v.is_finite())
            && self.x_min <= self.x_max
            && self.y_min <= self.y_max
    }

    pub fn width(&self) -> f64 {
        self.x_max - self.x_min
    }

    pub fn height(&self) -> f64 {
        self.y_max - self.y_min
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (
            0.5 * (self.x_min + self.x_max),
            0.5 * (self.y_min + self.y_max),
        )
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

    /// Grows the box by `margin` on every side and clips it to `[0, w] x [0, h]`.
    pub fn expand_clipped(&self, margin: f64, (w, h): (f64, f64)) -> BoundingBox {
        BoundingBox {
            x_min: (self.x_min - margin).clamp(0.0, w),
            y_min: (self.y_min - margin).clamp(0.0, h),
            x_max: (self.x_max + margin).clamp(0.0, w),
            y_max: (self.y_max + margin).clamp(0.0, h),
        }
    }

    /// Boundary-inclusive containment.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        x >= self.x_min && x <= self.x_max && y >= self.y_min && y <= self.y_max
    }

    /// Nearest point of the (closed) rectangle to `(x, y)`.
    pub fn project(&self, x: f64, y: f64) -> (f64, f64) {
        (x.clamp(self.x_min, self.x_max), y.clamp(self.y_min, self.y_max))
    }
}

/// Intersection over union. Degenerate or disjoint boxes yield 0.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let inter = a.intersection_area(b);
    let union = a.area() + b.area() - inter;
    if union <= 0.0 || inter <= 0.0 {
        0.0
    } else {
        (inter / union).clamp(0.0, 1.0)
    }
}

/// Union of ground-truth boxes, each expanded by a margin and clipped to the image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiRegion {
    pub boxes: Vec<BoundingBox>,
    pub margin: f64,
}

impl RoiRegion {
    pub fn is_empty(&self) -> bool {
        self.boxes.is_empty()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.boxes.iter().any(|b| b.contains(x, y))
    }

    /// Smallest rectangle enclosing every ROI box, or `None` for an empty region.
    pub fn bounding_rect(&self) -> Option<BoundingBox> {
        let first = *self.boxes.first()?;
        Some(self.boxes.iter().skip(1).fold(first, |acc, b| BoundingBox {
            x_min: acc.x_min.min(b.x_min),
            y_min: acc.y_min.min(b.y_min),
            x_max: acc.x_max.max(b.x_max),
            y_max: acc.y_max.max(b.y_max),
        }))
    }

    /// Euclidean projection onto the nearest ROI box. Points already inside are
    /// returned unchanged; ties go to the earliest box.
    pub fn project(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        if self.contains(x, y) {
            return Some((x, y));
        }
        let mut best: Option<((f64, f64), f64)> = None;
        for b in &self.boxes {
            let (px, py) = b.project(x, y);
            let d2 = (px - x).powi(2) + (py - y).powi(2);
            if best.is_none_or(|(_, bd)| d2 < bd) {
                best = Some(((px, py), d2));
            }
        }
        best.map(|(p, _)| p)
    }
}

pub fn roi_contains(roi: &RoiRegion, point: (f64, f64)) -> bool {
    roi.contains(point.0, point.1)
}

pub fn build_roi(annotations: &[Annotation], margin: f64, image_size: (u32, u32)) -> RoiRegion {
    let size = (image_size.0 as f64, image_size.1 as f64);
    RoiRegion {
        boxes: annotations
            .iter()
            .map(|a| a.bbox.expand_clipped(margin.max(0.0), size))
            .collect(),
        margin,
    }
}

//! Axis-aligned boxes in the unit square.
//!
//! Every box in the crate (proposals, ground truth, parts, regressed
//! detections) lives in normalized image coordinates, so `[0, 1]` on both
//! axes. Geometry is continuous; there is no pixel grid.

use serde::{Deserialize, Serialize};
use std::cmp::Ordering;

use crate::error::{Error, Result};

/// An axis-aligned rectangle with `x1 < x2`, `y1 < y2`, all coordinates in `[0, 1]`.
///
/// Serialized as a bare `[x1, y1, x2, y2]` array.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    /// Checked constructor.
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let b = BBox { x1, y1, x2, y2 };
        if !b.is_valid() {
            return Err(Error::InvalidBox([x1, y1, x2, y2]));
        }
        Ok(b)
    }

    /// Builds a box from its center and size, clipped to the unit square.
    ///
    /// Clipping keeps each side at least `min_side` long.
    pub fn from_center_clipped(cx: f64, cy: f64, w: f64, h: f64, min_side: f64) -> Self {
        let (x1, x2) = clip_interval(cx - 0.5 * w, cx + 0.5 * w, min_side);
        let (y1, y2) = clip_interval(cy - 0.5 * h, cy + 0.5 * h, min_side);
        BBox { x1, y1, x2, y2 }
    }

    pub fn is_valid(&self) -> bool {
        let c = [self.x1, self.y1, self.x2, self.y2];
        c.iter().all(|v| v.is_finite() && (0.0..=1.0).contains(v)) && self.x1 < self.x2 && self.y1 < self.y2
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        (0.5 * (self.x1 + self.x2), 0.5 * (self.y1 + self.y2))
    }

    pub fn intersection_area(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    /// True when `self` lies strictly inside `outer` on all four sides.
    pub fn strictly_inside(&self, outer: &BBox) -> bool {
        self.x1 > outer.x1 && self.y1 > outer.y1 && self.x2 < outer.x2 && self.y2 < outer.y2
    }

    pub fn to_array(self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }
}

fn clip_interval(lo: f64, hi: f64, min_side: f64) -> (f64, f64) {
    let mut lo = lo.clamp(0.0, 1.0);
    let mut hi = hi.clamp(0.0, 1.0);
    if hi - lo < min_side {
        let mid = (0.5 * (lo + hi)).clamp(0.5 * min_side, 1.0 - 0.5 * min_side);
        lo = mid - 0.5 * min_side;
        hi = mid + 0.5 * min_side;
    }
    (lo, hi)
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(c: [f64; 4]) -> Result<Self> {
        BBox::new(c[0], c[1], c[2], c[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

/// Intersection over union.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection_area(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Fraction of `inner`'s area that lies inside `outer`.
pub fn coverage(inner: &BBox, outer: &BBox) -> f64 {
    (inner.intersection_area(outer) / inner.area()).clamp(0.0, 1.0)
}

/// Greedy non-maximum suppression.
///
/// Returns kept indices in descending score order. Equal scores are visited
/// in ascending index order. A box survives iff its IoU with every box kept
/// before it is strictly below `iou_thresh`.
pub fn nms(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "nms: boxes and scores differ in length");
    let order = descending_order(scores);
    let mut keep: Vec<usize> = Vec::new();
    for i in order {
        if keep.iter().all(|&k| iou(&boxes[i], &boxes[k]) < iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Indices sorted by descending score, ties by ascending index.
pub(crate) fn descending_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| {
        scores[b]
            .partial_cmp(&scores[a])
            .unwrap_or(Ordering::Equal)
            .then(a.cmp(&b))
    });
    order
}

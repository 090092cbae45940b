//! Axis-aligned boxes, overlap measures and greedy non-maximum suppression.
//!
//! Coordinates are plain reals; there is no `+1` pixel convention.

use serde::{Deserialize, Serialize};

use crate::data::Detection;
use crate::error::{Error, Result};

/// An axis-aligned box `[x1, y1, x2, y2]` with `x1 < x2` and `y1 < y2`.
///
/// Serialized as a four-element array. Degenerate boxes are rejected both by
/// [`BBox::new`] and during deserialization.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct BBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
}

impl BBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        let finite = [x1, y1, x2, y2].iter().all(|v| v.is_finite());
        if !finite || x1 >= x2 || y1 >= y2 {
            return Err(Error::InvalidBox { x1, y1, x2, y2 });
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn x1(&self) -> f64 {
        self.x1
    }

    pub fn y1(&self) -> f64 {
        self.y1
    }

    pub fn x2(&self) -> f64 {
        self.x2
    }

    pub fn y2(&self) -> f64 {
        self.y2
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

    pub fn to_array(&self) -> [f64; 4] {
        [self.x1, self.y1, self.x2, self.y2]
    }

    /// Area of the intersection with `other`; zero when disjoint or touching.
    pub fn intersection(&self, other: &BBox) -> f64 {
        let w = self.x2.min(other.x2) - self.x1.max(other.x1);
        let h = self.y2.min(other.y2) - self.y1.max(other.y1);
        if w <= 0.0 || h <= 0.0 {
            0.0
        } else {
            w * h
        }
    }

    pub fn contains(&self, other: &BBox) -> bool {
        self.x1 <= other.x1 && self.y1 <= other.y1 && self.x2 >= other.x2 && self.y2 >= other.y2
    }

    /// Whether the box lies inside `[0, width] x [0, height]`.
    pub fn within(&self, width: f64, height: f64) -> bool {
        self.x1 >= 0.0 && self.y1 >= 0.0 && self.x2 <= width && self.y2 <= height
    }
}

impl TryFrom<[f64; 4]> for BBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        BBox::new(v[0], v[1], v[2], v[3])
    }
}

impl From<BBox> for [f64; 4] {
    fn from(b: BBox) -> Self {
        b.to_array()
    }
}

pub fn area(b: &BBox) -> f64 {
    b.area()
}

/// Intersection over union, in `[0, 1]`.
pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let inter = a.intersection(b);
    if inter == 0.0 {
        return 0.0;
    }
    let union = a.area() + b.area() - inter;
    (inter / union).clamp(0.0, 1.0)
}

/// Largest intersection with any of `gts`, divided by the area of `pred`.
///
/// Returns `0.0` for an empty `gts`.
pub fn overlap_over_pred(pred: &BBox, gts: &[BBox]) -> f64 {
    let area = pred.area();
    gts.iter()
        .map(|g| (pred.intersection(g) / area).min(1.0))
        .fold(0.0, f64::max)
}

/// Order of `scores` by descending value; equal scores keep insertion order.
pub fn score_order(scores: &[f64]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    order
}

/// Greedy NMS over parallel `boxes`/`scores`. Returns kept indices in
/// descending score order. A box survives iff its IoU with every box already
/// kept is `<= iou_thresh`.
pub fn nms_indices(boxes: &[BBox], scores: &[f64], iou_thresh: f64) -> Vec<usize> {
    assert_eq!(boxes.len(), scores.len(), "boxes and scores must be parallel");
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(scores) {
        if keep.iter().all(|&k| iou(&boxes[k], &boxes[i]) <= iou_thresh) {
            keep.push(i);
        }
    }
    keep
}

/// Greedy NMS over detections.
///
/// With `per_category` set, boxes only suppress boxes of the same category;
/// otherwise suppression is category-agnostic. Output is sorted by descending
/// score, ties resolved by input position.
pub fn nms(dets: &[Detection], iou_thresh: f64, per_category: bool) -> Vec<Detection> {
    let scores: Vec<f64> = dets.iter().map(|d| d.score).collect();
    let mut keep: Vec<usize> = Vec::new();
    for i in score_order(&scores) {
        let suppressed = keep.iter().any(|&k| {
            (!per_category || dets[k].category == dets[i].category)
                && iou(&dets[k].bbox, &dets[i].bbox) > iou_thresh
        });
        if !suppressed {
            keep.push(i);
        }
    }
    keep.into_iter().map(|i| dets[i].clone()).collect()
}

//! Boxes, detections, ground truths, and the head layout that maps a model's
//! output vector onto them.
//!
//! The IoU functions here are plain closed-form arithmetic. The encoder
//! builds the same quantities out of graph nodes; tests hold the two routes
//! against each other.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// How far a ground-truth box may poke outside the unit image.
pub const CONTAINMENT_TOLERANCE: f64 = 1e-9;

/// Axis-aligned box: top-left corner plus extent, in normalized image units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x: f64,
    pub y: f64,
    pub w: f64,
    pub h: f64,
}

#[derive(Debug, Error, PartialEq)]
pub enum DetectionError {
    #[error("box extent must be nonnegative and finite, got w = {w}, h = {h}")]
    NegativeExtent { w: f64, h: f64 },
    #[error("ground truth set must contain at least one box")]
    Empty,
    #[error("ground truth {index} has class {class}, model knows {num_classes} classes")]
    UnknownClass {
        index: usize,
        class: usize,
        num_classes: usize,
    },
    #[error("ground truth {index} leaves the unit image: {box_:?}")]
    OutOfImage { index: usize, box_: BoundingBox },
    #[error("ground truth {index} has zero area")]
    ZeroArea { index: usize },
    #[error("head spec: {0}")]
    BadHeadSpec(String),
}

impl BoundingBox {
    pub fn new(x: f64, y: f64, w: f64, h: f64) -> Result<Self, DetectionError> {
        if !(w >= 0.0 && h >= 0.0 && w.is_finite() && h.is_finite() && x.is_finite() && y.is_finite())
        {
            return Err(DetectionError::NegativeExtent { w, h });
        }
        Ok(Self { x, y, w, h })
    }

    pub fn area(&self) -> f64 {
        self.w * self.h
    }
}

/// Overlap area of two boxes; zero when they are disjoint.
pub fn intersection_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let x1 = a.x.max(b.x);
    let y1 = a.y.max(b.y);
    let x2 = (a.x + a.w).min(b.x + b.w);
    let y2 = (a.y + a.h).min(b.y + b.h);
    (x2 - x1).max(0.0) * (y2 - y1).max(0.0)
}

pub fn union_area(a: &BoundingBox, b: &BoundingBox) -> f64 {
    a.area() + b.area() - intersection_area(a, b)
}

/// Intersection-over-union; zero when the union is degenerate.
pub fn iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let u = union_area(a, b);
    if u <= 0.0 {
        0.0
    } else {
        intersection_area(a, b) / u
    }
}

/// The overlap margin `A_I - tau * A_U`; positive iff IoU exceeds `tau`.
pub fn iou_margin(a: &BoundingBox, b: &BoundingBox, tau: f64) -> f64 {
    intersection_area(a, b) - tau * union_area(a, b)
}

/// One decoded model prediction.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub box_: BoundingBox,
    pub logits: Vec<f64>,
    pub objectness: f64,
}

impl Detection {
    /// Index of the largest class logit (first on ties).
    pub fn predicted_class(&self) -> usize {
        let mut best = 0;
        for (i, &v) in self.logits.iter().enumerate() {
            if v > self.logits[best] {
                best = i;
            }
        }
        best
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruth {
    pub box_: BoundingBox,
    pub class: usize,
}

/// The annotated objects of one image. `len() == 0` only through
/// [`GroundTruthSet::empty`], for count queries against object-free images.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundTruthSet {
    items: Vec<GroundTruth>,
}

impl GroundTruthSet {
    pub fn new(items: Vec<GroundTruth>, num_classes: usize) -> Result<Self, DetectionError> {
        if items.is_empty() {
            return Err(DetectionError::Empty);
        }
        for (index, gt) in items.iter().enumerate() {
            if gt.class >= num_classes {
                return Err(DetectionError::UnknownClass {
                    index,
                    class: gt.class,
                    num_classes,
                });
            }
            let b = &gt.box_;
            let tol = CONTAINMENT_TOLERANCE;
            if b.x < -tol || b.y < -tol || b.x + b.w > 1.0 + tol || b.y + b.h > 1.0 + tol {
                return Err(DetectionError::OutOfImage { index, box_: *b });
            }
            if b.area() <= 0.0 {
                return Err(DetectionError::ZeroArea { index });
            }
        }
        Ok(Self { items })
    }

    /// No objects present; only meaningful for count queries.
    pub fn empty() -> Self {
        Self { items: Vec::new() }
    }

    pub fn items(&self) -> &[GroundTruth] {
        &self.items
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }
}

/// Where each predicted box lives inside the flat head output vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoxSlots {
    /// Flat indices of x, y, w, h in that order.
    pub coords: [usize; 4],
    /// Flat indices of the class logits, one per class.
    pub logits: Vec<usize>,
    /// Flat index of the objectness score.
    pub objectness: usize,
}

/// Layout of the detection head: `n` predicted boxes over a shared output
/// vector, each with coordinates, class logits, and an objectness score.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionHeadSpec {
    pub num_classes: usize,
    pub boxes: Vec<BoxSlots>,
}

impl DetectionHeadSpec {
    /// Block layout: all coordinates first, then all logits, then all
    /// objectness scores: `[x0 y0 w0 h0 .. | c0_0 .. c0_{C-1} .. | o0 .. o_{n-1}]`.
    pub fn block_layout(n: usize, num_classes: usize) -> Result<Self, DetectionError> {
        if n == 0 {
            return Err(DetectionError::BadHeadSpec(
                "head must predict at least one box".to_string(),
            ));
        }
        if num_classes == 0 {
            return Err(DetectionError::BadHeadSpec(
                "head must score at least one class".to_string(),
            ));
        }
        let boxes = (0..n)
            .map(|i| BoxSlots {
                coords: [4 * i, 4 * i + 1, 4 * i + 2, 4 * i + 3],
                logits: (0..num_classes).map(|c| 4 * n + num_classes * i + c).collect(),
                objectness: 4 * n + num_classes * n + i,
            })
            .collect();
        Ok(Self { num_classes, boxes })
    }

    pub fn num_boxes(&self) -> usize {
        self.boxes.len()
    }

    /// Total head width the slots address.
    pub fn head_len(&self) -> usize {
        self.boxes.len() * (4 + self.num_classes + 1)
    }

    /// Slots must be disjoint and cover `0..head_len` exactly.
    pub fn check(&self) -> Result<(), DetectionError> {
        if self.boxes.is_empty() {
            return Err(DetectionError::BadHeadSpec(
                "head must predict at least one box".to_string(),
            ));
        }
        let len = self.head_len();
        let mut seen = vec![false; len];
        let mut claim = |idx: usize| -> Result<(), DetectionError> {
            if idx >= len {
                return Err(DetectionError::BadHeadSpec(format!(
                    "slot index {idx} outside head of {len} outputs"
                )));
            }
            if seen[idx] {
                return Err(DetectionError::BadHeadSpec(format!(
                    "slot index {idx} claimed twice"
                )));
            }
            seen[idx] = true;
            Ok(())
        };
        for b in &self.boxes {
            if b.logits.len() != self.num_classes {
                return Err(DetectionError::BadHeadSpec(format!(
                    "box has {} logit slots for {} classes",
                    b.logits.len(),
                    self.num_classes
                )));
            }
            for &c in &b.coords {
                claim(c)?;
            }
            for &l in &b.logits {
                claim(l)?;
            }
            claim(b.objectness)?;
        }
        debug_assert!(seen.iter().all(|&s| s), "cover follows from count + disjoint");
        Ok(())
    }

    /// Read detections out of a head output vector.
    pub fn decode(&self, head: &Tensor) -> Result<Vec<Detection>, DetectionError> {
        if head.numel() != self.head_len() {
            return Err(DetectionError::BadHeadSpec(format!(
                "head output has {} elements, layout expects {}",
                head.numel(),
                self.head_len()
            )));
        }
        let d = head.data();
        self.boxes
            .iter()
            .map(|b| {
                Ok(Detection {
                    box_: BoundingBox::new(
                        d[b.coords[0]],
                        d[b.coords[1]],
                        d[b.coords[2]],
                        d[b.coords[3]],
                    )?,
                    logits: b.logits.iter().map(|&i| d[i]).collect(),
                    objectness: d[b.objectness],
                })
            })
            .collect()
    }
}

/// Pair each ground truth with one detection, greedily by descending IoU.
///
/// Returns, per ground truth, the index of its detection (`None` once
/// detections run out). Ties and the processing order are deterministic:
/// pairs are ranked by (IoU desc, detection index asc, ground-truth index
/// asc), and each detection/ground truth is used at most once. Zero-overlap
/// pairs are still assigned so every ground truth gets a detection when
/// enough exist.
pub fn greedy_match(dets: &[Detection], gts: &GroundTruthSet) -> Vec<Option<usize>> {
    let mut pairs = Vec::with_capacity(dets.len() * gts.len());
    for (i, det) in dets.iter().enumerate() {
        for (j, gt) in gts.items().iter().enumerate() {
            pairs.push((iou(&det.box_, &gt.box_), i, j));
        }
    }
    pairs.sort_by(|a, b| {
        b.0.partial_cmp(&a.0)
            .expect("IoU is finite")
            .then(a.1.cmp(&b.1))
            .then(a.2.cmp(&b.2))
    });
    let mut det_used = vec![false; dets.len()];
    let mut assignment = vec![None; gts.len()];
    for (_, i, j) in pairs {
        if det_used[i] || assignment[j].is_some() {
            continue;
        }
        det_used[i] = true;
        assignment[j] = Some(i);
    }
    assignment
}

//! Property layers appended to a detector graph: IoU overlap margins,
//! sigmoid binarizers, matching and count heads, and the assembly of
//! complete verification queries for the three attack kinds.
//!
//! min/max/|.| are not graph primitives; they are lowered here through ReLU:
//! `max(a,b) = b + ReLU(a-b)`, `min(a,b) = a - ReLU(a-b)`,
//! `|t| = ReLU(t) + ReLU(-t)`. Ground-truth boxes fold into constants, so
//! intersection coordinates stay piecewise-linear in the network outputs;
//! the only nonlinear products are explicit MulElementwise nodes.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{
    greedy_match, BoundingBox, DetectionError, DetectionHeadSpec, GroundTruthSet,
};
use crate::eval::{forward_values, EvalError};
use crate::graph::{ComputeGraph, GraphError, NodeId};
use crate::region::{InputRegion, RegionError};
use crate::tensor::Tensor;

/// Objectness cutoff for counting a predicted box as a positive detection.
pub const OBJECTNESS_THRESHOLD: f64 = 0.5;

#[derive(Debug, Error)]
pub enum EncoderError {
    #[error("tau must lie strictly between 0 and 1, got {0}")]
    TauOutOfRange(f64),
    #[error("ground truth box has zero area")]
    ZeroAreaGroundTruth,
    #[error("{kind:?} queries need at least one ground truth")]
    EmptyGroundTruth { kind: AttackKind },
    #[error("model declares {0} outputs, expected exactly one detection head")]
    WrongOutputCount(usize),
    #[error("head layout addresses {expected} outputs, model head produces {actual}")]
    HeadWidth { expected: usize, actual: usize },
    #[error("clean image yields {dets} detections for {gts} ground truths; every ground truth needs its own detection")]
    NotEnoughDetections { dets: usize, gts: usize },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Detection(#[from] DetectionError),
    #[error(transparent)]
    Region(#[from] RegionError),
    #[error("clean-image evaluation failed: {0}")]
    Eval(#[from] EvalError),
}

/// `max(a, b)` lowered as `b + ReLU(a - b)`; exact for all inputs.
pub fn lower_max(g: &mut ComputeGraph, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
    let diff = g.sub(a, b)?;
    let rect = g.relu(diff)?;
    g.add(b, rect)
}

/// `min(a, b)` lowered as `a - ReLU(a - b)`; exact for all inputs.
pub fn lower_min(g: &mut ComputeGraph, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
    let diff = g.sub(a, b)?;
    let rect = g.relu(diff)?;
    g.sub(a, rect)
}

/// `|t|` lowered as `ReLU(t) + ReLU(-t)`.
pub fn lower_abs(g: &mut ComputeGraph, t: NodeId) -> Result<NodeId, GraphError> {
    let shape = g
        .shape(t)
        .ok_or(GraphError::UnknownNode(t))?
        .to_vec();
    let zero = g.constant(Tensor::zeros(shape));
    let neg = g.sub(zero, t)?;
    let pos_part = g.relu(t)?;
    let neg_part = g.relu(neg)?;
    g.add(pos_part, neg_part)
}

/// Node ids of every stage of one encoded IoU computation.
#[derive(Debug, Clone)]
pub struct IoUSubgraphHandle {
    pub x_i1: NodeId,
    pub y_i1: NodeId,
    pub x_i2: NodeId,
    pub y_i2: NodeId,
    pub w_i: NodeId,
    pub h_i: NodeId,
    pub area_intersection: NodeId,
    pub area_union: NodeId,
    pub area_gt: NodeId,
    pub area_det: NodeId,
    /// `A_I - tau * A_U`; the overlap property holds iff this is positive.
    pub margin: NodeId,
    pub tau: f64,
}

/// Encode `A_I - tau * A_U` between a variable detection box and a fixed
/// ground truth. `det_box` holds scalar nodes for x, y, w, h.
pub fn build_iou_margin(
    g: &mut ComputeGraph,
    det_box: [NodeId; 4],
    gt: &BoundingBox,
    tau: f64,
) -> Result<IoUSubgraphHandle, EncoderError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EncoderError::TauOutOfRange(tau));
    }
    if gt.area() <= 0.0 {
        return Err(EncoderError::ZeroAreaGroundTruth);
    }
    let [x_d, y_d, w_d, h_d] = det_box;
    let gx = g.scalar(gt.x);
    let gy = g.scalar(gt.y);
    let gx2 = g.scalar(gt.x + gt.w);
    let gy2 = g.scalar(gt.y + gt.h);
    let area_gt = g.scalar(gt.area());

    let x_i1 = lower_max(g, gx, x_d)?;
    let y_i1 = lower_max(g, gy, y_d)?;
    let det_x2 = g.add(x_d, w_d)?;
    let det_y2 = g.add(y_d, h_d)?;
    let x_i2 = lower_min(g, gx2, det_x2)?;
    let y_i2 = lower_min(g, gy2, det_y2)?;

    let dw = g.sub(x_i2, x_i1)?;
    let w_i = g.relu(dw)?;
    let dh = g.sub(y_i2, y_i1)?;
    let h_i = g.relu(dh)?;

    let area_intersection = g.mul(w_i, h_i)?;
    let area_det = g.mul(w_d, h_d)?;
    let areas = g.add(area_gt, area_det)?;
    let area_union = g.sub(areas, area_intersection)?;

    let tau_node = g.scalar(tau);
    let scaled_union = g.mul(tau_node, area_union)?;
    let margin = g.sub(area_intersection, scaled_union)?;

    Ok(IoUSubgraphHandle {
        x_i1,
        y_i1,
        x_i2,
        y_i2,
        w_i,
        h_i,
        area_intersection,
        area_union,
        area_gt,
        area_det,
        margin,
        tau,
    })
}

/// Smooth 0/1 step: a Sigmoid node with the given slope.
pub fn build_binarizer(g: &mut ComputeGraph, x: NodeId, slope: f64) -> Result<NodeId, GraphError> {
    g.sigmoid(x, slope)
}

/// Node ids of the binarized detection-to-ground-truth match matrix and the
/// margins derived from it.
#[derive(Debug, Clone)]
pub struct MatchingHeadHandle {
    /// `z[i][j]`: binarized indicator that detection `i` matches ground truth `j`.
    pub z: Vec<Vec<NodeId>>,
    pub slope: f64,
    pub row_sums: Vec<NodeId>,
    pub col_sums: Vec<NodeId>,
    /// `sum(z) - 0.5`: positive iff at least one pair matches.
    pub at_least_one_margin: NodeId,
    /// Per detection row: `0.5 - |row_sum - 1|`.
    pub row_margins: Vec<NodeId>,
    /// Per ground-truth column: `0.5 - |col_sum - 1|`.
    pub col_margins: Vec<NodeId>,
}

/// Build the match matrix `z_ij = S(slope * (A_I(i,j) - tau * A_U(i,j)))`
/// plus its at-least-one and exact-matching margins.
pub fn build_matching_head(
    g: &mut ComputeGraph,
    det_boxes: &[[NodeId; 4]],
    gts: &GroundTruthSet,
    tau: f64,
    slope: f64,
) -> Result<MatchingHeadHandle, EncoderError> {
    let n = det_boxes.len();
    let m = gts.len();
    let mut z = vec![Vec::with_capacity(m); n];
    for (i, det_box) in det_boxes.iter().enumerate() {
        for gt in gts.items() {
            let overlap = build_iou_margin(g, *det_box, &gt.box_, tau)?;
            let zij = build_binarizer(g, overlap.margin, slope)?;
            z[i].push(zij);
        }
    }

    let sum_of = |g: &mut ComputeGraph, parts: &[NodeId]| -> Result<NodeId, GraphError> {
        let cat = g.concat(parts)?;
        g.sum(cat)
    };

    let mut row_sums = Vec::with_capacity(n);
    for row in &z {
        row_sums.push(sum_of(g, row)?);
    }
    let mut col_sums = Vec::with_capacity(m);
    for j in 0..m {
        let col: Vec<NodeId> = z.iter().map(|row| row[j]).collect();
        col_sums.push(sum_of(g, &col)?);
    }
    let all: Vec<NodeId> = z.iter().flatten().copied().collect();
    let total = sum_of(g, &all)?;
    let half = g.scalar(0.5);
    let at_least_one_margin = g.sub(total, half)?;

    // 0.5 - |sum - 1| is positive exactly when the sum sits within 0.5 of 1.
    let slack_margin = |g: &mut ComputeGraph, sum: NodeId| -> Result<NodeId, GraphError> {
        let one = g.scalar(1.0);
        let off = g.sub(sum, one)?;
        let dist = lower_abs(g, off)?;
        let half = g.scalar(0.5);
        g.sub(half, dist)
    };
    let mut row_margins = Vec::with_capacity(n);
    for &s in &row_sums {
        row_margins.push(slack_margin(g, s)?);
    }
    let mut col_margins = Vec::with_capacity(m);
    for &s in &col_sums {
        col_margins.push(slack_margin(g, s)?);
    }

    Ok(MatchingHeadHandle {
        z,
        slope,
        row_sums,
        col_sums,
        at_least_one_margin,
        row_margins,
        col_margins,
    })
}

/// Node ids of the binarized positive-detection count and its two margins.
#[derive(Debug, Clone)]
pub struct CountHeadHandle {
    /// `sum_i S(slope * (objectness_i - 0.5))`.
    pub count: NodeId,
    /// `count - d + 0.5`: positive iff not too few positives.
    pub lower_margin: NodeId,
    /// `d - count + 0.5`: positive iff not too many positives.
    pub upper_margin: NodeId,
}

/// Count binarized positives among the objectness scores and constrain the
/// count to within 0.5 of the expected `d`.
pub fn build_count_head(
    g: &mut ComputeGraph,
    objectness: &[NodeId],
    d: usize,
    slope: f64,
) -> Result<CountHeadHandle, EncoderError> {
    let theta = g.scalar(OBJECTNESS_THRESHOLD);
    let mut positives = Vec::with_capacity(objectness.len());
    for &o in objectness {
        let shifted = g.sub(o, theta)?;
        positives.push(build_binarizer(g, shifted, slope)?);
    }
    let cat = g.concat(&positives)?;
    let count = g.sum(cat)?;
    let d = d as f64;
    let low_ref = g.scalar(d - 0.5);
    let lower_margin = g.sub(count, low_ref)?;
    let high_ref = g.scalar(d + 0.5);
    let upper_margin = g.sub(high_ref, count)?;
    Ok(CountHeadHandle {
        count,
        lower_margin,
        upper_margin,
    })
}

/// The three perturbation goals a query can assert robustness against.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttackKind {
    /// The matched box keeps its overlap but flips class.
    Misclassification,
    /// The matched box drifts below IoU threshold.
    Mislocalization,
    /// The number of positive detections changes.
    Misdetection,
}

impl std::str::FromStr for AttackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "misclassification" => Ok(Self::Misclassification),
            "mislocalization" => Ok(Self::Mislocalization),
            "misdetection" => Ok(Self::Misdetection),
            other => Err(format!(
                "unknown attack kind {other:?}; expected misclassification, mislocalization, or misdetection"
            )),
        }
    }
}

impl std::fmt::Display for AttackKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Self::Misclassification => "misclassification",
            Self::Mislocalization => "mislocalization",
            Self::Misdetection => "misdetection",
        };
        f.write_str(s)
    }
}

/// One named scalar margin; the property requires it to stay positive.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarginConstraint {
    pub name: String,
    pub node: NodeId,
}

/// A model with property layers attached, the region to quantify over, and
/// the margins that must all stay positive for the property to hold.
#[derive(Debug, Clone)]
pub struct VerificationQuery {
    pub graph: ComputeGraph,
    pub region: InputRegion,
    pub constraints: Vec<MarginConstraint>,
    pub kind: AttackKind,
    pub timeout: Duration,
    pub head: DetectionHeadSpec,
    /// Raw detector output vector inside [`Self::graph`], kept addressable
    /// for decoding detections and steering attacks.
    pub head_node: NodeId,
    pub ground_truth: GroundTruthSet,
    /// True when any margin flows through a smooth binarizer, which makes
    /// the encoding incomplete by construction.
    pub uses_binarizer: bool,
}

impl VerificationQuery {
    /// Evaluate every margin at a concrete input.
    pub fn margins_at(&self, point: &Tensor) -> Result<Vec<(String, f64)>, EvalError> {
        let values = forward_values(&self.graph, std::slice::from_ref(point))?;
        Ok(self
            .constraints
            .iter()
            .map(|c| {
                let v = values[c.node.index()]
                    .scalar_value()
                    .expect("margins are scalar outputs");
                (c.name.clone(), v)
            })
            .collect())
    }

    /// Confirm each constraint is a scalar graph output.
    pub fn check(&self) -> Result<(), String> {
        if self.constraints.is_empty() {
            return Err("query has no margin constraints".to_string());
        }
        for c in &self.constraints {
            match self.graph.numel(c.node) {
                Some(1) => {}
                Some(n) => {
                    return Err(format!("margin {:?} has {} elements, must be scalar", c.name, n))
                }
                None => return Err(format!("margin {:?} references a shapeless node", c.name)),
            }
            if self.graph.output_node(&c.name) != Some(c.node) {
                return Err(format!("margin {:?} is not a declared graph output", c.name));
            }
        }
        Ok(())
    }
}

/// Knobs for [`encode_query`] beyond the core parameters.
#[derive(Debug, Clone)]
pub struct EncodeOptions {
    /// Restrict the perturbation to these flat input indices; `None` perturbs
    /// every element.
    pub pixels: Option<Vec<usize>>,
    /// Intersect the region with [0,1] (valid pixel range).
    pub clip01: bool,
}

impl Default for EncodeOptions {
    fn default() -> Self {
        Self {
            pixels: None,
            clip01: true,
        }
    }
}

/// Append property layers for `kind` onto a copy of `model` and wrap the
/// result into a ready-to-verify query.
///
/// Detections are paired with ground truths on the clean image (greedy,
/// highest IoU first) and the pairing stays fixed for the whole query.
#[allow(clippy::too_many_arguments)]
pub fn encode_query(
    kind: AttackKind,
    model: &ComputeGraph,
    head_spec: &DetectionHeadSpec,
    image: &Tensor,
    gts: &GroundTruthSet,
    epsilon: f64,
    tau: f64,
    slope: f64,
    timeout: Duration,
    options: &EncodeOptions,
) -> Result<VerificationQuery, EncoderError> {
    if !(tau > 0.0 && tau < 1.0) {
        return Err(EncoderError::TauOutOfRange(tau));
    }
    head_spec.check()?;
    if gts.is_empty() && kind != AttackKind::Misdetection {
        return Err(EncoderError::EmptyGroundTruth { kind });
    }
    if model.outputs().len() != 1 {
        return Err(EncoderError::WrongOutputCount(model.outputs().len()));
    }
    let head_node = model.outputs()[0].1;
    let head_len = model
        .numel(head_node)
        .ok_or_else(|| EncoderError::WrongOutputCount(0))?;
    if head_len != head_spec.head_len() {
        return Err(EncoderError::HeadWidth {
            expected: head_spec.head_len(),
            actual: head_len,
        });
    }

    let mut g = model.clone();

    // Scalar views of every head slot a property layer may need.
    let slot = |g: &mut ComputeGraph, idx: usize| -> Result<NodeId, GraphError> {
        g.slice(head_node, idx, idx + 1)
    };
    let mut det_boxes = Vec::with_capacity(head_spec.num_boxes());
    let mut det_logits = Vec::with_capacity(head_spec.num_boxes());
    let mut det_objectness = Vec::with_capacity(head_spec.num_boxes());
    for b in &head_spec.boxes {
        det_boxes.push([
            slot(&mut g, b.coords[0])?,
            slot(&mut g, b.coords[1])?,
            slot(&mut g, b.coords[2])?,
            slot(&mut g, b.coords[3])?,
        ]);
        let logits: Vec<NodeId> = b
            .logits
            .iter()
            .map(|&l| slot(&mut g, l))
            .collect::<Result<_, _>>()?;
        det_logits.push(logits);
        det_objectness.push(slot(&mut g, b.objectness)?);
    }

    // Fixed pairing of ground truths to detections on the clean image.
    let assignment = if gts.is_empty() {
        Vec::new()
    } else {
        let values = forward_values(model, std::slice::from_ref(image))?;
        let dets = head_spec.decode(&values[head_node.index()])?;
        let paired = greedy_match(&dets, gts);
        let mut assignment = Vec::with_capacity(gts.len());
        for det in paired {
            match det {
                Some(i) => assignment.push(i),
                None => {
                    return Err(EncoderError::NotEnoughDetections {
                        dets: head_spec.num_boxes(),
                        gts: gts.len(),
                    })
                }
            }
        }
        assignment
    };

    let mut constraints = Vec::new();
    let mut uses_binarizer = false;
    let class_margins = |g: &mut ComputeGraph,
                             constraints: &mut Vec<MarginConstraint>|
     -> Result<(), EncoderError> {
        for (j, gt) in gts.items().iter().enumerate() {
            let det = assignment[j];
            let true_logit = det_logits[det][gt.class];
            for c in 0..head_spec.num_classes {
                if c == gt.class {
                    continue;
                }
                let node = g.sub(true_logit, det_logits[det][c])?;
                constraints.push(MarginConstraint {
                    name: format!("class_gt{j}_over{c}"),
                    node,
                });
            }
        }
        Ok(())
    };

    match kind {
        AttackKind::Misclassification => {
            class_margins(&mut g, &mut constraints)?;
        }
        AttackKind::Mislocalization => {
            let mut overlap_margins = Vec::with_capacity(gts.len());
            for (j, gt) in gts.items().iter().enumerate() {
                let handle = build_iou_margin(&mut g, det_boxes[assignment[j]], &gt.box_, tau)?;
                overlap_margins.push(handle.margin);
            }
            if overlap_margins.len() == 1 {
                constraints.push(MarginConstraint {
                    name: "iou_gt0".to_string(),
                    node: overlap_margins[0],
                });
            } else {
                // With several objects the attack must sink every pairing, so
                // the property needs only the best overlap to survive.
                let mut best = overlap_margins[0];
                for &m in &overlap_margins[1..] {
                    best = lower_max(&mut g, best, m)?;
                }
                constraints.push(MarginConstraint {
                    name: "iou_best".to_string(),
                    node: best,
                });
            }
            class_margins(&mut g, &mut constraints)?;
        }
        AttackKind::Misdetection => {
            uses_binarizer = true;
            let count = build_count_head(&mut g, &det_objectness, gts.len(), slope)?;
            constraints.push(MarginConstraint {
                name: "count_not_low".to_string(),
                node: count.lower_margin,
            });
            constraints.push(MarginConstraint {
                name: "count_not_high".to_string(),
                node: count.upper_margin,
            });
            if head_spec.num_boxes() > 1 && gts.len() > 1 {
                let matching = build_matching_head(&mut g, &det_boxes, gts, tau, slope)?;
                for (i, &node) in matching.row_margins.iter().enumerate() {
                    constraints.push(MarginConstraint {
                        name: format!("match_det{i}"),
                        node,
                    });
                }
                for (j, &node) in matching.col_margins.iter().enumerate() {
                    constraints.push(MarginConstraint {
                        name: format!("match_gt{j}"),
                        node,
                    });
                }
            }
        }
    }

    for c in &constraints {
        g.set_output(&c.name, c.node)?;
    }

    let region = match &options.pixels {
        Some(pixels) => InputRegion::on_pixels(image.clone(), epsilon, pixels, options.clip01)?,
        None => InputRegion::uniform(image.clone(), epsilon, options.clip01)?,
    };

    Ok(VerificationQuery {
        graph: g,
        region,
        constraints,
        kind,
        timeout,
        head: head_spec.clone(),
        head_node,
        ground_truth: gts.clone(),
        uses_binarizer,
    })
}

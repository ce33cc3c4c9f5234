//! Interval bound propagation: one sound `[lo, hi]` pair per node element.
//!
//! Affine layers use center-radius arithmetic (`|W|` acting on radii), ReLU
//! and Sigmoid map endpoints, products take the four-corner extremes. Every
//! node's interval is widened one ulp outward as a guard against rounding.

use crate::eval::{affine_forward, conv2d_forward, stable_sigmoid};
use crate::graph::{ComputeGraph, NodeId, NodeKind};
use crate::region::{BoxBounds, InputRegion};
use crate::tensor::Tensor;

use super::BoundsError;

/// Elementwise lower/upper tensors, indexed by node id.
#[derive(Debug, Clone)]
pub struct IntervalBounds {
    pub lo: Vec<Tensor>,
    pub hi: Vec<Tensor>,
}

impl IntervalBounds {
    pub fn node(&self, id: NodeId) -> (&Tensor, &Tensor) {
        (&self.lo[id.index()], &self.hi[id.index()])
    }

    /// Scalar interval of a one-element node.
    pub fn scalar(&self, id: NodeId) -> (f64, f64) {
        (self.lo[id.index()].data()[0], self.hi[id.index()].data()[0])
    }
}

pub fn ibp(graph: &ComputeGraph, region: &InputRegion) -> Result<IntervalBounds, BoundsError> {
    ibp_box(graph, &region.bounds())
}

/// Propagate a concrete coordinate box through the graph.
pub fn ibp_box(graph: &ComputeGraph, box_: &BoxBounds) -> Result<IntervalBounds, BoundsError> {
    if graph.inputs().len() != 1 {
        return Err(BoundsError::NotSingleInput(graph.inputs().len()));
    }
    let input_id = graph.inputs()[0];
    let input_numel = graph
        .numel(input_id)
        .ok_or_else(|| BoundsError::Malformed("input node has no shape".to_string()))?;
    if box_.len() != input_numel {
        return Err(BoundsError::RegionSize {
            region: box_.len(),
            input: input_numel,
        });
    }

    let mut lo: Vec<Tensor> = Vec::with_capacity(graph.num_nodes());
    let mut hi: Vec<Tensor> = Vec::with_capacity(graph.num_nodes());
    for node in graph.nodes() {
        let i = node.id.index();
        for &op in &node.inputs {
            if op.index() >= i {
                return Err(BoundsError::Malformed(format!(
                    "node {i} references node {op} that is not earlier in the list"
                )));
            }
        }
        let op = |k: usize| node.inputs[k].index();
        let (mut l, mut h) = match &node.kind {
            NodeKind::Input { shape } => (
                Tensor::new(shape.clone(), box_.lo.clone())
                    .map_err(|e| BoundsError::Malformed(e.to_string()))?,
                Tensor::new(shape.clone(), box_.hi.clone())
                    .map_err(|e| BoundsError::Malformed(e.to_string()))?,
            ),
            NodeKind::Const { value } => (value.clone(), value.clone()),
            NodeKind::Affine { weight, bias } => {
                let (c, r) = center_radius(&lo[op(0)], &hi[op(0)]);
                let out_c = affine_forward(weight, bias, &c);
                let zero_bias = Tensor::zeros(vec![weight.shape()[0]]);
                let out_r = affine_forward(&weight.map(f64::abs), &zero_bias, &r);
                spread(&out_c, &out_r)
            }
            NodeKind::Conv2D {
                kernel,
                bias,
                stride,
                padding,
            } => {
                let (c, r) = center_radius(&lo[op(0)], &hi[op(0)]);
                let out_c = conv2d_forward(kernel, bias, *stride, *padding, &c);
                let zero_bias = Tensor::zeros(vec![kernel.shape()[0]]);
                let out_r = conv2d_forward(&kernel.map(f64::abs), &zero_bias, *stride, *padding, &r);
                spread(&out_c, &out_r)
            }
            NodeKind::ReLU => (
                lo[op(0)].map(|v| v.max(0.0)),
                hi[op(0)].map(|v| v.max(0.0)),
            ),
            NodeKind::Sigmoid { slope } => {
                let s = *slope;
                (
                    lo[op(0)].map(|v| stable_sigmoid(s, v)),
                    hi[op(0)].map(|v| stable_sigmoid(s, v)),
                )
            }
            NodeKind::Add => (
                lo[op(0)].zip(&lo[op(1)], |a, b| a + b).expect("same shape"),
                hi[op(0)].zip(&hi[op(1)], |a, b| a + b).expect("same shape"),
            ),
            NodeKind::Sub => (
                lo[op(0)].zip(&hi[op(1)], |a, b| a - b).expect("same shape"),
                hi[op(0)].zip(&lo[op(1)], |a, b| a - b).expect("same shape"),
            ),
            NodeKind::MulElementwise => {
                let (al, ah) = (lo[op(0)].data(), hi[op(0)].data());
                let (bl, bh) = (lo[op(1)].data(), hi[op(1)].data());
                let mut pl = Vec::with_capacity(al.len());
                let mut ph = Vec::with_capacity(al.len());
                for k in 0..al.len() {
                    let corners = [
                        al[k] * bl[k],
                        al[k] * bh[k],
                        ah[k] * bl[k],
                        ah[k] * bh[k],
                    ];
                    pl.push(corners.iter().copied().fold(f64::INFINITY, f64::min));
                    ph.push(corners.iter().copied().fold(f64::NEG_INFINITY, f64::max));
                }
                let shape = lo[op(0)].shape().to_vec();
                (
                    Tensor::new(shape.clone(), pl).expect("shape fits"),
                    Tensor::new(shape, ph).expect("shape fits"),
                )
            }
            NodeKind::SumReduce => (
                Tensor::scalar(lo[op(0)].data().iter().sum()),
                Tensor::scalar(hi[op(0)].data().iter().sum()),
            ),
            NodeKind::Concat => {
                let mut cl = Vec::new();
                let mut ch = Vec::new();
                for &opid in &node.inputs {
                    cl.extend_from_slice(lo[opid.index()].data());
                    ch.extend_from_slice(hi[opid.index()].data());
                }
                (Tensor::vector(cl), Tensor::vector(ch))
            }
            NodeKind::Slice { start, end } => (
                Tensor::vector(lo[op(0)].data()[*start..*end].to_vec()),
                Tensor::vector(hi[op(0)].data()[*start..*end].to_vec()),
            ),
        };
        l = l.map(f64::next_down);
        h = h.map(f64::next_up);
        lo.push(l);
        hi.push(h);
    }
    Ok(IntervalBounds { lo, hi })
}

fn center_radius(lo: &Tensor, hi: &Tensor) -> (Tensor, Tensor) {
    let c = lo.zip(hi, |l, h| 0.5 * (l + h)).expect("same shape");
    let r = lo.zip(hi, |l, h| 0.5 * (h - l)).expect("same shape");
    (c, r)
}

fn spread(center: &Tensor, radius: &Tensor) -> (Tensor, Tensor) {
    (
        center.zip(radius, |c, r| c - r).expect("same shape"),
        center.zip(radius, |c, r| c + r).expect("same shape"),
    )
}

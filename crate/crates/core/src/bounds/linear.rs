//! Backward linear bounds: affine lower/upper envelopes of one scalar node
//! as functions of the graph input.
//!
//! Starting from coefficient 1 on the target, coefficients are pushed
//! backward through the node list. Affine and convolution layers substitute
//! exactly; ReLU, Sigmoid, and products substitute their linear envelopes,
//! picking the lower or upper envelope per element according to the
//! coefficient sign. Concretizing the resulting affine functions over the
//! region gives output bounds that are usually tighter than plain interval
//! propagation.

use std::collections::BTreeMap;

use crate::eval::{sigmoid_derivative, stable_sigmoid};
use crate::graph::{ComputeGraph, Node, NodeId, NodeKind};
use crate::region::BoxBounds;

use super::{BoundsError, IntervalBounds};

/// Intervals narrower than this are treated as a constant value.
const DEGENERATE_WIDTH: f64 = 1e-12;

/// Affine envelopes of one scalar output over the flattened graph input:
/// `lower_offset + lower_coeffs . x <= target(x) <= upper_offset + upper_coeffs . x`.
#[derive(Debug, Clone)]
pub struct LinearBoundsEntry {
    pub target: NodeId,
    pub lower_coeffs: Vec<f64>,
    pub lower_offset: f64,
    pub upper_coeffs: Vec<f64>,
    pub upper_offset: f64,
}

/// A linear expression over not-yet-substituted nodes plus a constant.
struct Expr {
    coeffs: BTreeMap<usize, Vec<f64>>,
    offset: f64,
}

impl Expr {
    fn seed(node: usize) -> Self {
        let mut coeffs = BTreeMap::new();
        coeffs.insert(node, vec![1.0]);
        Self { coeffs, offset: 0.0 }
    }

    fn merge(&mut self, node: usize, numel: usize, contrib: &[f64]) {
        let entry = self.coeffs.entry(node).or_insert_with(|| vec![0.0; numel]);
        for (e, c) in entry.iter_mut().zip(contrib) {
            *e += c;
        }
    }
}

/// Compute affine lower/upper envelopes of a scalar `target` node over the
/// graph input, using `ivals` (from [`super::ibp_box`]) for the relaxations.
pub fn backward_linear_bounds(
    graph: &ComputeGraph,
    ivals: &IntervalBounds,
    target: NodeId,
) -> Result<LinearBoundsEntry, BoundsError> {
    if graph.inputs().len() != 1 {
        return Err(BoundsError::NotSingleInput(graph.inputs().len()));
    }
    let input_idx = graph.inputs()[0].index();
    let input_numel = graph
        .numel(graph.inputs()[0])
        .ok_or_else(|| BoundsError::Malformed("input node has no shape".to_string()))?;
    let t = target.index();
    if t >= graph.num_nodes() {
        return Err(BoundsError::UnknownTarget(t));
    }
    match graph.numel(target) {
        Some(1) => {}
        Some(numel) => return Err(BoundsError::NonScalarTarget { node: t, numel }),
        None => return Err(BoundsError::Malformed(format!("node {t} has no shape"))),
    }

    let mut lower = Expr::seed(t);
    let mut upper = Expr::seed(t);
    let mut lower_input = vec![0.0; input_numel];
    let mut upper_input = vec![0.0; input_numel];

    for i in (0..=t).rev() {
        let cl = lower.coeffs.remove(&i);
        let cu = upper.coeffs.remove(&i);
        if cl.is_none() && cu.is_none() {
            continue;
        }
        let node = &graph.nodes()[i];
        if matches!(node.kind, NodeKind::Input { .. }) {
            if i != input_idx {
                return Err(BoundsError::Malformed(format!(
                    "input node {i} is not the declared graph input"
                )));
            }
            if let Some(c) = cl {
                for (acc, v) in lower_input.iter_mut().zip(&c) {
                    *acc += v;
                }
            }
            if let Some(c) = cu {
                for (acc, v) in upper_input.iter_mut().zip(&c) {
                    *acc += v;
                }
            }
            continue;
        }
        if let Some(c) = cl {
            substitute(graph, ivals, node, &c, true, &mut lower)?;
        }
        if let Some(c) = cu {
            substitute(graph, ivals, node, &c, false, &mut upper)?;
        }
    }

    Ok(LinearBoundsEntry {
        target,
        lower_coeffs: lower_input,
        lower_offset: lower.offset,
        upper_coeffs: upper_input,
        upper_offset: upper.offset,
    })
}

/// Evaluate the envelopes' extremes over a coordinate box, outward-rounded.
pub fn concretize(entry: &LinearBoundsEntry, box_: &BoxBounds) -> (f64, f64) {
    let mut lo = entry.lower_offset;
    let mut hi = entry.upper_offset;
    for i in 0..box_.len() {
        let c = 0.5 * (box_.lo[i] + box_.hi[i]);
        let r = 0.5 * (box_.hi[i] - box_.lo[i]);
        lo += entry.lower_coeffs[i] * c - entry.lower_coeffs[i].abs() * r;
        hi += entry.upper_coeffs[i] * c + entry.upper_coeffs[i].abs() * r;
    }
    (lo.next_down(), hi.next_up())
}

/// Replace `node`'s coefficients by contributions on its operands, choosing
/// per-element envelopes by coefficient sign when the node is nonlinear.
fn substitute(
    graph: &ComputeGraph,
    ivals: &IntervalBounds,
    node: &Node,
    coeff: &[f64],
    is_lower: bool,
    expr: &mut Expr,
) -> Result<(), BoundsError> {
    let op_numel = |k: usize| -> usize { ivals.lo[node.inputs[k].index()].numel() };
    match &node.kind {
        NodeKind::Input { .. } => unreachable!("handled by the caller"),
        NodeKind::Const { value } => {
            for (w, v) in coeff.iter().zip(value.data()) {
                expr.offset += w * v;
            }
        }
        NodeKind::Affine { weight, bias } => {
            let (out, inn) = (weight.shape()[0], weight.shape()[1]);
            let wd = weight.data();
            let mut contrib = vec![0.0; inn];
            for o in 0..out {
                let w = coeff[o];
                if w == 0.0 {
                    continue;
                }
                expr.offset += w * bias.data()[o];
                for j in 0..inn {
                    contrib[j] += w * wd[o * inn + j];
                }
            }
            expr.merge(node.inputs[0].index(), inn, &contrib);
        }
        NodeKind::Conv2D {
            kernel,
            bias,
            stride,
            padding,
        } => {
            let (co, ci, kh, kw) = (
                kernel.shape()[0],
                kernel.shape()[1],
                kernel.shape()[2],
                kernel.shape()[3],
            );
            let in_shape = graph
                .shape(node.inputs[0])
                .ok_or_else(|| BoundsError::Malformed("conv operand has no shape".to_string()))?;
            let (h, w_) = (in_shape[1], in_shape[2]);
            let out_shape = graph
                .shape(node.id)
                .ok_or_else(|| BoundsError::Malformed("conv node has no shape".to_string()))?;
            let (oh, ow) = (out_shape[1], out_shape[2]);
            let kd = kernel.data();
            let mut contrib = vec![0.0; ci * h * w_];
            for o in 0..co {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let c = coeff[(o * oh + oy) * ow + ox];
                        if c == 0.0 {
                            continue;
                        }
                        expr.offset += c * bias.data()[o];
                        for cin in 0..ci {
                            for ky in 0..kh {
                                let iy = (oy * stride + ky) as isize - *padding as isize;
                                if iy < 0 || iy as usize >= h {
                                    continue;
                                }
                                for kx in 0..kw {
                                    let ix = (ox * stride + kx) as isize - *padding as isize;
                                    if ix < 0 || ix as usize >= w_ {
                                        continue;
                                    }
                                    contrib[(cin * h + iy as usize) * w_ + ix as usize] +=
                                        c * kd[((o * ci + cin) * kh + ky) * kw + kx];
                                }
                            }
                        }
                    }
                }
            }
            expr.merge(node.inputs[0].index(), ci * h * w_, &contrib);
        }
        NodeKind::ReLU => {
            let op = node.inputs[0].index();
            let (l, u) = (ivals.lo[op].data(), ivals.hi[op].data());
            let numel = op_numel(0);
            let mut contrib = vec![0.0; numel];
            for k in 0..numel {
                let w = coeff[k];
                if w == 0.0 {
                    continue;
                }
                let (low_line, up_line) = relu_lines(l[k], u[k]);
                let (a, b) = if (w >= 0.0) == is_lower { low_line } else { up_line };
                contrib[k] = w * a;
                expr.offset += w * b;
            }
            expr.merge(op, numel, &contrib);
        }
        NodeKind::Sigmoid { slope } => {
            let op = node.inputs[0].index();
            let (l, u) = (ivals.lo[op].data(), ivals.hi[op].data());
            let numel = op_numel(0);
            let mut contrib = vec![0.0; numel];
            for k in 0..numel {
                let w = coeff[k];
                if w == 0.0 {
                    continue;
                }
                let (low_line, up_line) = sigmoid_lines(*slope, l[k], u[k]);
                let (a, b) = if (w >= 0.0) == is_lower { low_line } else { up_line };
                contrib[k] = w * a;
                expr.offset += w * b;
            }
            expr.merge(op, numel, &contrib);
        }
        NodeKind::Add => {
            expr.merge(node.inputs[0].index(), op_numel(0), coeff);
            expr.merge(node.inputs[1].index(), op_numel(1), coeff);
        }
        NodeKind::Sub => {
            expr.merge(node.inputs[0].index(), op_numel(0), coeff);
            let negated: Vec<f64> = coeff.iter().map(|&c| -c).collect();
            expr.merge(node.inputs[1].index(), op_numel(1), &negated);
        }
        NodeKind::MulElementwise => {
            let (a, b) = (node.inputs[0].index(), node.inputs[1].index());
            let (xl, xu) = (ivals.lo[a].data(), ivals.hi[a].data());
            let (yl, yu) = (ivals.lo[b].data(), ivals.hi[b].data());
            let numel = op_numel(0);
            let mut contrib_a = vec![0.0; numel];
            let mut contrib_b = vec![0.0; numel];
            for k in 0..numel {
                let w = coeff[k];
                if w == 0.0 {
                    continue;
                }
                let (low_plane, up_plane) = mccormick_planes(xl[k], xu[k], yl[k], yu[k]);
                let (ax, ay, c0) = if (w >= 0.0) == is_lower { low_plane } else { up_plane };
                contrib_a[k] = w * ax;
                contrib_b[k] = w * ay;
                expr.offset += w * c0;
            }
            expr.merge(a, numel, &contrib_a);
            expr.merge(b, numel, &contrib_b);
        }
        NodeKind::SumReduce => {
            let numel = op_numel(0);
            let contrib = vec![coeff[0]; numel];
            expr.merge(node.inputs[0].index(), numel, &contrib);
        }
        NodeKind::Concat => {
            let mut offset = 0;
            for &opid in &node.inputs {
                let numel = ivals.lo[opid.index()].numel();
                expr.merge(opid.index(), numel, &coeff[offset..offset + numel]);
                offset += numel;
            }
        }
        NodeKind::Slice { start, end } => {
            let numel = op_numel(0);
            let mut contrib = vec![0.0; numel];
            contrib[*start..*end].copy_from_slice(coeff);
            expr.merge(node.inputs[0].index(), numel, &contrib);
        }
    }
    Ok(())
}

/// Lower and upper lines `(a, b)` with `a*x + b` bounding `ReLU(x)` on `[l, u]`.
fn relu_lines(l: f64, u: f64) -> ((f64, f64), (f64, f64)) {
    if u <= 0.0 {
        return ((0.0, 0.0), (0.0, 0.0));
    }
    if l >= 0.0 {
        return ((1.0, 0.0), (1.0, 0.0));
    }
    if !(u - l).is_finite() || u - l < DEGENERATE_WIDTH {
        return ((0.0, 0.0), (0.0, u.max(0.0)));
    }
    let s = u / (u - l);
    let alpha = if u >= -l { 1.0 } else { 0.0 };
    ((alpha, 0.0), (s, -s * l))
}

/// Lower and upper lines bounding the sigmoid on `[l, u]`.
///
/// One-sided intervals use the chord on the curve's outer side and the
/// midpoint tangent on the inner side; both candidates are checked at 17
/// sample points and fall back to the constant envelope `[S(l), S(u)]` if
/// any sample flags them. Intervals straddling the inflection at 0 use the
/// constant envelope directly.
fn sigmoid_lines(slope: f64, l: f64, u: f64) -> ((f64, f64), (f64, f64)) {
    let sl = stable_sigmoid(slope, l);
    let su = stable_sigmoid(slope, u);
    let constant = ((0.0, sl), (0.0, su));
    if !(u - l).is_finite() || u - l < DEGENERATE_WIDTH || (l < 0.0 && u > 0.0) {
        return constant;
    }
    let chord_a = (su - sl) / (u - l);
    let chord = (chord_a, sl - chord_a * l);
    let m = 0.5 * (l + u);
    let tangent_a = sigmoid_derivative(slope, m);
    let tangent = (tangent_a, stable_sigmoid(slope, m) - tangent_a * m);
    // Convex on [l, u <= 0]: tangent below, chord above. Concave mirrors it.
    let (mut low, mut high) = if u <= 0.0 { (tangent, chord) } else { (chord, tangent) };
    if !line_sound(slope, l, u, low, true) {
        low = (0.0, sl);
    }
    if !line_sound(slope, l, u, high, false) {
        high = (0.0, su);
    }
    (low, high)
}

fn line_sound(slope: f64, l: f64, u: f64, (a, b): (f64, f64), is_lower: bool) -> bool {
    for k in 0..17 {
        let x = l + (u - l) * (k as f64) / 16.0;
        let s = stable_sigmoid(slope, x);
        let v = a * x + b;
        if is_lower && v > s {
            return false;
        }
        if !is_lower && v < s {
            return false;
        }
    }
    true
}

type Plane = (f64, f64, f64);

/// The tighter-at-midpoint lower and upper McCormick planes of `x*y` on
/// `[xl,xu] x [yl,yu]`: `(ax, ay, c)` meaning `ax*x + ay*y + c`.
fn mccormick_planes(xl: f64, xu: f64, yl: f64, yu: f64) -> (Plane, Plane) {
    let low1 = (yl, xl, -xl * yl);
    let low2 = (yu, xu, -xu * yu);
    let up1 = (yu, xl, -xl * yu);
    let up2 = (yl, xu, -xu * yl);
    let xc = 0.5 * (xl + xu);
    let yc = 0.5 * (yl + yu);
    let eval = |p: Plane| p.0 * xc + p.1 * yc + p.2;
    let lower = if eval(low1) >= eval(low2) { low1 } else { low2 };
    let upper = if eval(up1) <= eval(up2) { up1 } else { up2 };
    (lower, upper)
}

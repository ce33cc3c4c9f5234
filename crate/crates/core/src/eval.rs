//! Forward evaluation and reverse-mode differentiation of compute graphs.
//!
//! Both are pure functions of `(graph, input)`: no caches, no mutation, so
//! evaluations of a shared graph can run concurrently. Node order is the
//! topological order the graph was built in.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::graph::{ComputeGraph, NodeId, NodeKind};
use crate::tensor::Tensor;

/// Smallest value a sigmoid node may output.
pub const SIGMOID_MIN: f64 = 1e-300;
/// Largest value a sigmoid node may output (the next representable values
/// below 1.0 are kept so outputs stay strictly inside (0, 1)).
pub const SIGMOID_MAX: f64 = 1.0 - 1e-15;

/// Numerically stable `1 / (1 + exp(-slope * x))`, clamped away from 0 and 1.
///
/// The two-branch form never exponentiates a positive argument, so it cannot
/// overflow; the clamp keeps extreme saturation from rounding to exactly 0
/// or 1.
pub fn stable_sigmoid(slope: f64, x: f64) -> f64 {
    let t = slope * x;
    let s = if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    };
    s.clamp(SIGMOID_MIN, SIGMOID_MAX)
}

/// Derivative of [`stable_sigmoid`] with respect to `x`.
pub fn sigmoid_derivative(slope: f64, x: f64) -> f64 {
    let s = stable_sigmoid(slope, x);
    slope * s * (1.0 - s)
}

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("graph declares {expected} input(s), got {actual}")]
    InputCount { expected: usize, actual: usize },
    #[error("input {index} has shape {actual:?}, graph declares {expected:?}")]
    InputShape {
        index: usize,
        expected: Vec<usize>,
        actual: Vec<usize>,
    },
    #[error("non-finite value produced by node {node} ({tag})")]
    NonFinite { node: usize, tag: &'static str },
    #[error("gradient output node {node} has {numel} elements, expected a scalar")]
    NonScalarOutput { node: usize, numel: usize },
    #[error("malformed graph: {0}")]
    Malformed(String),
}

/// Evaluate a single-input graph, returning its named outputs.
pub fn forward(graph: &ComputeGraph, input: &Tensor) -> Result<BTreeMap<String, Tensor>, EvalError> {
    let values = forward_values(graph, std::slice::from_ref(input))?;
    let mut out = BTreeMap::new();
    for (name, id) in graph.outputs() {
        out.insert(name.clone(), values[id.index()].clone());
    }
    Ok(out)
}

/// Evaluate every node and return the full value list, indexed by node id.
///
/// `inputs` supplies one tensor per declared graph input, in declaration
/// order. Every node value is checked finite; the first offender aborts the
/// evaluation.
pub fn forward_values(graph: &ComputeGraph, inputs: &[Tensor]) -> Result<Vec<Tensor>, EvalError> {
    if inputs.len() != graph.inputs().len() {
        return Err(EvalError::InputCount {
            expected: graph.inputs().len(),
            actual: inputs.len(),
        });
    }
    for (index, (&id, tensor)) in graph.inputs().iter().zip(inputs).enumerate() {
        let declared = graph
            .shape(id)
            .ok_or_else(|| EvalError::Malformed(format!("input node {id} has no shape")))?;
        if tensor.shape() != declared {
            return Err(EvalError::InputShape {
                index,
                expected: declared.to_vec(),
                actual: tensor.shape().to_vec(),
            });
        }
    }

    let input_slot: BTreeMap<usize, usize> = graph
        .inputs()
        .iter()
        .enumerate()
        .map(|(slot, id)| (id.index(), slot))
        .collect();

    let mut values: Vec<Tensor> = Vec::with_capacity(graph.num_nodes());
    for node in graph.nodes() {
        let i = node.id.index();
        for &op in &node.inputs {
            if op.index() >= i {
                return Err(EvalError::Malformed(format!(
                    "node {i} references node {op} that is not earlier in the list"
                )));
            }
        }
        let value = match &node.kind {
            NodeKind::Input { .. } => {
                let slot = input_slot.get(&i).ok_or_else(|| {
                    EvalError::Malformed(format!("input node {i} is not declared as a graph input"))
                })?;
                inputs[*slot].clone()
            }
            NodeKind::Const { value } => value.clone(),
            NodeKind::Affine { weight, bias } => affine_forward(weight, bias, &values[node.inputs[0].index()]),
            NodeKind::Conv2D {
                kernel,
                bias,
                stride,
                padding,
            } => conv2d_forward(kernel, bias, *stride, *padding, &values[node.inputs[0].index()]),
            NodeKind::ReLU => values[node.inputs[0].index()].map(|v| v.max(0.0)),
            NodeKind::Sigmoid { slope } => {
                let s = *slope;
                values[node.inputs[0].index()].map(|v| stable_sigmoid(s, v))
            }
            NodeKind::Add => values[node.inputs[0].index()]
                .zip(&values[node.inputs[1].index()], |a, b| a + b)
                .ok_or_else(|| EvalError::Malformed(format!("node {i}: operand shapes differ")))?,
            NodeKind::Sub => values[node.inputs[0].index()]
                .zip(&values[node.inputs[1].index()], |a, b| a - b)
                .ok_or_else(|| EvalError::Malformed(format!("node {i}: operand shapes differ")))?,
            NodeKind::MulElementwise => values[node.inputs[0].index()]
                .zip(&values[node.inputs[1].index()], |a, b| a * b)
                .ok_or_else(|| EvalError::Malformed(format!("node {i}: operand shapes differ")))?,
            NodeKind::SumReduce => {
                Tensor::scalar(values[node.inputs[0].index()].data().iter().sum())
            }
            NodeKind::Concat => {
                let mut data = Vec::new();
                for &op in &node.inputs {
                    data.extend_from_slice(values[op.index()].data());
                }
                Tensor::vector(data)
            }
            NodeKind::Slice { start, end } => {
                let src = values[node.inputs[0].index()].data();
                if *end > src.len() || start >= end {
                    return Err(EvalError::Malformed(format!(
                        "node {i}: slice [{start}, {end}) out of range for {} elements",
                        src.len()
                    )));
                }
                Tensor::vector(src[*start..*end].to_vec())
            }
        };
        if !value.all_finite() {
            return Err(EvalError::NonFinite {
                node: i,
                tag: node.kind.tag(),
            });
        }
        values.push(value);
    }
    Ok(values)
}

/// Gradient of a scalar node with respect to the graph's single input.
///
/// ReLU contributes subgradient 0 at exactly 0.
pub fn gradient(graph: &ComputeGraph, output: NodeId, input: &Tensor) -> Result<Tensor, EvalError> {
    if graph.inputs().len() != 1 {
        return Err(EvalError::Malformed(format!(
            "gradient needs a single-input graph, this one declares {}",
            graph.inputs().len()
        )));
    }
    let values = forward_values(graph, std::slice::from_ref(input))?;
    let numel = values
        .get(output.index())
        .ok_or_else(|| EvalError::Malformed(format!("gradient output node {output} does not exist")))?
        .numel();
    if numel != 1 {
        return Err(EvalError::NonScalarOutput {
            node: output.index(),
            numel,
        });
    }
    let grads = backward(graph, &values, output, &Tensor::scalar(1.0))?;
    Ok(grads.input_grads.into_iter().next().expect("one input"))
}

/// Gradients of Affine weights and bias (or Conv2D kernel and bias) at one node.
#[derive(Debug, Clone)]
pub struct ParamGrads {
    pub weight: Tensor,
    pub bias: Tensor,
}

/// Everything reverse-mode accumulation produces from one seed.
#[derive(Debug, Clone)]
pub struct Gradients {
    /// One tensor per declared graph input, in declaration order.
    pub input_grads: Vec<Tensor>,
    /// Keyed by node index; present for every Affine and Conv2D node the
    /// seed reaches.
    pub param_grads: BTreeMap<usize, ParamGrads>,
}

/// Reverse-mode sweep from an arbitrary seed adjoint.
///
/// `values` must come from [`forward_values`] on the same graph. The seed
/// tensor's shape must match the seed node's value. This is the full
/// vector-Jacobian product, so callers may seed with any adjoint (the
/// trainer seeds loss gradients directly on head nodes).
pub fn backward(
    graph: &ComputeGraph,
    values: &[Tensor],
    seed_node: NodeId,
    seed: &Tensor,
) -> Result<Gradients, EvalError> {
    if values.len() != graph.num_nodes() {
        return Err(EvalError::Malformed(format!(
            "value list has {} entries for {} nodes",
            values.len(),
            graph.num_nodes()
        )));
    }
    let seed_idx = seed_node.index();
    if seed_idx >= graph.num_nodes() {
        return Err(EvalError::Malformed(format!(
            "seed node {seed_node} does not exist"
        )));
    }
    if seed.shape() != values[seed_idx].shape() {
        return Err(EvalError::Malformed(format!(
            "seed shape {:?} does not match node {} shape {:?}",
            seed.shape(),
            seed_node,
            values[seed_idx].shape()
        )));
    }

    let mut adjoints: Vec<Option<Tensor>> = vec![None; graph.num_nodes()];
    adjoints[seed_idx] = Some(seed.clone());
    let mut param_grads = BTreeMap::new();

    for i in (0..=seed_idx).rev() {
        let adj = match adjoints[i].take() {
            Some(a) => a,
            None => continue,
        };
        let node = &graph.nodes()[i];
        match &node.kind {
            NodeKind::Input { .. } | NodeKind::Const { .. } => {
                if matches!(node.kind, NodeKind::Input { .. }) {
                    adjoints[i] = Some(adj); // collected below
                }
            }
            NodeKind::Affine { weight, bias: _ } => {
                let op = node.inputs[0].index();
                let x = values[op].data();
                let (out, inn) = (weight.shape()[0], weight.shape()[1]);
                let a = adj.data();
                let mut dw = vec![0.0; out * inn];
                let mut dx = vec![0.0; inn];
                for o in 0..out {
                    for j in 0..inn {
                        dw[o * inn + j] = a[o] * x[j];
                        dx[j] += weight.data()[o * inn + j] * a[o];
                    }
                }
                param_grads.insert(
                    i,
                    ParamGrads {
                        weight: Tensor::new(vec![out, inn], dw).expect("shape fits"),
                        bias: Tensor::vector(a.to_vec()),
                    },
                );
                accumulate(
                    &mut adjoints[op],
                    Tensor::new(values[op].shape().to_vec(), dx).expect("shape fits"),
                );
            }
            NodeKind::Conv2D {
                kernel,
                bias: _,
                stride,
                padding,
            } => {
                let op = node.inputs[0].index();
                let (dx, dk, db) = conv2d_backward(kernel, *stride, *padding, &values[op], &adj);
                param_grads.insert(i, ParamGrads { weight: dk, bias: db });
                accumulate(&mut adjoints[op], dx);
            }
            NodeKind::ReLU => {
                let op = node.inputs[0].index();
                let g = values[op]
                    .zip(&adj, |x, a| if x > 0.0 { a } else { 0.0 })
                    .expect("same shape");
                accumulate(&mut adjoints[op], g);
            }
            NodeKind::Sigmoid { slope } => {
                let op = node.inputs[0].index();
                let s = *slope;
                let g = values[op]
                    .zip(&adj, |x, a| a * sigmoid_derivative(s, x))
                    .expect("same shape");
                accumulate(&mut adjoints[op], g);
            }
            NodeKind::Add => {
                let (a, b) = (node.inputs[0].index(), node.inputs[1].index());
                accumulate(&mut adjoints[a], adj.clone());
                accumulate(&mut adjoints[b], adj);
            }
            NodeKind::Sub => {
                let (a, b) = (node.inputs[0].index(), node.inputs[1].index());
                accumulate(&mut adjoints[a], adj.clone());
                accumulate(&mut adjoints[b], adj.map(|v| -v));
            }
            NodeKind::MulElementwise => {
                let (a, b) = (node.inputs[0].index(), node.inputs[1].index());
                let ga = adj.zip(&values[b], |v, other| v * other).expect("same shape");
                let gb = adj.zip(&values[a], |v, other| v * other).expect("same shape");
                accumulate(&mut adjoints[a], ga);
                accumulate(&mut adjoints[b], gb);
            }
            NodeKind::SumReduce => {
                let op = node.inputs[0].index();
                let v = adj.data()[0];
                accumulate(
                    &mut adjoints[op],
                    Tensor::filled(values[op].shape().to_vec(), v),
                );
            }
            NodeKind::Concat => {
                let mut offset = 0;
                for &opid in &node.inputs {
                    let op = opid.index();
                    let n = values[op].numel();
                    let part = adj.data()[offset..offset + n].to_vec();
                    accumulate(
                        &mut adjoints[op],
                        Tensor::new(values[op].shape().to_vec(), part).expect("shape fits"),
                    );
                    offset += n;
                }
            }
            NodeKind::Slice { start, end } => {
                let op = node.inputs[0].index();
                let mut data = vec![0.0; values[op].numel()];
                data[*start..*end].copy_from_slice(adj.data());
                accumulate(
                    &mut adjoints[op],
                    Tensor::new(values[op].shape().to_vec(), data).expect("shape fits"),
                );
            }
        }
    }

    let input_grads = graph
        .inputs()
        .iter()
        .map(|&id| {
            adjoints[id.index()].clone().unwrap_or_else(|| {
                Tensor::zeros(
                    graph
                        .shape(id)
                        .expect("declared inputs have shapes")
                        .to_vec(),
                )
            })
        })
        .collect();
    Ok(Gradients {
        input_grads,
        param_grads,
    })
}

fn accumulate(slot: &mut Option<Tensor>, value: Tensor) {
    match slot {
        Some(existing) => {
            *existing = existing.zip(&value, |a, b| a + b).expect("same shape");
        }
        None => *slot = Some(value),
    }
}

pub(crate) fn affine_forward(weight: &Tensor, bias: &Tensor, x: &Tensor) -> Tensor {
    let (out, inn) = (weight.shape()[0], weight.shape()[1]);
    let xd = x.data();
    let wd = weight.data();
    let mut y = bias.data().to_vec();
    for (o, yo) in y.iter_mut().enumerate().take(out) {
        let row = &wd[o * inn..(o + 1) * inn];
        let mut acc = 0.0;
        for (wv, xv) in row.iter().zip(xd) {
            acc += wv * xv;
        }
        *yo += acc;
    }
    Tensor::vector(y)
}

pub(crate) fn conv2d_forward(kernel: &Tensor, bias: &Tensor, stride: usize, padding: usize, x: &Tensor) -> Tensor {
    let (co, ci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let oh = (h + 2 * padding - kh) / stride + 1;
    let ow = (w + 2 * padding - kw) / stride + 1;
    let xd = x.data();
    let kd = kernel.data();
    let mut out = vec![0.0; co * oh * ow];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let mut acc = bias.data()[o];
                for c in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            acc += xd[(c * h + iy as usize) * w + ix as usize]
                                * kd[((o * ci + c) * kh + ky) * kw + kx];
                        }
                    }
                }
                out[(o * oh + oy) * ow + ox] = acc;
            }
        }
    }
    Tensor::new(vec![co, oh, ow], out).expect("shape fits")
}

/// Adjoints of a convolution: input gradient, kernel gradient, bias gradient.
fn conv2d_backward(
    kernel: &Tensor,
    stride: usize,
    padding: usize,
    x: &Tensor,
    adj: &Tensor,
) -> (Tensor, Tensor, Tensor) {
    let (co, ci, kh, kw) = (
        kernel.shape()[0],
        kernel.shape()[1],
        kernel.shape()[2],
        kernel.shape()[3],
    );
    let (h, w) = (x.shape()[1], x.shape()[2]);
    let (oh, ow) = (adj.shape()[1], adj.shape()[2]);
    let xd = x.data();
    let kd = kernel.data();
    let ad = adj.data();
    let mut dx = vec![0.0; ci * h * w];
    let mut dk = vec![0.0; co * ci * kh * kw];
    let mut db = vec![0.0; co];
    for o in 0..co {
        for oy in 0..oh {
            for ox in 0..ow {
                let a = ad[(o * oh + oy) * ow + ox];
                db[o] += a;
                for c in 0..ci {
                    for ky in 0..kh {
                        let iy = (oy * stride + ky) as isize - padding as isize;
                        if iy < 0 || iy as usize >= h {
                            continue;
                        }
                        for kx in 0..kw {
                            let ix = (ox * stride + kx) as isize - padding as isize;
                            if ix < 0 || ix as usize >= w {
                                continue;
                            }
                            let xi = (c * h + iy as usize) * w + ix as usize;
                            dx[xi] += a * kd[((o * ci + c) * kh + ky) * kw + kx];
                            dk[((o * ci + c) * kh + ky) * kw + kx] += a * xd[xi];
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(vec![ci, h, w], dx).expect("shape fits"),
        Tensor::new(vec![co, ci, kh, kw], dk).expect("shape fits"),
        Tensor::vector(db),
    )
}

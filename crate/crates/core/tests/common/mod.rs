//! Shared helpers for the integration suites: seeded random graphs, box
//! sampling, and finite-difference gradients.

#![allow(dead_code)]

use odverify_core::{ComputeGraph, NodeId, NodeKind, Tensor};
use rand::Rng;
use rand_chacha::ChaCha20Rng;

/// A randomly wired single-input graph with a scalar output.
pub struct RandomScalarGraph {
    pub graph: ComputeGraph,
    pub dims: usize,
    pub output: NodeId,
}

pub fn random_tensor(rng: &mut ChaCha20Rng, shape: Vec<usize>, scale: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * scale).collect();
    Tensor::new(shape, data).unwrap()
}

/// Random chain of the analyzable node kinds; always contains at least one
/// elementwise product and one sigmoid.
pub fn random_scalar_graph(rng: &mut ChaCha20Rng) -> RandomScalarGraph {
    let dims = rng.gen_range(3..=6);
    let mut g = ComputeGraph::new();
    let x = g.input(vec![dims]);
    let mut cur = x;
    let mut width = dims;
    let mut used_mul = false;
    let mut used_sigmoid = false;
    for _ in 0..rng.gen_range(3..=6) {
        match rng.gen_range(0..8) {
            0 | 1 => {
                let out = rng.gen_range(2..=6);
                let scale = (1.0 / width as f64).sqrt();
                let w = random_tensor(rng, vec![out, width], scale);
                let b = random_tensor(rng, vec![out], 0.2);
                cur = g.affine(cur, w, b).unwrap();
                width = out;
            }
            2 => cur = g.relu(cur).unwrap(),
            3 => {
                let slope = [0.5, 1.0, 2.0, 5.0][rng.gen_range(0..4)];
                cur = g.sigmoid(cur, slope).unwrap();
                used_sigmoid = true;
            }
            4 => {
                let c = g.constant(random_tensor(rng, vec![width], 1.0));
                cur = g.mul(cur, c).unwrap();
                used_mul = true;
            }
            5 => {
                cur = g.mul(cur, cur).unwrap();
                used_mul = true;
            }
            6 => {
                let c = g.constant(random_tensor(rng, vec![width], 0.5));
                cur = if rng.gen::<bool>() {
                    g.add(cur, c).unwrap()
                } else {
                    g.sub(cur, c).unwrap()
                };
            }
            7 => {
                if width >= 3 {
                    let start = rng.gen_range(0..width - 1);
                    let end = rng.gen_range(start + 1..=width);
                    cur = g.slice(cur, start, end).unwrap();
                    width = end - start;
                } else {
                    let c = g.constant(random_tensor(rng, vec![2], 0.5));
                    cur = g.concat(&[cur, c]).unwrap();
                    width += 2;
                }
            }
            _ => unreachable!(),
        }
    }
    if !used_sigmoid {
        cur = g.sigmoid(cur, 1.0).unwrap();
    }
    if !used_mul {
        cur = g.mul(cur, cur).unwrap();
    }
    let output = g.sum(cur).unwrap();
    g.set_output("out", output).unwrap();
    RandomScalarGraph {
        graph: g,
        dims,
        output,
    }
}

/// Uniform sample from an axis-aligned box.
pub fn sample_in_box(rng: &mut ChaCha20Rng, lo: &[f64], hi: &[f64]) -> Vec<f64> {
    lo.iter()
        .zip(hi)
        .map(|(l, h)| l + rng.gen::<f64>() * (h - l))
        .collect()
}

/// True when every ReLU operand stays at least `margin` away from its kink.
pub fn relu_inputs_clear(graph: &ComputeGraph, values: &[Tensor], margin: f64) -> bool {
    graph.nodes().iter().all(|node| {
        if !matches!(node.kind, NodeKind::ReLU) {
            return true;
        }
        values[node.inputs[0].index()]
            .data()
            .iter()
            .all(|v| v.abs() >= margin)
    })
}

/// Central finite differences of a scalar-output graph at `x`.
pub fn central_fd(graph: &ComputeGraph, x: &Tensor, h: f64) -> Vec<f64> {
    let eval = |point: &Tensor| -> f64 {
        let values =
            odverify_core::eval::forward_values(graph, std::slice::from_ref(point)).unwrap();
        let (_, out) = graph.outputs()[0];
        values[out.index()].data()[0]
    };
    (0..x.numel())
        .map(|i| {
            let step = h * x.data()[i].abs().max(1.0);
            let mut plus = x.clone();
            plus.data_mut()[i] += step;
            let mut minus = x.clone();
            minus.data_mut()[i] -= step;
            (eval(&plus) - eval(&minus)) / (2.0 * step)
        })
        .collect()
}

//! The compute-graph model: typed numeric nodes in a directed acyclic graph.
//!
//! Graphs are append-only while being built and immutable afterwards. Node
//! ids are indices into the node list; `push` only accepts references to
//! already-present nodes, so graphs built through the public API are acyclic
//! by construction. Graphs assembled from raw parts (e.g. by the model
//! loader) may be malformed; [`validate`] reports every defect it finds.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::tensor::Tensor;

/// Index of a node in its graph.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct NodeId(pub usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// What a node computes. Parameters (weights, constants) live inside the kind.
#[derive(Debug, Clone, PartialEq)]
pub enum NodeKind {
    /// External input with a declared shape.
    Input { shape: Vec<usize> },
    /// Fixed tensor.
    Const { value: Tensor },
    /// `y = W x + b` over the flattened input; weight is `[out, in]`, bias `[out]`.
    Affine { weight: Tensor, bias: Tensor },
    /// 2-D convolution; input `[ci, h, w]`, kernel `[co, ci, kh, kw]`, zero padding.
    Conv2D {
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    },
    /// Elementwise `max(0, x)`.
    ReLU,
    /// Elementwise `1 / (1 + exp(-slope * x))`; slope must be positive.
    Sigmoid { slope: f64 },
    /// Elementwise sum of two same-shaped tensors.
    Add,
    /// Elementwise difference of two same-shaped tensors.
    Sub,
    /// Elementwise product of two same-shaped tensors.
    MulElementwise,
    /// Sum of all elements, producing shape `[1]`.
    SumReduce,
    /// Flattens every operand and concatenates, producing a vector.
    Concat,
    /// Contiguous `[start, end)` window of the flattened operand.
    Slice { start: usize, end: usize },
}

impl NodeKind {
    /// Short lowercase tag, used in diagnostics and the model manifest.
    pub fn tag(&self) -> &'static str {
        match self {
            NodeKind::Input { .. } => "input",
            NodeKind::Const { .. } => "const",
            NodeKind::Affine { .. } => "affine",
            NodeKind::Conv2D { .. } => "conv2d",
            NodeKind::ReLU => "relu",
            NodeKind::Sigmoid { .. } => "sigmoid",
            NodeKind::Add => "add",
            NodeKind::Sub => "sub",
            NodeKind::MulElementwise => "mul",
            NodeKind::SumReduce => "sum",
            NodeKind::Concat => "concat",
            NodeKind::Slice { .. } => "slice",
        }
    }

    fn arity(&self) -> Option<usize> {
        match self {
            NodeKind::Input { .. } | NodeKind::Const { .. } => Some(0),
            NodeKind::Affine { .. }
            | NodeKind::Conv2D { .. }
            | NodeKind::ReLU
            | NodeKind::Sigmoid { .. }
            | NodeKind::SumReduce
            | NodeKind::Slice { .. } => Some(1),
            NodeKind::Add | NodeKind::Sub | NodeKind::MulElementwise => Some(2),
            NodeKind::Concat => None, // one or more
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: NodeId,
    pub kind: NodeKind,
    pub inputs: Vec<NodeId>,
}

#[derive(Debug, Error, PartialEq)]
pub enum GraphError {
    #[error("node {0} does not exist")]
    UnknownNode(NodeId),
    #[error("{kind} expects {expected} operand(s), got {actual}")]
    Arity {
        kind: &'static str,
        expected: usize,
        actual: usize,
    },
    #[error("concat needs at least one operand")]
    EmptyConcat,
    #[error("{kind}: {message}")]
    Shape { kind: &'static str, message: String },
    #[error("sigmoid slope must be positive, got {0}")]
    NonPositiveSlope(f64),
    #[error("slice [{start}, {end}) invalid for operand with {len} elements")]
    BadSlice {
        start: usize,
        end: usize,
        len: usize,
    },
    #[error("output name {0:?} is already declared")]
    DuplicateOutput(String),
}

/// One finding from [`ComputeGraph::validate`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Diagnostic {
    /// Offending node, when the defect is attributable to one.
    pub node: Option<usize>,
    pub message: String,
}

impl fmt::Display for Diagnostic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.node {
            Some(id) => write!(f, "node {}: {}", id, self.message),
            None => write!(f, "{}", self.message),
        }
    }
}

/// A model plus any property layers appended to it.
///
/// Immutable once built; evaluation never mutates the graph, so shared
/// references may be evaluated concurrently.
#[derive(Debug, Clone, PartialEq)]
pub struct ComputeGraph {
    nodes: Vec<Node>,
    /// Inferred output shape per node; `None` when inference failed (only
    /// possible for graphs assembled from raw parts).
    shapes: Vec<Option<Vec<usize>>>,
    inputs: Vec<NodeId>,
    outputs: Vec<(String, NodeId)>,
}

impl Default for ComputeGraph {
    fn default() -> Self {
        Self::new()
    }
}

impl ComputeGraph {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            shapes: Vec::new(),
            inputs: Vec::new(),
            outputs: Vec::new(),
        }
    }

    /// Assemble a graph without any checking. Callers are expected to run
    /// [`validate`](Self::validate) and reject graphs with diagnostics.
    pub fn from_raw_parts(
        nodes: Vec<Node>,
        inputs: Vec<NodeId>,
        outputs: Vec<(String, NodeId)>,
    ) -> Self {
        let mut g = Self {
            nodes,
            shapes: Vec::new(),
            inputs,
            outputs,
        };
        g.shapes = g.infer_all_shapes();
        g
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn node(&self, id: NodeId) -> Option<&Node> {
        self.nodes.get(id.0)
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn inputs(&self) -> &[NodeId] {
        &self.inputs
    }

    pub fn outputs(&self) -> &[(String, NodeId)] {
        &self.outputs
    }

    pub fn output_node(&self, name: &str) -> Option<NodeId> {
        self.outputs
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, id)| *id)
    }

    /// Inferred shape of a node, when known.
    pub fn shape(&self, id: NodeId) -> Option<&[usize]> {
        self.shapes.get(id.0)?.as_deref()
    }

    /// Number of elements a node produces, when its shape is known.
    pub fn numel(&self, id: NodeId) -> Option<usize> {
        self.shape(id).map(|s| s.iter().product())
    }

    /// Append a node, checking operand existence and shape consistency now.
    pub fn push(&mut self, kind: NodeKind, inputs: &[NodeId]) -> Result<NodeId, GraphError> {
        if let Some(expected) = kind.arity() {
            if inputs.len() != expected {
                return Err(GraphError::Arity {
                    kind: kind.tag(),
                    expected,
                    actual: inputs.len(),
                });
            }
        } else if inputs.is_empty() {
            return Err(GraphError::EmptyConcat);
        }
        let mut in_shapes = Vec::with_capacity(inputs.len());
        for &i in inputs {
            let shape = self
                .shape(i)
                .ok_or(GraphError::UnknownNode(i))?
                .to_vec();
            in_shapes.push(shape);
        }
        let out_shape = infer_shape(&kind, &in_shapes)?;
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            id,
            kind,
            inputs: inputs.to_vec(),
        });
        self.shapes.push(Some(out_shape));
        Ok(id)
    }

    /// Declare an external input of the given shape.
    pub fn input(&mut self, shape: Vec<usize>) -> NodeId {
        let id = self
            .push(NodeKind::Input { shape }, &[])
            .expect("input nodes are always well-formed");
        self.inputs.push(id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(NodeKind::Const { value }, &[])
            .expect("const nodes are always well-formed")
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn affine(&mut self, x: NodeId, weight: Tensor, bias: Tensor) -> Result<NodeId, GraphError> {
        self.push(NodeKind::Affine { weight, bias }, &[x])
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        kernel: Tensor,
        bias: Tensor,
        stride: usize,
        padding: usize,
    ) -> Result<NodeId, GraphError> {
        self.push(
            NodeKind::Conv2D {
                kernel,
                bias,
                stride,
                padding,
            },
            &[x],
        )
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(NodeKind::ReLU, &[x])
    }

    pub fn sigmoid(&mut self, x: NodeId, slope: f64) -> Result<NodeId, GraphError> {
        self.push(NodeKind::Sigmoid { slope }, &[x])
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(NodeKind::Add, &[a, b])
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(NodeKind::Sub, &[a, b])
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId, GraphError> {
        self.push(NodeKind::MulElementwise, &[a, b])
    }

    pub fn sum(&mut self, x: NodeId) -> Result<NodeId, GraphError> {
        self.push(NodeKind::SumReduce, &[x])
    }

    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId, GraphError> {
        self.push(NodeKind::Concat, parts)
    }

    pub fn slice(&mut self, x: NodeId, start: usize, end: usize) -> Result<NodeId, GraphError> {
        self.push(NodeKind::Slice { start, end }, &[x])
    }

    /// Register a named output. Names must be unique.
    pub fn set_output(&mut self, name: &str, id: NodeId) -> Result<(), GraphError> {
        if self.node(id).is_none() {
            return Err(GraphError::UnknownNode(id));
        }
        if self.outputs.iter().any(|(n, _)| n == name) {
            return Err(GraphError::DuplicateOutput(name.to_string()));
        }
        self.outputs.push((name.to_string(), id));
        Ok(())
    }

    /// Check every structural invariant and return what is broken.
    ///
    /// An empty list means: ids consistent, no cycles, edges only point to
    /// earlier nodes, all declared inputs/outputs exist, and every node's
    /// parameter shapes are consistent with its operand shapes.
    pub fn validate(&self) -> Vec<Diagnostic> {
        let mut diags = Vec::new();
        let n = self.nodes.len();

        for (i, node) in self.nodes.iter().enumerate() {
            if node.id.0 != i {
                diags.push(Diagnostic {
                    node: Some(i),
                    message: format!("declared id {} does not match position {}", node.id, i),
                });
            }
            for &inp in &node.inputs {
                if inp.0 >= n {
                    diags.push(Diagnostic {
                        node: Some(i),
                        message: format!("references missing node {}", inp),
                    });
                } else if inp.0 >= i {
                    diags.push(Diagnostic {
                        node: Some(i),
                        message: format!("references node {} that is not earlier in the list", inp),
                    });
                }
            }
            if let Some(expected) = node.kind.arity() {
                if node.inputs.len() != expected {
                    diags.push(Diagnostic {
                        node: Some(i),
                        message: format!(
                            "{} expects {} operand(s), has {}",
                            node.kind.tag(),
                            expected,
                            node.inputs.len()
                        ),
                    });
                }
            } else if node.inputs.is_empty() {
                diags.push(Diagnostic {
                    node: Some(i),
                    message: "concat needs at least one operand".to_string(),
                });
            }
        }

        for k in self.find_cycles() {
            diags.push(Diagnostic {
                node: Some(k),
                message: format!("cycle at node {k}"),
            });
        }

        for &inp in &self.inputs {
            match self.node(inp) {
                None => diags.push(Diagnostic {
                    node: None,
                    message: format!("declared input {} does not exist", inp),
                }),
                Some(node) if !matches!(node.kind, NodeKind::Input { .. }) => {
                    diags.push(Diagnostic {
                        node: Some(inp.0),
                        message: "declared input is not an input node".to_string(),
                    })
                }
                _ => {}
            }
        }
        for (name, id) in &self.outputs {
            if self.node(*id).is_none() {
                diags.push(Diagnostic {
                    node: None,
                    message: format!("output {name:?} references missing node {id}"),
                });
            }
        }

        // Shape consistency, only meaningful on structurally sound prefixes.
        let shapes = self.infer_all_shapes();
        for (i, node) in self.nodes.iter().enumerate() {
            let mut in_shapes = Vec::new();
            let mut operands_known = true;
            for &inp in &node.inputs {
                match shapes.get(inp.0).and_then(|s| s.clone()) {
                    Some(s) if inp.0 < i => in_shapes.push(s),
                    _ => operands_known = false,
                }
            }
            if !operands_known || in_shapes.len() != node.inputs.len() {
                continue;
            }
            if let Err(e) = infer_shape(&node.kind, &in_shapes) {
                diags.push(Diagnostic {
                    node: Some(i),
                    message: e.to_string(),
                });
            }
        }

        diags
    }

    /// Indices of nodes that sit on a reference cycle.
    fn find_cycles(&self) -> Vec<usize> {
        let n = self.nodes.len();
        // 0 = unvisited, 1 = on stack, 2 = done
        let mut state = vec![0u8; n];
        let mut on_cycle = vec![false; n];
        for start in 0..n {
            if state[start] != 0 {
                continue;
            }
            // Iterative DFS; stack holds (node, next-edge cursor).
            let mut stack: Vec<(usize, usize)> = vec![(start, 0)];
            state[start] = 1;
            while let Some(&mut (v, ref mut cursor)) = stack.last_mut() {
                if *cursor < self.nodes[v].inputs.len() {
                    let w = self.nodes[v].inputs[*cursor].0;
                    *cursor += 1;
                    if w >= n {
                        continue;
                    }
                    match state[w] {
                        0 => {
                            state[w] = 1;
                            stack.push((w, 0));
                        }
                        1 => {
                            // Back edge: everything from w up the stack is cyclic.
                            on_cycle[w] = true;
                            for &(u, _) in stack.iter().rev() {
                                on_cycle[u] = true;
                                if u == w {
                                    break;
                                }
                            }
                        }
                        _ => {}
                    }
                } else {
                    state[v] = 2;
                    stack.pop();
                }
            }
        }
        (0..n).filter(|&i| on_cycle[i]).collect()
    }

    fn infer_all_shapes(&self) -> Vec<Option<Vec<usize>>> {
        let mut shapes: Vec<Option<Vec<usize>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let mut in_shapes = Vec::with_capacity(node.inputs.len());
            let mut ok = true;
            for &inp in &node.inputs {
                if inp.0 >= i {
                    ok = false;
                    break;
                }
                match &shapes[inp.0] {
                    Some(s) => in_shapes.push(s.clone()),
                    None => {
                        ok = false;
                        break;
                    }
                }
            }
            if ok {
                shapes[i] = infer_shape(&node.kind, &in_shapes).ok();
            }
        }
        shapes
    }
}

/// Output shape of a node kind applied to operands of the given shapes.
pub fn infer_shape(kind: &NodeKind, inputs: &[Vec<usize>]) -> Result<Vec<usize>, GraphError> {
    let numel = |s: &Vec<usize>| -> usize { s.iter().product() };
    match kind {
        NodeKind::Input { shape } => {
            if shape.iter().any(|&d| d == 0) {
                return Err(GraphError::Shape {
                    kind: "input",
                    message: format!("dimensions must be positive, got {shape:?}"),
                });
            }
            Ok(shape.clone())
        }
        NodeKind::Const { value } => Ok(value.shape().to_vec()),
        NodeKind::Affine { weight, bias } => {
            if weight.shape().len() != 2 {
                return Err(GraphError::Shape {
                    kind: "affine",
                    message: format!("weight must be 2-D, got {:?}", weight.shape()),
                });
            }
            let (out, inn) = (weight.shape()[0], weight.shape()[1]);
            if bias.shape() != [out] {
                return Err(GraphError::Shape {
                    kind: "affine",
                    message: format!("bias shape {:?} does not match [{out}]", bias.shape()),
                });
            }
            if numel(&inputs[0]) != inn {
                return Err(GraphError::Shape {
                    kind: "affine",
                    message: format!(
                        "operand has {} elements, weight expects {inn}",
                        numel(&inputs[0])
                    ),
                });
            }
            Ok(vec![out])
        }
        NodeKind::Conv2D {
            kernel,
            bias,
            stride,
            padding,
        } => {
            if kernel.shape().len() != 4 {
                return Err(GraphError::Shape {
                    kind: "conv2d",
                    message: format!("kernel must be 4-D, got {:?}", kernel.shape()),
                });
            }
            let (co, ci, kh, kw) = (
                kernel.shape()[0],
                kernel.shape()[1],
                kernel.shape()[2],
                kernel.shape()[3],
            );
            if bias.shape() != [co] {
                return Err(GraphError::Shape {
                    kind: "conv2d",
                    message: format!("bias shape {:?} does not match [{co}]", bias.shape()),
                });
            }
            if *stride == 0 {
                return Err(GraphError::Shape {
                    kind: "conv2d",
                    message: "stride must be positive".to_string(),
                });
            }
            let in_shape = &inputs[0];
            if in_shape.len() != 3 || in_shape[0] != ci {
                return Err(GraphError::Shape {
                    kind: "conv2d",
                    message: format!("operand shape {in_shape:?} does not match [{ci}, h, w]"),
                });
            }
            let (h, w) = (in_shape[1], in_shape[2]);
            if h + 2 * padding < kh || w + 2 * padding < kw {
                return Err(GraphError::Shape {
                    kind: "conv2d",
                    message: format!("kernel {kh}x{kw} larger than padded input {h}x{w}"),
                });
            }
            let oh = (h + 2 * padding - kh) / stride + 1;
            let ow = (w + 2 * padding - kw) / stride + 1;
            Ok(vec![co, oh, ow])
        }
        NodeKind::ReLU => Ok(inputs[0].clone()),
        NodeKind::Sigmoid { slope } => {
            if !(*slope > 0.0) {
                return Err(GraphError::NonPositiveSlope(*slope));
            }
            Ok(inputs[0].clone())
        }
        NodeKind::Add | NodeKind::Sub | NodeKind::MulElementwise => {
            if inputs[0] != inputs[1] {
                return Err(GraphError::Shape {
                    kind: kind.tag(),
                    message: format!("operand shapes {:?} and {:?} differ", inputs[0], inputs[1]),
                });
            }
            Ok(inputs[0].clone())
        }
        NodeKind::SumReduce => Ok(vec![1]),
        NodeKind::Concat => Ok(vec![inputs.iter().map(numel).sum()]),
        NodeKind::Slice { start, end } => {
            let len = numel(&inputs[0]);
            if *start >= *end || *end > len {
                return Err(GraphError::BadSlice {
                    start: *start,
                    end: *end,
                    len,
                });
            }
            Ok(vec![end - start])
        }
    }
}

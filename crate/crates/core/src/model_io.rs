//! Model persistence: a JSON manifest beside a raw little-endian weight blob.
//!
//! `<name>.json` describes the node list with byte offsets into `<name>.bin`,
//! which holds every parameter as consecutive little-endian 64-bit floats.
//! The manifest records a SHA-256 of the blob, so corruption and mismatched
//! file pairs are caught at load time. Round-tripping a graph reproduces its
//! weights bit for bit.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::graph::{ComputeGraph, Node, NodeId, NodeKind};
use crate::tensor::Tensor;

pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelIoError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("manifest is not valid JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error("unsupported format_version {found}, this build reads {supported}")]
    VersionMismatch { found: u32, supported: u32 },
    #[error("weight blob checksum mismatch: manifest says {expected}, blob hashes to {actual}")]
    ChecksumMismatch { expected: String, actual: String },
    #[error("node {node} references missing node {reference}")]
    DanglingNode { node: usize, reference: usize },
    #[error("node {node}: tensor {tensor:?} (offset {offset}, {len} elements) does not fit the {blob_len}-byte weight blob")]
    MissingWeight {
        node: usize,
        tensor: String,
        offset: u64,
        len: u64,
        blob_len: usize,
    },
    #[error("node {node}: {message}")]
    BadNode { node: usize, message: String },
    #[error("loaded graph is malformed: {0}")]
    Validation(String),
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    checksum_sha256: String,
    inputs: Vec<usize>,
    outputs: Vec<(String, usize)>,
    nodes: Vec<ManifestNode>,
}

#[derive(Debug, Default, Serialize, Deserialize)]
struct ManifestNode {
    id: usize,
    kind: String,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    inputs: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    shape: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    value: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    weight: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    kernel: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bias: Option<TensorRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stride: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    padding: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    slope: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    start: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    end: Option<usize>,
}

/// Where a tensor lives in the blob: byte offset, element count, and shape.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct TensorRef {
    shape: Vec<usize>,
    offset: u64,
    len: u64,
}

/// The `.json` / `.bin` pair for a base path. A path that already carries
/// one of the two extensions addresses the same pair.
fn file_pair(path: &Path) -> (PathBuf, PathBuf) {
    let base = match path.extension().and_then(|e| e.to_str()) {
        Some("json") | Some("bin") => path.with_extension(""),
        _ => path.to_path_buf(),
    };
    (base.with_extension("json"), base.with_extension("bin"))
}

fn sha256_hex(bytes: &[u8]) -> String {
    let digest = Sha256::digest(bytes);
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

struct BlobWriter {
    bytes: Vec<u8>,
}

impl BlobWriter {
    fn new() -> Self {
        Self { bytes: Vec::new() }
    }

    fn push(&mut self, t: &Tensor) -> TensorRef {
        let offset = self.bytes.len() as u64;
        for v in t.data() {
            self.bytes.extend_from_slice(&v.to_le_bytes());
        }
        TensorRef {
            shape: t.shape().to_vec(),
            offset,
            len: t.numel() as u64,
        }
    }
}

/// Write `graph` as a manifest/blob pair under `path` (extension ignored).
pub fn save_model(graph: &ComputeGraph, path: &Path) -> Result<(), ModelIoError> {
    let (json_path, bin_path) = file_pair(path);
    let mut blob = BlobWriter::new();
    let mut nodes = Vec::with_capacity(graph.num_nodes());
    for node in graph.nodes() {
        let mut m = ManifestNode {
            id: node.id.index(),
            kind: node.kind.tag().to_string(),
            inputs: node.inputs.iter().map(|n| n.index()).collect(),
            ..ManifestNode::default()
        };
        match &node.kind {
            NodeKind::Input { shape } => m.shape = Some(shape.clone()),
            NodeKind::Const { value } => m.value = Some(blob.push(value)),
            NodeKind::Affine { weight, bias } => {
                m.weight = Some(blob.push(weight));
                m.bias = Some(blob.push(bias));
            }
            NodeKind::Conv2D {
                kernel,
                bias,
                stride,
                padding,
            } => {
                m.kernel = Some(blob.push(kernel));
                m.bias = Some(blob.push(bias));
                m.stride = Some(*stride);
                m.padding = Some(*padding);
            }
            NodeKind::ReLU | NodeKind::Add | NodeKind::Sub | NodeKind::MulElementwise
            | NodeKind::SumReduce | NodeKind::Concat => {}
            NodeKind::Sigmoid { slope } => m.slope = Some(*slope),
            NodeKind::Slice { start, end } => {
                m.start = Some(*start);
                m.end = Some(*end);
            }
        }
        nodes.push(m);
    }
    let manifest = Manifest {
        format_version: FORMAT_VERSION,
        checksum_sha256: sha256_hex(&blob.bytes),
        inputs: graph.inputs().iter().map(|n| n.index()).collect(),
        outputs: graph
            .outputs()
            .iter()
            .map(|(name, id)| (name.clone(), id.index()))
            .collect(),
        nodes,
    };
    fs::write(&bin_path, &blob.bytes).map_err(|source| ModelIoError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let text = serde_json::to_string_pretty(&manifest)?;
    fs::write(&json_path, text).map_err(|source| ModelIoError::Io {
        path: json_path.clone(),
        source,
    })?;
    Ok(())
}

/// Load the manifest/blob pair under `path` and rebuild the graph.
pub fn load_model(path: &Path) -> Result<ComputeGraph, ModelIoError> {
    let (json_path, bin_path) = file_pair(path);
    let text = fs::read_to_string(&json_path).map_err(|source| ModelIoError::Io {
        path: json_path.clone(),
        source,
    })?;
    let manifest: Manifest = serde_json::from_str(&text)?;
    if manifest.format_version != FORMAT_VERSION {
        return Err(ModelIoError::VersionMismatch {
            found: manifest.format_version,
            supported: FORMAT_VERSION,
        });
    }
    let blob = fs::read(&bin_path).map_err(|source| ModelIoError::Io {
        path: bin_path.clone(),
        source,
    })?;
    let actual = sha256_hex(&blob);
    if actual != manifest.checksum_sha256 {
        return Err(ModelIoError::ChecksumMismatch {
            expected: manifest.checksum_sha256,
            actual,
        });
    }

    let count = manifest.nodes.len();
    let mut nodes = Vec::with_capacity(count);
    for m in &manifest.nodes {
        for &r in &m.inputs {
            if r >= count {
                return Err(ModelIoError::DanglingNode {
                    node: m.id,
                    reference: r,
                });
            }
        }
        let kind = decode_kind(m, &blob)?;
        nodes.push(Node {
            id: NodeId(m.id),
            kind,
            inputs: m.inputs.iter().map(|&r| NodeId(r)).collect(),
        });
    }
    let graph = ComputeGraph::from_raw_parts(
        nodes,
        manifest.inputs.iter().map(|&i| NodeId(i)).collect(),
        manifest
            .outputs
            .iter()
            .map(|(name, id)| (name.clone(), NodeId(*id)))
            .collect(),
    );
    let diags = graph.validate();
    if !diags.is_empty() {
        let joined = diags
            .iter()
            .map(|d| d.to_string())
            .collect::<Vec<_>>()
            .join("; ");
        return Err(ModelIoError::Validation(joined));
    }
    Ok(graph)
}

fn decode_kind(m: &ManifestNode, blob: &[u8]) -> Result<NodeKind, ModelIoError> {
    let need = |field: &Option<TensorRef>, name: &str| -> Result<Tensor, ModelIoError> {
        let r = field.as_ref().ok_or_else(|| ModelIoError::BadNode {
            node: m.id,
            message: format!("{} node is missing its {name:?} tensor", m.kind),
        })?;
        read_tensor(blob, r, m.id, name)
    };
    match m.kind.as_str() {
        "input" => Ok(NodeKind::Input {
            shape: m.shape.clone().ok_or_else(|| ModelIoError::BadNode {
                node: m.id,
                message: "input node is missing its shape".to_string(),
            })?,
        }),
        "const" => Ok(NodeKind::Const {
            value: need(&m.value, "value")?,
        }),
        "affine" => Ok(NodeKind::Affine {
            weight: need(&m.weight, "weight")?,
            bias: need(&m.bias, "bias")?,
        }),
        "conv2d" => Ok(NodeKind::Conv2D {
            kernel: need(&m.kernel, "kernel")?,
            bias: need(&m.bias, "bias")?,
            stride: m.stride.unwrap_or(1),
            padding: m.padding.unwrap_or(0),
        }),
        "relu" => Ok(NodeKind::ReLU),
        "sigmoid" => Ok(NodeKind::Sigmoid {
            slope: m.slope.ok_or_else(|| ModelIoError::BadNode {
                node: m.id,
                message: "sigmoid node is missing its slope".to_string(),
            })?,
        }),
        "add" => Ok(NodeKind::Add),
        "sub" => Ok(NodeKind::Sub),
        "mul" => Ok(NodeKind::MulElementwise),
        "sum" => Ok(NodeKind::SumReduce),
        "concat" => Ok(NodeKind::Concat),
        "slice" => match (m.start, m.end) {
            (Some(start), Some(end)) => Ok(NodeKind::Slice { start, end }),
            _ => Err(ModelIoError::BadNode {
                node: m.id,
                message: "slice node is missing its range".to_string(),
            }),
        },
        other => Err(ModelIoError::BadNode {
            node: m.id,
            message: format!("unknown node kind {other:?}"),
        }),
    }
}

fn read_tensor(blob: &[u8], r: &TensorRef, node: usize, name: &str) -> Result<Tensor, ModelIoError> {
    let numel: usize = r.shape.iter().product();
    let end = r.offset.checked_add(r.len.checked_mul(8).unwrap_or(u64::MAX));
    let fits = matches!(end, Some(e) if e <= blob.len() as u64);
    if r.len as usize != numel || !fits {
        return Err(ModelIoError::MissingWeight {
            node,
            tensor: name.to_string(),
            offset: r.offset,
            len: r.len,
            blob_len: blob.len(),
        });
    }
    let start = r.offset as usize;
    let data = blob[start..start + numel * 8]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("chunk of 8")))
        .collect();
    Tensor::new(r.shape.clone(), data).map_err(|e| ModelIoError::BadNode {
        node,
        message: e.to_string(),
    })
}

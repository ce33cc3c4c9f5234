//! Desk-scale detector training on the synthetic datasets.
//!
//! The detector is a small conv stack with a dense head laid out per
//! [`DetectionHeadSpec::block_layout`]; box coordinates and objectness pass
//! through unit-slope sigmoids so they land in [0, 1]. Training is plain
//! full-batch gradient descent: the loss gradient is seeded analytically on
//! the raw dense output (smooth-L1 boxes, softmax cross-entropy classes,
//! logistic objectness) and reverse mode carries it to every parameter.
//! Ground-truth object j is assigned to predicted box slot j.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{iou, BoundingBox, DetectionHeadSpec};
use crate::eval::{backward, forward_values, stable_sigmoid, EvalError};
use crate::graph::{ComputeGraph, GraphError, NodeId};
use crate::harness::dataset::Dataset;
use crate::model_io::{save_model, ModelIoError};
use crate::tensor::Tensor;

/// Relative weights of the three loss terms.
const BOX_LOSS_WEIGHT: f64 = 5.0;
const CLASS_LOSS_WEIGHT: f64 = 1.0;
const OBJECTNESS_LOSS_WEIGHT: f64 = 1.0;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Output channels of each conv+ReLU layer; empty trains a linear head.
    pub conv_channels: Vec<usize>,
    pub kernel_size: usize,
    pub stride: usize,
    /// Predicted box slots.
    pub boxes: usize,
    pub learning_rate: f64,
    /// Full-batch gradient steps.
    pub epochs: usize,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            conv_channels: vec![4],
            kernel_size: 3,
            stride: 2,
            boxes: 1,
            learning_rate: 0.5,
            epochs: 1500,
            seed: 1,
        }
    }
}

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("detector config: {0}")]
    Config(String),
    #[error("training diverged at epoch {epoch}: loss {loss}")]
    Diverged { epoch: usize, loss: f64 },
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error(transparent)]
    Eval(EvalError),
    #[error(transparent)]
    Save(#[from] ModelIoError),
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error(transparent)]
    Json(#[from] serde_json::Error),
}

/// One conv layer's parameters.
#[derive(Debug, Clone)]
pub struct ConvLayer {
    pub kernel: Tensor,
    pub bias: Tensor,
    pub stride: usize,
    pub padding: usize,
}

/// A trainable detector: parameters plus the head layout.
#[derive(Debug, Clone)]
pub struct Detector {
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub boxes: usize,
    pub conv: Vec<ConvLayer>,
    pub dense_weight: Tensor,
    pub dense_bias: Tensor,
    pub head: DetectionHeadSpec,
}

/// A detector lowered to a compute graph, with the node handles training
/// needs.
pub struct BuiltDetector {
    pub graph: ComputeGraph,
    pub conv_nodes: Vec<NodeId>,
    pub dense_node: NodeId,
    pub head_node: NodeId,
}

impl Detector {
    /// Seeded random initialization; biases start at zero.
    pub fn init(config: &DetectorConfig, dataset: &Dataset) -> Result<Self, TrainError> {
        if config.boxes == 0 {
            return Err(TrainError::Config("at least one box slot".into()));
        }
        if config.kernel_size == 0 || config.stride == 0 {
            return Err(TrainError::Config("kernel and stride must be positive".into()));
        }
        if !(config.learning_rate.is_finite() && config.learning_rate > 0.0) {
            return Err(TrainError::Config(format!(
                "learning rate {} must be positive",
                config.learning_rate
            )));
        }
        let (h, w) = (dataset.config.height, dataset.config.width);
        let num_classes = dataset.num_classes();
        let head = DetectionHeadSpec::block_layout(config.boxes, num_classes)
            .map_err(|e| TrainError::Config(e.to_string()))?;
        let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
        let mut uniform = |n: usize, fan_in: usize| -> Vec<f64> {
            let a = (1.0 / fan_in as f64).sqrt();
            (0..n).map(|_| (2.0 * rng.gen::<f64>() - 1.0) * a).collect()
        };

        let k = config.kernel_size;
        let padding = k / 2;
        let mut conv = Vec::new();
        let (mut ci, mut ch, mut cw) = (1usize, h, w);
        for &co in &config.conv_channels {
            if co == 0 {
                return Err(TrainError::Config("conv channels must be positive".into()));
            }
            if ch + 2 * padding < k || cw + 2 * padding < k {
                return Err(TrainError::Config(format!(
                    "feature map {ch}x{cw} too small for kernel {k}"
                )));
            }
            let kernel = Tensor::new(vec![co, ci, k, k], uniform(co * ci * k * k, ci * k * k))
                .expect("sized buffer");
            conv.push(ConvLayer {
                kernel,
                bias: Tensor::zeros(vec![co]),
                stride: config.stride,
                padding,
            });
            ch = (ch + 2 * padding - k) / config.stride + 1;
            cw = (cw + 2 * padding - k) / config.stride + 1;
            ci = co;
        }
        let flat = ci * ch * cw;
        let head_len = head.head_len();
        let dense_weight =
            Tensor::new(vec![head_len, flat], uniform(head_len * flat, flat)).expect("sized");
        Ok(Self {
            input_shape: vec![1, h, w],
            num_classes,
            boxes: config.boxes,
            conv,
            dense_weight,
            dense_bias: Tensor::zeros(vec![head_len]),
            head,
        })
    }

    /// Lower the parameters into a fresh graph with output `head`.
    pub fn build(&self) -> Result<BuiltDetector, GraphError> {
        let n = self.boxes;
        let c = self.num_classes;
        let mut g = ComputeGraph::new();
        let mut cursor = g.input(self.input_shape.clone());
        let mut conv_nodes = Vec::new();
        for layer in &self.conv {
            let conv = g.conv2d(
                cursor,
                layer.kernel.clone(),
                layer.bias.clone(),
                layer.stride,
                layer.padding,
            )?;
            conv_nodes.push(conv);
            cursor = g.relu(conv)?;
        }
        let dense = g.affine(cursor, self.dense_weight.clone(), self.dense_bias.clone())?;
        let coords_raw = g.slice(dense, 0, 4 * n)?;
        let coords = g.sigmoid(coords_raw, 1.0)?;
        let logits = g.slice(dense, 4 * n, 4 * n + c * n)?;
        let obj_raw = g.slice(dense, 4 * n + c * n, self.head.head_len())?;
        let obj = g.sigmoid(obj_raw, 1.0)?;
        let head = g.concat(&[coords, logits, obj])?;
        g.set_output("head", head)?;
        Ok(BuiltDetector {
            graph: g,
            conv_nodes,
            dense_node: dense,
            head_node: head,
        })
    }
}

/// Final training metrics. IoU and accuracy are measured on the training
/// assignment (ground-truth object j against box slot j).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs_run: usize,
    pub final_loss: f64,
    pub mean_iou: f64,
    pub class_accuracy: f64,
}

fn sigmoid1(x: f64) -> f64 {
    stable_sigmoid(1.0, x)
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Loss and its gradient with respect to the raw dense output.
fn loss_and_seed(
    raw: &[f64],
    head: &DetectionHeadSpec,
    gts: &crate::detection::GroundTruthSet,
) -> (f64, Vec<f64>) {
    let mut loss = 0.0;
    let mut seed = vec![0.0; raw.len()];
    for (j, slots) in head.boxes.iter().enumerate() {
        let assigned = gts.items().get(j);
        if let Some(gt) = assigned {
            let targets = [gt.box_.x, gt.box_.y, gt.box_.w, gt.box_.h];
            for (slot, target) in slots.coords.iter().zip(targets) {
                let c = sigmoid1(raw[*slot]);
                let d = c - target;
                loss += BOX_LOSS_WEIGHT * if d.abs() < 1.0 {
                    0.5 * d * d
                } else {
                    d.abs() - 0.5
                };
                seed[*slot] = BOX_LOSS_WEIGHT * d.clamp(-1.0, 1.0) * c * (1.0 - c);
            }
            let logits: Vec<f64> = slots.logits.iter().map(|s| raw[*s]).collect();
            let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + logits.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
            loss += CLASS_LOSS_WEIGHT * (lse - logits[gt.class]);
            for (k, slot) in slots.logits.iter().enumerate() {
                let p = (logits[k] - lse).exp();
                let target = if k == gt.class { 1.0 } else { 0.0 };
                seed[*slot] = CLASS_LOSS_WEIGHT * (p - target);
            }
        }
        let target = if assigned.is_some() { 1.0 } else { 0.0 };
        let r = raw[slots.objectness];
        loss += OBJECTNESS_LOSS_WEIGHT * (softplus(r) - target * r);
        seed[slots.objectness] = OBJECTNESS_LOSS_WEIGHT * (sigmoid1(r) - target);
    }
    (loss, seed)
}

struct GradBuffers {
    conv: Vec<(Vec<f64>, Vec<f64>)>,
    dense: (Vec<f64>, Vec<f64>),
}

impl GradBuffers {
    fn zeros(det: &Detector) -> Self {
        Self {
            conv: det
                .conv
                .iter()
                .map(|l| (vec![0.0; l.kernel.numel()], vec![0.0; l.bias.numel()]))
                .collect(),
            dense: (
                vec![0.0; det.dense_weight.numel()],
                vec![0.0; det.dense_bias.numel()],
            ),
        }
    }
}

fn accumulate(acc: &mut [f64], grad: &Tensor) {
    for (a, g) in acc.iter_mut().zip(grad.data()) {
        *a += g;
    }
}

fn apply_step(param: &mut Tensor, grad: &[f64], scale: f64) {
    for (p, g) in param.data_mut().iter_mut().zip(grad) {
        *p -= scale * g;
    }
}

/// Train a detector on a dataset with full-batch gradient descent.
/// Zero epochs returns the seeded initialization unchanged.
pub fn train(config: &DetectorConfig, dataset: &Dataset) -> Result<(Detector, TrainReport), TrainError> {
    let mut det = Detector::init(config, dataset)?;
    let samples = dataset.images.len() as f64;
    for epoch in 0..config.epochs {
        let built = det.build()?;
        let mut grads = GradBuffers::zeros(&det);
        let mut loss_sum = 0.0;
        for (image, gts) in dataset.images.iter().zip(&dataset.annotations) {
            let values = forward_values(&built.graph, std::slice::from_ref(image))
                .map_err(|e| divergence_or(e, epoch))?;
            let raw = values[built.dense_node.index()].data();
            let (loss, seed) = loss_and_seed(raw, &det.head, gts);
            loss_sum += loss;
            let seed = Tensor::new(vec![raw.len()], seed).expect("seed matches dense");
            let flows = backward(&built.graph, &values, built.dense_node, &seed)
                .map_err(|e| divergence_or(e, epoch))?;
            for (li, node) in built.conv_nodes.iter().enumerate() {
                let pg = &flows.param_grads[&node.index()];
                accumulate(&mut grads.conv[li].0, &pg.weight);
                accumulate(&mut grads.conv[li].1, &pg.bias);
            }
            let pg = &flows.param_grads[&built.dense_node.index()];
            accumulate(&mut grads.dense.0, &pg.weight);
            accumulate(&mut grads.dense.1, &pg.bias);
        }
        if !loss_sum.is_finite() {
            return Err(TrainError::Diverged {
                epoch,
                loss: loss_sum,
            });
        }
        let scale = config.learning_rate / samples;
        for (layer, (dk, db)) in det.conv.iter_mut().zip(&grads.conv) {
            apply_step(&mut layer.kernel, dk, scale);
            apply_step(&mut layer.bias, db, scale);
        }
        apply_step(&mut det.dense_weight, &grads.dense.0, scale);
        apply_step(&mut det.dense_bias, &grads.dense.1, scale);
    }
    let report = evaluate(&det, dataset, config.epochs)?;
    Ok((det, report))
}

fn divergence_or(e: EvalError, epoch: usize) -> TrainError {
    match e {
        EvalError::NonFinite { .. } => TrainError::Diverged {
            epoch,
            loss: f64::INFINITY,
        },
        other => TrainError::Eval(other),
    }
}

/// Mean loss, slotwise IoU, and class accuracy over a dataset.
pub fn evaluate(
    det: &Detector,
    dataset: &Dataset,
    epochs_run: usize,
) -> Result<TrainReport, TrainError> {
    let built = det.build()?;
    let mut loss_sum = 0.0;
    let mut iou_sum = 0.0;
    let mut correct = 0usize;
    let mut pairs = 0usize;
    for (image, gts) in dataset.images.iter().zip(&dataset.annotations) {
        let values = forward_values(&built.graph, std::slice::from_ref(image))
            .map_err(TrainError::Eval)?;
        let raw = values[built.dense_node.index()].data();
        loss_sum += loss_and_seed(raw, &det.head, gts).0;
        let head = values[built.head_node.index()].data();
        for (j, gt) in gts.items().iter().enumerate().take(det.boxes) {
            let slots = &det.head.boxes[j];
            let [xs, ys, ws, hs] = slots.coords;
            let predicted = BoundingBox::new(head[xs], head[ys], head[ws], head[hs])
                .expect("sigmoid outputs are valid box values");
            iou_sum += iou(&predicted, &gt.box_);
            let best = slots
                .logits
                .iter()
                .enumerate()
                .max_by(|a, b| head[*a.1].total_cmp(&head[*b.1]))
                .map(|(k, _)| k)
                .unwrap();
            if best == gt.class {
                correct += 1;
            }
            pairs += 1;
        }
    }
    let samples = dataset.images.len() as f64;
    Ok(TrainReport {
        epochs_run,
        final_loss: loss_sum / samples,
        mean_iou: if pairs == 0 { 0.0 } else { iou_sum / pairs as f64 },
        class_accuracy: if pairs == 0 {
            0.0
        } else {
            correct as f64 / pairs as f64
        },
    })
}

/// Sidecar describing a saved model: head layout, shapes, and metrics.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DetectorMeta {
    pub format_version: u32,
    pub input_shape: Vec<usize>,
    pub num_classes: usize,
    pub boxes: usize,
    pub head: DetectionHeadSpec,
    pub trainer: DetectorConfig,
    pub metrics: TrainReport,
}

/// Write `{stem}.json` + `{stem}.bin` (the graph) and `{stem}.meta.json`.
pub fn save_detector(
    det: &Detector,
    config: &DetectorConfig,
    report: &TrainReport,
    stem: &Path,
) -> Result<(), TrainError> {
    let built = det.build()?;
    save_model(&built.graph, &stem.with_extension("json"))?;
    let meta = DetectorMeta {
        format_version: 1,
        input_shape: det.input_shape.clone(),
        num_classes: det.num_classes,
        boxes: det.boxes,
        head: det.head.clone(),
        trainer: config.clone(),
        metrics: report.clone(),
    };
    let path = meta_path(stem);
    let mut text = serde_json::to_string_pretty(&meta)?;
    text.push('\n');
    fs::write(&path, text).map_err(|source| TrainError::Io { path, source })?;
    Ok(())
}

/// The metadata path belonging to a model stem.
pub fn meta_path(stem: &Path) -> PathBuf {
    let mut name = stem.file_name().unwrap_or_default().to_os_string();
    name.push(".meta.json");
    stem.with_file_name(name)
}

/// Load the sidecar written by [`save_detector`].
pub fn load_meta(stem: &Path) -> Result<DetectorMeta, TrainError> {
    let path = meta_path(stem);
    let text = fs::read_to_string(&path).map_err(|source| TrainError::Io {
        path: path.clone(),
        source,
    })?;
    let meta: DetectorMeta = serde_json::from_str(&text)?;
    if meta.format_version != 1 {
        return Err(TrainError::Config(format!(
            "unsupported model metadata version {}",
            meta.format_version
        )));
    }
    Ok(meta)
}

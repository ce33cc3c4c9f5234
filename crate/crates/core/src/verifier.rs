//! Branch-and-bound verification driver.
//!
//! The pipeline runs three stages: a projected-gradient falsification
//! attempt, a root bounding pass, and input-domain branch-and-bound. Each
//! subproblem is bounded with interval propagation refined by backward
//! linear envelopes, probed with a short local descent, and split along its
//! widest dimension. Margins are certified strictly positive only past a
//! small guard band; violations are only ever accepted from exact forward
//! evaluations.

use std::collections::BinaryHeap;
use std::sync::{Condvar, Mutex};
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::json;
use thiserror::Error;

use crate::bounds::{backward_linear_bounds, concretize, ibp_box, BoundsError};
use crate::detection::Detection;
use crate::encoder::VerificationQuery;
use crate::eval::{forward_values, EvalError};
use crate::falsifier::{objective_gradient, pgd_search, sign, PgdConfig, Witness};
use crate::region::BoxBounds;
use crate::tensor::Tensor;

/// Search limits and stage knobs.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct VerifierConfig {
    /// Boxes whose widest side is at or below this are not split further.
    pub min_width: f64,
    /// Maximum split depth.
    pub max_depth: usize,
    /// Lower bounds must clear this band before a margin counts as proven.
    pub guard_band: f64,
    /// Worker threads for the branch-and-bound phase; 1 is sequential and
    /// bit-reproducible.
    pub workers: usize,
    /// Sign-gradient steps of the per-subproblem descent probe.
    pub local_steps: usize,
    /// Settings for the up-front falsification stage.
    pub pgd: PgdConfig,
}

impl Default for VerifierConfig {
    fn default() -> Self {
        Self {
            min_width: 1e-6,
            max_depth: 40,
            guard_band: 1e-9,
            workers: 1,
            local_steps: 20,
            pgd: PgdConfig::default(),
        }
    }
}

/// Why a query came back undecided, in decreasing precedence.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum UnknownReason {
    Timeout,
    DepthExhausted,
    IncompleteEncoding,
}

impl UnknownReason {
    fn rank(self) -> u8 {
        match self {
            UnknownReason::Timeout => 0,
            UnknownReason::DepthExhausted => 1,
            UnknownReason::IncompleteEncoding => 2,
        }
    }

    /// The higher-precedence of two reasons.
    pub fn dominant(self, other: Self) -> Self {
        if self.rank() <= other.rank() {
            self
        } else {
            other
        }
    }
}

/// Result of one verification run.
#[derive(Debug, Clone, Serialize)]
#[serde(tag = "verdict", rename_all = "lowercase")]
pub enum Verdict {
    Verified,
    Falsified {
        witness: Tensor,
        margins: Vec<(String, f64)>,
        detections: Vec<Detection>,
    },
    Unknown {
        reason: UnknownReason,
    },
}

impl Verdict {
    pub fn category(&self) -> &'static str {
        match self {
            Verdict::Verified => "verified",
            Verdict::Falsified { .. } => "falsified",
            Verdict::Unknown { .. } => "unknown",
        }
    }

    /// Process exit code convention: 0 verified, 1 falsified, 2 unknown.
    pub fn exit_code(&self) -> i32 {
        match self {
            Verdict::Verified => 0,
            Verdict::Falsified { .. } => 1,
            Verdict::Unknown { .. } => 2,
        }
    }
}

/// Counters describing how the verdict was reached.
#[derive(Debug, Clone, Default, Serialize)]
pub struct VerifyStats {
    /// Subproblems bounded, the root included.
    pub subproblems: usize,
    pub max_depth_reached: usize,
    pub certified_leaves: usize,
    pub exhausted_leaves: usize,
    /// Forward passes spent in the up-front falsification stage.
    pub falsifier_evaluations: usize,
    pub wall_time_ms: u64,
    /// The query margins pass through a smooth binarizer, so a Verified
    /// verdict certifies the smoothed property, not the discrete one.
    pub incomplete_encoding: bool,
    pub timed_out: bool,
}

/// Verdict plus its statistics.
#[derive(Debug, Clone, Serialize)]
pub struct VerificationOutcome {
    pub verdict: Verdict,
    pub stats: VerifyStats,
}

#[derive(Debug, Error)]
pub enum VerifyError {
    #[error("malformed query: {0}")]
    Malformed(String),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error(transparent)]
    Bounds(#[from] BoundsError),
}

/// One branch-and-bound work unit.
#[derive(Debug, Clone)]
pub struct Subproblem {
    pub region: BoxBounds,
    pub depth: usize,
    /// Width of the widest side, the queue priority.
    pub width: f64,
    /// Insertion counter breaking priority ties deterministically.
    pub seq: u64,
}

impl Subproblem {
    fn new(region: BoxBounds, depth: usize, seq: u64) -> Self {
        let width = region.max_width();
        Self {
            region,
            depth,
            width,
            seq,
        }
    }
}

impl PartialEq for Subproblem {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == std::cmp::Ordering::Equal
    }
}

impl Eq for Subproblem {}

impl PartialOrd for Subproblem {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Subproblem {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.width
            .total_cmp(&other.width)
            .then(other.seq.cmp(&self.seq))
    }
}

/// Bisect the widest dimension (lowest index on ties). `None` when the box
/// has reached the width floor or the depth limit, which the driver records
/// as an exhausted leaf.
pub fn split_subproblem(
    sub: &Subproblem,
    config: &VerifierConfig,
    next_seq: &mut u64,
) -> Option<(Subproblem, Subproblem)> {
    if sub.depth >= config.max_depth || sub.width <= config.min_width {
        return None;
    }
    let dim = sub.region.widest_dim();
    let (left, right) = sub.region.split(dim);
    let a = Subproblem::new(left, sub.depth + 1, *next_seq);
    let b = Subproblem::new(right, sub.depth + 1, *next_seq + 1);
    *next_seq += 2;
    Some((a, b))
}

/// Merge two branch verdicts: any falsification wins, both certified sides
/// certify, anything else stays unknown under the dominant reason.
pub fn combine(a: Verdict, b: Verdict) -> Verdict {
    match (a, b) {
        (f @ Verdict::Falsified { .. }, _) => f,
        (_, f @ Verdict::Falsified { .. }) => f,
        (Verdict::Verified, Verdict::Verified) => Verdict::Verified,
        (Verdict::Unknown { reason: ra }, Verdict::Unknown { reason: rb }) => Verdict::Unknown {
            reason: ra.dominant(rb),
        },
        (Verdict::Unknown { reason }, _) | (_, Verdict::Unknown { reason }) => {
            Verdict::Unknown { reason }
        }
    }
}

/// Run the full pipeline on a query.
pub fn verify(
    query: &VerificationQuery,
    config: &VerifierConfig,
) -> Result<VerificationOutcome, VerifyError> {
    let start = Instant::now();
    query.check().map_err(VerifyError::Malformed)?;
    let deadline = start + query.timeout;

    let mut stats = VerifyStats {
        incomplete_encoding: query.uses_binarizer,
        ..VerifyStats::default()
    };

    let search = pgd_search(query, &config.pgd, Some(deadline))?;
    stats.falsifier_evaluations = search.evaluations;
    if let Some(w) = search.witness {
        return Ok(finish(falsified_from_witness(query, w), stats, start));
    }
    if Instant::now() >= deadline {
        stats.timed_out = true;
        return Ok(finish(
            Verdict::Unknown {
                reason: UnknownReason::Timeout,
            },
            stats,
            start,
        ));
    }

    let root = Subproblem::new(query.region.bounds(), 0, 0);
    let verdict = if config.workers <= 1 {
        branch_sequential(query, config, root, deadline, &mut stats)?
    } else {
        branch_concurrent(query, config, root, deadline, &mut stats)?
    };
    Ok(finish(verdict, stats, start))
}

fn finish(verdict: Verdict, mut stats: VerifyStats, start: Instant) -> VerificationOutcome {
    stats.wall_time_ms = start.elapsed().as_millis() as u64;
    if matches!(
        verdict,
        Verdict::Unknown {
            reason: UnknownReason::Timeout
        }
    ) {
        stats.timed_out = true;
    }
    VerificationOutcome { verdict, stats }
}

fn falsified_from_witness(query: &VerificationQuery, w: Witness) -> Verdict {
    let detections = decode_at(query, &w.point);
    Verdict::Falsified {
        witness: w.point,
        margins: w.margins,
        detections,
    }
}

/// Decode the detector head at a point; queries whose head node does not
/// carry a full head vector yield no detections.
fn decode_at(query: &VerificationQuery, point: &Tensor) -> Vec<Detection> {
    let Ok(values) = forward_values(&query.graph, std::slice::from_ref(point)) else {
        return Vec::new();
    };
    let head = &values[query.head_node.index()];
    if head.numel() != query.head.head_len() {
        return Vec::new();
    }
    query.head.decode(head).unwrap_or_default()
}

/// Lower-bound every margin over a box: interval propagation first, then
/// backward linear envelopes for margins the intervals cannot clear.
fn bound_margins(
    query: &VerificationQuery,
    box_: &BoxBounds,
    guard: f64,
) -> Result<Vec<f64>, BoundsError> {
    let ivals = ibp_box(&query.graph, box_)?;
    let mut lows: Vec<f64> = query
        .constraints
        .iter()
        .map(|c| ivals.scalar(c.node).0)
        .collect();
    if lows.iter().any(|l| *l <= guard) {
        for (k, c) in query.constraints.iter().enumerate() {
            if lows[k] > guard {
                continue;
            }
            let entry = backward_linear_bounds(&query.graph, &ivals, c.node)?;
            let (ll, _) = concretize(&entry, box_);
            if ll > lows[k] {
                lows[k] = ll;
            }
        }
    }
    Ok(lows)
}

/// Short sign-gradient descent inside one box; any exact violation that
/// also lies in the query region is returned.
fn local_descent(
    query: &VerificationQuery,
    box_: &BoxBounds,
    steps: usize,
    deadline: Instant,
) -> Option<(Tensor, Vec<(String, f64)>)> {
    let shape = query.region.center().shape().to_vec();
    let mut x: Vec<f64> = box_
        .lo
        .iter()
        .zip(&box_.hi)
        .map(|(l, h)| (0.5 * (l + h)).clamp(*l, *h))
        .collect();
    let half_width = 0.5 * box_.max_width();
    let step = half_width / 10.0;
    for step_idx in 0..=steps {
        if Instant::now() >= deadline {
            return None;
        }
        let point = Tensor::new(shape.clone(), x.clone()).expect("box-shaped point");
        let Ok(values) = forward_values(&query.graph, std::slice::from_ref(&point)) else {
            return None;
        };
        let margins: Vec<f64> = query
            .constraints
            .iter()
            .map(|c| values[c.node.index()].scalar_value().expect("scalar margin"))
            .collect();
        let exact_min = margins.iter().copied().fold(f64::INFINITY, f64::min);
        if exact_min <= 0.0 && query.region.contains(&point) {
            let named = query
                .constraints
                .iter()
                .zip(&margins)
                .map(|(c, &m)| (c.name.clone(), m))
                .collect();
            return Some((point, named));
        }
        if step_idx == steps {
            break;
        }
        let Ok(grad) = objective_gradient(query, &values, &margins, 0.0) else {
            return None;
        };
        for i in 0..x.len() {
            x[i] = (x[i] - step * sign(grad[i])).clamp(box_.lo[i], box_.hi[i]);
        }
    }
    None
}

/// What processing one subproblem concluded.
enum Processed {
    Certified,
    Violated(Tensor, Vec<(String, f64)>),
    Split(Subproblem, Subproblem),
    Exhausted,
}

fn process(
    query: &VerificationQuery,
    config: &VerifierConfig,
    sub: &Subproblem,
    deadline: Instant,
    next_seq: &mut u64,
) -> Result<Processed, VerifyError> {
    let lows = bound_margins(query, &sub.region, config.guard_band)?;
    if lows.iter().all(|l| *l > config.guard_band) {
        return Ok(Processed::Certified);
    }
    if let Some((point, margins)) = local_descent(query, &sub.region, config.local_steps, deadline)
    {
        return Ok(Processed::Violated(point, margins));
    }
    Ok(match split_subproblem(sub, config, next_seq) {
        Some((a, b)) => Processed::Split(a, b),
        None => Processed::Exhausted,
    })
}

fn exhaustion_reason(query: &VerificationQuery) -> UnknownReason {
    if query.uses_binarizer {
        UnknownReason::IncompleteEncoding
    } else {
        UnknownReason::DepthExhausted
    }
}

fn branch_sequential(
    query: &VerificationQuery,
    config: &VerifierConfig,
    root: Subproblem,
    deadline: Instant,
    stats: &mut VerifyStats,
) -> Result<Verdict, VerifyError> {
    let mut heap = BinaryHeap::new();
    let mut next_seq = root.seq + 1;
    heap.push(root);
    let mut exhausted = 0usize;
    while let Some(sub) = heap.pop() {
        if Instant::now() >= deadline {
            return Ok(Verdict::Unknown {
                reason: UnknownReason::Timeout,
            });
        }
        stats.subproblems += 1;
        stats.max_depth_reached = stats.max_depth_reached.max(sub.depth);
        match process(query, config, &sub, deadline, &mut next_seq)? {
            Processed::Certified => stats.certified_leaves += 1,
            Processed::Violated(point, margins) => {
                let detections = decode_at(query, &point);
                return Ok(Verdict::Falsified {
                    witness: point,
                    margins,
                    detections,
                });
            }
            Processed::Split(a, b) => {
                heap.push(a);
                heap.push(b);
            }
            Processed::Exhausted => exhausted += 1,
        }
    }
    stats.exhausted_leaves = exhausted;
    if exhausted > 0 {
        Ok(Verdict::Unknown {
            reason: exhaustion_reason(query),
        })
    } else {
        Ok(Verdict::Verified)
    }
}

/// Shared branch-and-bound state for the worker pool.
struct PoolState {
    heap: BinaryHeap<Subproblem>,
    next_seq: u64,
    in_flight: usize,
    exhausted: usize,
    certified: usize,
    bounded: usize,
    max_depth: usize,
    witness: Option<(Tensor, Vec<(String, f64)>)>,
    timed_out: bool,
    failure: Option<String>,
    stop: bool,
}

fn branch_concurrent(
    query: &VerificationQuery,
    config: &VerifierConfig,
    root: Subproblem,
    deadline: Instant,
    stats: &mut VerifyStats,
) -> Result<Verdict, VerifyError> {
    let state = Mutex::new(PoolState {
        next_seq: root.seq + 1,
        heap: BinaryHeap::from([root]),
        in_flight: 0,
        exhausted: 0,
        certified: 0,
        bounded: 0,
        max_depth: 0,
        witness: None,
        timed_out: false,
        failure: None,
        stop: false,
    });
    let ready = Condvar::new();

    std::thread::scope(|scope| {
        for _ in 0..config.workers {
            scope.spawn(|| {
                let mut guard = state.lock().unwrap();
                loop {
                    if guard.stop {
                        ready.notify_all();
                        return;
                    }
                    if Instant::now() >= deadline {
                        guard.timed_out = true;
                        guard.stop = true;
                        ready.notify_all();
                        return;
                    }
                    let Some(sub) = guard.heap.pop() else {
                        if guard.in_flight == 0 {
                            guard.stop = true;
                            ready.notify_all();
                            return;
                        }
                        let (g, _) = ready
                            .wait_timeout(guard, Duration::from_millis(10))
                            .unwrap();
                        guard = g;
                        continue;
                    };
                    guard.in_flight += 1;
                    guard.bounded += 1;
                    guard.max_depth = guard.max_depth.max(sub.depth);
                    // Split sequence numbers only order the queue; handing
                    // each worker a disjoint range keeps them race-free.
                    let mut seq = guard.next_seq;
                    guard.next_seq += 2;
                    drop(guard);

                    let outcome = process(query, config, &sub, deadline, &mut seq);

                    guard = state.lock().unwrap();
                    guard.in_flight -= 1;
                    match outcome {
                        Err(e) => {
                            if guard.failure.is_none() {
                                guard.failure = Some(e.to_string());
                            }
                            guard.stop = true;
                        }
                        Ok(Processed::Certified) => guard.certified += 1,
                        Ok(Processed::Violated(point, margins)) => {
                            if guard.witness.is_none() {
                                guard.witness = Some((point, margins));
                            }
                            guard.stop = true;
                        }
                        Ok(Processed::Split(a, b)) => {
                            guard.heap.push(a);
                            guard.heap.push(b);
                        }
                        Ok(Processed::Exhausted) => guard.exhausted += 1,
                    }
                    ready.notify_all();
                }
            });
        }
    });

    let state = state.into_inner().unwrap();
    stats.subproblems += state.bounded;
    stats.certified_leaves = state.certified;
    stats.exhausted_leaves = state.exhausted;
    stats.max_depth_reached = state.max_depth;
    if let Some(msg) = state.failure {
        return Err(VerifyError::Malformed(msg));
    }
    if let Some((point, margins)) = state.witness {
        let detections = decode_at(query, &point);
        return Ok(Verdict::Falsified {
            witness: point,
            margins,
            detections,
        });
    }
    if state.timed_out {
        return Ok(Verdict::Unknown {
            reason: UnknownReason::Timeout,
        });
    }
    if state.exhausted > 0 {
        return Ok(Verdict::Unknown {
            reason: exhaustion_reason(query),
        });
    }
    Ok(Verdict::Verified)
}

/// Hex encoding of a float's exact bit pattern.
pub fn f64_to_hex(v: f64) -> String {
    format!("{:016X}", v.to_bits())
}

/// Inverse of [`f64_to_hex`].
pub fn f64_from_hex(s: &str) -> Option<f64> {
    u64::from_str_radix(s, 16).ok().map(f64::from_bits)
}

/// Full verdict document: verdict, witness in exact base-16 bits, margins,
/// statistics, and the effective configuration.
pub fn outcome_json(
    query: &VerificationQuery,
    outcome: &VerificationOutcome,
    config: &VerifierConfig,
) -> serde_json::Value {
    let (reason, witness, margins, detections) = match &outcome.verdict {
        Verdict::Verified => (None, None, None, None),
        Verdict::Unknown { reason } => (Some(*reason), None, None, None),
        Verdict::Falsified {
            witness,
            margins,
            detections,
        } => {
            let bits: Vec<String> = witness.data().iter().copied().map(f64_to_hex).collect();
            let doc = json!({
                "shape": witness.shape(),
                "bits": bits,
                "values": witness.data(),
            });
            (None, Some(doc), Some(margins.clone()), Some(detections.clone()))
        }
    };
    json!({
        "verdict": outcome.verdict.category(),
        "reason": reason,
        "witness": witness,
        "margins": margins.map(|ms| ms
            .iter()
            .map(|(name, value)| json!({"name": name, "value": value}))
            .collect::<Vec<_>>()),
        "detections": detections,
        "stats": outcome.stats,
        "config": {
            "min_width": config.min_width,
            "max_depth": config.max_depth,
            "guard_band": config.guard_band,
            "workers": config.workers,
            "local_steps": config.local_steps,
            "pgd": config.pgd,
            "timeout_s": query.timeout.as_secs_f64(),
            "attack": query.kind.to_string(),
            "constraints": query.constraints.iter().map(|c| c.name.clone()).collect::<Vec<_>>(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{DetectionHeadSpec, GroundTruthSet};
    use crate::encoder::{AttackKind, MarginConstraint};
    use crate::graph::ComputeGraph;
    use crate::region::InputRegion;
    use crate::tensor::Tensor;

    fn query_from(
        g: ComputeGraph,
        margin: crate::graph::NodeId,
        center: Vec<f64>,
        epsilon: f64,
        timeout: Duration,
        uses_binarizer: bool,
    ) -> VerificationQuery {
        let head_node = g.inputs()[0];
        VerificationQuery {
            region: InputRegion::uniform(Tensor::vector(center), epsilon, false).unwrap(),
            constraints: vec![MarginConstraint {
                name: "margin".to_string(),
                node: margin,
            }],
            kind: AttackKind::Misclassification,
            timeout,
            head: DetectionHeadSpec::block_layout(1, 1).unwrap(),
            head_node,
            ground_truth: GroundTruthSet::empty(),
            uses_binarizer,
            graph: g,
        }
    }

    fn affine_margin(w: Vec<f64>, b: f64) -> (ComputeGraph, crate::graph::NodeId) {
        let dims = w.len();
        let mut g = ComputeGraph::new();
        let x = g.input(vec![dims]);
        let wt = Tensor::new(vec![1, dims], w).unwrap();
        let m = g.affine(x, wt, Tensor::vector(vec![b])).unwrap();
        g.set_output("margin", m).unwrap();
        (g, m)
    }

    /// margin = sigmoid(4x) + sigmoid(-4x) - 0.8, identically 0.2 but
    /// provable by the relaxations only after one split at the inflection.
    fn sigmoid_pair_query(timeout: Duration) -> VerificationQuery {
        let mut g = ComputeGraph::new();
        let x = g.input(vec![1]);
        let s1 = g.sigmoid(x, 4.0).unwrap();
        let wneg = Tensor::new(vec![1, 1], vec![-1.0]).unwrap();
        let neg = g.affine(x, wneg, Tensor::vector(vec![0.0])).unwrap();
        let s2 = g.sigmoid(neg, 4.0).unwrap();
        let sum = g.add(s1, s2).unwrap();
        let c = g.scalar(0.8);
        let m = g.sub(sum, c).unwrap();
        g.set_output("margin", m).unwrap();
        query_from(g, m, vec![0.0], 0.4, timeout, false)
    }

    #[test]
    fn center_violation_returns_the_center_as_witness() {
        let (g, m) = affine_margin(vec![0.0, 0.0], -0.1);
        let q = query_from(g, m, vec![0.3, 0.7], 0.05, Duration::from_secs(10), false);
        let out = verify(&q, &VerifierConfig::default()).unwrap();
        match out.verdict {
            Verdict::Falsified {
                witness, margins, ..
            } => {
                assert_eq!(witness.data(), &[0.3, 0.7]);
                assert_eq!(margins[0].1, -0.1);
            }
            other => panic!("expected falsified, got {other:?}"),
        }
        assert_eq!(out.stats.subproblems, 0);
    }

    #[test]
    fn affine_margin_certifies_at_the_root() {
        // min over the box = b - eps*|w|_1 = 0.3 - 0.1 = 0.2.
        let (g, m) = affine_margin(vec![1.0, -1.0], 0.3);
        let q = query_from(g, m, vec![0.5, 0.5], 0.05, Duration::from_secs(10), false);
        let out = verify(&q, &VerifierConfig::default()).unwrap();
        assert!(matches!(out.verdict, Verdict::Verified));
        assert_eq!(out.stats.subproblems, 1);
        assert_eq!(out.stats.certified_leaves, 1);
        assert!(!out.stats.incomplete_encoding);
    }

    #[test]
    fn zero_budget_is_a_timeout() {
        let (g, m) = affine_margin(vec![1.0], 1.0);
        let q = query_from(g, m, vec![0.5], 0.1, Duration::ZERO, false);
        let out = verify(&q, &VerifierConfig::default()).unwrap();
        assert!(matches!(
            out.verdict,
            Verdict::Unknown {
                reason: UnknownReason::Timeout
            }
        ));
        assert!(out.stats.timed_out);
    }

    #[test]
    fn splitting_proves_what_the_root_relaxation_cannot() {
        let q = sigmoid_pair_query(Duration::from_secs(30));
        let out = verify(&q, &VerifierConfig::default()).unwrap();
        assert!(matches!(out.verdict, Verdict::Verified), "{:?}", out.verdict);
        assert!(out.stats.subproblems >= 3, "root must split");
        assert!(out.stats.max_depth_reached >= 1);
        assert_eq!(out.stats.exhausted_leaves, 0);
    }

    #[test]
    fn depth_zero_limit_exhausts_instead_of_certifying() {
        let q = sigmoid_pair_query(Duration::from_secs(30));
        let config = VerifierConfig {
            max_depth: 0,
            ..VerifierConfig::default()
        };
        let out = verify(&q, &config).unwrap();
        assert!(matches!(
            out.verdict,
            Verdict::Unknown {
                reason: UnknownReason::DepthExhausted
            }
        ));
        assert_eq!(out.stats.exhausted_leaves, 1);
    }

    #[test]
    fn binarizer_queries_exhaust_as_incomplete_encoding() {
        let mut q = sigmoid_pair_query(Duration::from_secs(30));
        q.uses_binarizer = true;
        let config = VerifierConfig {
            max_depth: 0,
            ..VerifierConfig::default()
        };
        let out = verify(&q, &config).unwrap();
        assert!(matches!(
            out.verdict,
            Verdict::Unknown {
                reason: UnknownReason::IncompleteEncoding
            }
        ));
        assert!(out.stats.incomplete_encoding);
    }

    #[test]
    fn widest_dimension_splits_first_with_low_index_ties() {
        let config = VerifierConfig::default();
        let mut seq = 1;
        let sub = Subproblem::new(
            BoxBounds {
                lo: vec![0.0, 0.0],
                hi: vec![0.2, 0.6],
            },
            0,
            0,
        );
        let (a, b) = split_subproblem(&sub, &config, &mut seq).unwrap();
        assert_eq!(a.region.hi, vec![0.2, 0.3]);
        assert_eq!(b.region.lo, vec![0.0, 0.3]);

        let tie = Subproblem::new(
            BoxBounds {
                lo: vec![0.0, 0.0],
                hi: vec![0.4, 0.4],
            },
            0,
            0,
        );
        let (a, b) = split_subproblem(&tie, &config, &mut seq).unwrap();
        assert_eq!(a.region.hi, vec![0.2, 0.4]);
        assert_eq!(b.region.lo, vec![0.2, 0.0]);
    }

    #[test]
    fn split_stops_at_the_width_floor_and_depth_limit() {
        let config = VerifierConfig::default();
        let mut seq = 0;
        let narrow = Subproblem::new(
            BoxBounds {
                lo: vec![0.0],
                hi: vec![config.min_width * 0.5],
            },
            3,
            0,
        );
        assert!(split_subproblem(&narrow, &config, &mut seq).is_none());
        let deep = Subproblem::new(
            BoxBounds {
                lo: vec![0.0],
                hi: vec![1.0],
            },
            config.max_depth,
            0,
        );
        assert!(split_subproblem(&deep, &config, &mut seq).is_none());
    }

    #[test]
    fn combine_follows_the_verdict_lattice() {
        let falsified = || Verdict::Falsified {
            witness: Tensor::vector(vec![0.0]),
            margins: vec![("m".to_string(), -1.0)],
            detections: Vec::new(),
        };
        let unknown = |reason| Verdict::Unknown { reason };
        assert!(matches!(
            combine(Verdict::Verified, Verdict::Verified),
            Verdict::Verified
        ));
        assert!(matches!(
            combine(Verdict::Verified, falsified()),
            Verdict::Falsified { .. }
        ));
        assert!(matches!(
            combine(unknown(UnknownReason::DepthExhausted), Verdict::Verified),
            Verdict::Unknown {
                reason: UnknownReason::DepthExhausted
            }
        ));
        assert!(matches!(
            combine(unknown(UnknownReason::Timeout), falsified()),
            Verdict::Falsified { .. }
        ));
        assert!(matches!(
            combine(
                unknown(UnknownReason::IncompleteEncoding),
                unknown(UnknownReason::Timeout)
            ),
            Verdict::Unknown {
                reason: UnknownReason::Timeout
            }
        ));
    }

    #[test]
    fn negative_pocket_is_falsified_by_branching() {
        // margin = x*x - 0.02: negative only inside |x| < sqrt(0.02), while
        // the descent direction from either side points at the pocket.
        let mut g = ComputeGraph::new();
        let x = g.input(vec![1]);
        let p = g.mul(x, x).unwrap();
        let c = g.scalar(0.02);
        let m = g.sub(p, c).unwrap();
        g.set_output("margin", m).unwrap();
        let q = query_from(g, m, vec![0.5], 0.5, Duration::from_secs(30), false);
        let out = verify(&q, &VerifierConfig::default()).unwrap();
        match &out.verdict {
            Verdict::Falsified {
                witness, margins, ..
            } => {
                let v = witness.data()[0];
                assert!(v * v - 0.02 <= 0.0);
                assert!(q.region.contains(witness));
                assert!(margins[0].1 <= 0.0);
            }
            other => panic!("expected falsified, got {other:?}"),
        }
    }

    #[test]
    fn verdicts_are_reproducible_run_to_run() {
        let build = || sigmoid_pair_query(Duration::from_secs(30));
        let a = verify(&build(), &VerifierConfig::default()).unwrap();
        let b = verify(&build(), &VerifierConfig::default()).unwrap();
        assert_eq!(a.verdict.category(), b.verdict.category());
        assert_eq!(a.stats.subproblems, b.stats.subproblems);
        assert_eq!(a.stats.certified_leaves, b.stats.certified_leaves);
    }

    #[test]
    fn worker_pool_reaches_the_same_category() {
        let parallel = VerifierConfig {
            workers: 4,
            ..VerifierConfig::default()
        };
        let q = sigmoid_pair_query(Duration::from_secs(30));
        let out = verify(&q, &parallel).unwrap();
        assert!(matches!(out.verdict, Verdict::Verified), "{:?}", out.verdict);

        let mut g = ComputeGraph::new();
        let x = g.input(vec![1]);
        let p = g.mul(x, x).unwrap();
        let c = g.scalar(0.02);
        let m = g.sub(p, c).unwrap();
        g.set_output("margin", m).unwrap();
        let q = query_from(g, m, vec![0.5], 0.5, Duration::from_secs(30), false);
        let out = verify(&q, &parallel).unwrap();
        assert!(matches!(out.verdict, Verdict::Falsified { .. }));
    }

    #[test]
    fn hex_bits_round_trip_exactly() {
        for v in [0.0, -0.0, 1.5, -1.0 / 3.0, f64::MIN_POSITIVE, 1e300] {
            let hex = f64_to_hex(v);
            assert_eq!(hex.len(), 16);
            let back = f64_from_hex(&hex).unwrap();
            assert_eq!(back.to_bits(), v.to_bits());
        }
        assert_eq!(f64_to_hex(1.0), "3FF0000000000000");
        assert!(f64_from_hex("zz").is_none());
    }

    #[test]
    fn verdict_document_carries_exact_witness_bits() {
        let (g, m) = affine_margin(vec![0.0], -0.25);
        let q = query_from(g, m, vec![1.0 / 3.0], 0.05, Duration::from_secs(10), false);
        let config = VerifierConfig::default();
        let out = verify(&q, &config).unwrap();
        let doc = outcome_json(&q, &out, &config);
        assert_eq!(doc["verdict"], "falsified");
        let bits = doc["witness"]["bits"][0].as_str().unwrap();
        assert_eq!(f64_from_hex(bits).unwrap(), 1.0 / 3.0);
        assert_eq!(doc["config"]["max_depth"], 40);
        assert_eq!(doc["margins"][0]["value"], -0.25);

        let verified = {
            let (g, m) = affine_margin(vec![1.0], 0.3);
            let q = query_from(g, m, vec![0.5], 0.05, Duration::from_secs(10), false);
            let out = verify(&q, &config).unwrap();
            outcome_json(&q, &out, &config)
        };
        assert_eq!(verified["verdict"], "verified");
        assert!(verified["witness"].is_null());
    }
}

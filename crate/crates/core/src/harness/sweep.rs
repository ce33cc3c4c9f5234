//! Perturbation-budget sweeps: run the verifier across a range of ε values
//! and localize the Verified→Falsified transition.
//!
//! Sweeps either evaluate an explicit ε list or bisect geometrically from
//! the default probe set until the bracket `[max verified, min falsified]`
//! has relative width ≤ 0.25. An Unknown verdict at a bisection midpoint
//! stops refinement; the bracket found so far is still reported.

use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::detection::{DetectionHeadSpec, GroundTruthSet};
use crate::encoder::{encode_query, AttackKind, EncodeOptions, EncoderError};
use crate::graph::ComputeGraph;
use crate::tensor::Tensor;
use crate::verifier::{verify, UnknownReason, Verdict, VerifierConfig, VerifyError};

/// Initial ε values probed in bisection mode.
pub const DEFAULT_PROBES: [f64; 3] = [1e-4, 1e-3, 1e-2];

/// Largest ε bisection will extend to; radius 1 already spans the whole
/// clipped pixel range.
const MAX_EPSILON: f64 = 1.0;
const MIN_EPSILON: f64 = 1e-9;
const MAX_EXTENSIONS: usize = 8;
const MAX_REFINEMENTS: usize = 32;
/// Bracket is done when (hi - lo) / hi drops to this.
const TARGET_RELATIVE_WIDTH: f64 = 0.25;

#[derive(Debug, Error)]
pub enum SweepError {
    #[error("sweep config: {0}")]
    Config(String),
    #[error(transparent)]
    Encode(#[from] EncoderError),
    #[error(transparent)]
    Verify(#[from] VerifyError),
    #[error("incoherent sweep: verified at {verified} above falsified at {falsified}")]
    Incoherent { verified: f64, falsified: f64 },
}

/// Which ε values to visit.
#[derive(Debug, Clone)]
pub enum SweepMode {
    /// Verify exactly these values.
    List(Vec<f64>),
    /// Probe [`DEFAULT_PROBES`], extend outward until the transition is
    /// bracketed, then bisect geometrically.
    Bisect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SweepCategory {
    Verified,
    Falsified,
    Unknown,
}

/// One verifier run inside a sweep.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SweepPoint {
    pub epsilon: f64,
    pub category: SweepCategory,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub reason: Option<UnknownReason>,
}

/// All visited points (ascending ε) plus the transition bracket.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepResult {
    pub points: Vec<SweepPoint>,
    pub max_verified: Option<f64>,
    pub min_falsified: Option<f64>,
}

impl SweepResult {
    /// The localized transition interval, when both ends were observed.
    pub fn transition(&self) -> Option<(f64, f64)> {
        Some((self.max_verified?, self.min_falsified?))
    }
}

/// Everything needed to re-encode the query at each ε.
pub struct SweepRequest<'a> {
    pub kind: AttackKind,
    pub model: &'a ComputeGraph,
    pub head: &'a DetectionHeadSpec,
    pub image: &'a Tensor,
    pub gts: &'a GroundTruthSet,
    pub tau: f64,
    pub slope: f64,
    pub timeout_per_query: Duration,
    pub encode: EncodeOptions,
    pub verifier: VerifierConfig,
}

fn evaluate(
    req: &SweepRequest<'_>,
    epsilon: f64,
    points: &mut Vec<SweepPoint>,
) -> Result<SweepCategory, SweepError> {
    if !(epsilon.is_finite() && epsilon >= 0.0) {
        return Err(SweepError::Config(format!("epsilon {epsilon} not usable")));
    }
    if let Some(seen) = points.iter().find(|p| p.epsilon == epsilon) {
        return Ok(seen.category);
    }
    let query = encode_query(
        req.kind,
        req.model,
        req.head,
        req.image,
        req.gts,
        epsilon,
        req.tau,
        req.slope,
        req.timeout_per_query,
        &req.encode,
    )?;
    let outcome = verify(&query, &req.verifier)?;
    let (category, reason) = match outcome.verdict {
        Verdict::Verified => (SweepCategory::Verified, None),
        Verdict::Falsified { .. } => (SweepCategory::Falsified, None),
        Verdict::Unknown { reason } => (SweepCategory::Unknown, Some(reason)),
    };
    points.push(SweepPoint {
        epsilon,
        category,
        reason,
    });
    Ok(category)
}

/// Current bracket: largest verified ε and smallest falsified ε.
fn bracket(points: &[SweepPoint]) -> (Option<f64>, Option<f64>) {
    let mut max_verified = None;
    let mut min_falsified = None;
    for p in points {
        match p.category {
            SweepCategory::Verified => {
                if max_verified.is_none_or(|v: f64| p.epsilon > v) {
                    max_verified = Some(p.epsilon);
                }
            }
            SweepCategory::Falsified => {
                if min_falsified.is_none_or(|f: f64| p.epsilon < f) {
                    min_falsified = Some(p.epsilon);
                }
            }
            SweepCategory::Unknown => {}
        }
    }
    (max_verified, min_falsified)
}

/// Run the verifier over a range of perturbation budgets.
pub fn epsilon_sweep(req: &SweepRequest<'_>, mode: SweepMode) -> Result<SweepResult, SweepError> {
    let mut points = Vec::new();
    match mode {
        SweepMode::List(eps) => {
            if eps.is_empty() {
                return Err(SweepError::Config("empty epsilon list".into()));
            }
            for epsilon in eps {
                evaluate(req, epsilon, &mut points)?;
            }
        }
        SweepMode::Bisect => {
            for epsilon in DEFAULT_PROBES {
                evaluate(req, epsilon, &mut points)?;
            }
            let mut top = DEFAULT_PROBES[2];
            for _ in 0..MAX_EXTENSIONS {
                if bracket(&points).1.is_some() {
                    break;
                }
                let next = (top * 10.0).min(MAX_EPSILON);
                if next <= top {
                    break;
                }
                evaluate(req, next, &mut points)?;
                top = next;
            }
            let mut bottom = DEFAULT_PROBES[0];
            for _ in 0..MAX_EXTENSIONS {
                if bracket(&points).0.is_some() {
                    break;
                }
                let next = (bottom / 10.0).max(MIN_EPSILON);
                if next >= bottom {
                    break;
                }
                evaluate(req, next, &mut points)?;
                bottom = next;
            }
            for _ in 0..MAX_REFINEMENTS {
                let (Some(lo), Some(hi)) = bracket(&points) else {
                    break;
                };
                if (hi - lo) / hi <= TARGET_RELATIVE_WIDTH {
                    break;
                }
                let mid = (lo * hi).sqrt();
                if !(mid > lo && mid < hi) {
                    break;
                }
                if evaluate(req, mid, &mut points)? == SweepCategory::Unknown {
                    break;
                }
            }
        }
    }
    points.sort_by(|a, b| a.epsilon.total_cmp(&b.epsilon));
    let (max_verified, min_falsified) = bracket(&points);
    if let (Some(v), Some(f)) = (max_verified, min_falsified) {
        if v >= f {
            return Err(SweepError::Incoherent {
                verified: v,
                falsified: f,
            });
        }
    }
    Ok(SweepResult {
        points,
        max_verified,
        min_falsified,
    })
}

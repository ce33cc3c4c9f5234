//! Projected-gradient counterexample search over verification queries.
//!
//! The search minimizes a scalarization of the query margins with
//! sign-gradient steps, projecting back into the perturbation region after
//! each step. The clean image is always tried first; further restarts start
//! from uniform samples of the region. A candidate counts as a witness only
//! when its exact margins (never the smoothed objective) contain a value at
//! or below zero. Misdetection queries steer by per-box objectness flip
//! distances instead of the margin scalarization, whose steep binarizer
//! makes gradients uninformative.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use crate::encoder::{AttackKind, VerificationQuery, OBJECTNESS_THRESHOLD};
use crate::eval::{backward, forward_values, EvalError};
use crate::tensor::Tensor;

/// How far past the decision threshold the misdetection surrogate pushes an
/// objectness score before the count margin flips on its own.
const FLIP_GUARD: f64 = 0.05;

/// Margin weights below this skip their gradient pass.
const WEIGHT_FLOOR: f64 = 1e-12;

/// Knobs for [`pgd_search`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PgdConfig {
    /// Gradient steps per start point.
    pub steps: usize,
    /// Uniform-sample restarts after the clean-image start.
    pub restarts: usize,
    /// Absolute step size; defaults to a tenth of the largest region radius.
    pub step_size: Option<f64>,
    /// Soft-min temperature; zero follows the exact minimum margin.
    pub temperature: f64,
    pub seed: u64,
}

impl Default for PgdConfig {
    fn default() -> Self {
        Self {
            steps: 200,
            restarts: 10,
            step_size: None,
            temperature: 0.0,
            seed: 0,
        }
    }
}

/// A region point whose exact margins contain a violation.
#[derive(Debug, Clone, Serialize)]
pub struct Witness {
    pub point: Tensor,
    /// Exact margins at the point, in constraint order.
    pub margins: Vec<(String, f64)>,
    /// Smallest margin value.
    pub objective: f64,
    /// Which start found it: 0 is the clean image, then sampled restarts.
    pub restart: usize,
    pub step: usize,
}

/// Search outcome, witness or not.
#[derive(Debug, Clone, Serialize)]
pub struct SearchReport {
    pub witness: Option<Witness>,
    /// Lowest exact minimum margin seen anywhere in the search.
    pub best_margin: f64,
    pub best_point: Tensor,
    /// Forward evaluations spent.
    pub evaluations: usize,
    pub timed_out: bool,
}

/// Soft minimum of the margins: `-T ln Σ exp(-m_i / T)`, computed against
/// the shifted maximum so large magnitudes cannot overflow. Zero temperature
/// gives the exact minimum. Always at or below the exact minimum.
pub fn scalarize(margins: &[f64], temperature: f64) -> f64 {
    assert!(!margins.is_empty(), "scalarize needs at least one margin");
    let exact = margins.iter().copied().fold(f64::INFINITY, f64::min);
    if temperature <= 0.0 || margins.len() == 1 {
        return exact;
    }
    let sum: f64 = margins
        .iter()
        .map(|m| (-(m - exact) / temperature).exp())
        .sum();
    exact - temperature * sum.ln()
}

/// Gradient of [`scalarize`] with respect to each margin. Zero temperature
/// returns a one-hot on the first minimal margin.
pub fn scalarize_weights(margins: &[f64], temperature: f64) -> Vec<f64> {
    assert!(!margins.is_empty(), "scalarize needs at least one margin");
    let exact = margins.iter().copied().fold(f64::INFINITY, f64::min);
    if temperature <= 0.0 {
        let mut w = vec![0.0; margins.len()];
        let argmin = margins.iter().position(|&m| m == exact).unwrap_or(0);
        w[argmin] = 1.0;
        return w;
    }
    let mut w: Vec<f64> = margins
        .iter()
        .map(|m| (-(m - exact) / temperature).exp())
        .collect();
    let sum: f64 = w.iter().sum();
    for v in &mut w {
        *v /= sum;
    }
    w
}

/// Sign with a dead zone: zero gradient moves nothing.
pub(crate) fn sign(x: f64) -> f64 {
    if x > 0.0 {
        1.0
    } else if x < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Run the projected sign-gradient search. Returns the first witness found,
/// scanning the clean image and then `config.restarts` uniform restarts.
/// `deadline` cuts the search off mid-stream when present.
pub fn pgd_search(
    query: &VerificationQuery,
    config: &PgdConfig,
    deadline: Option<Instant>,
) -> Result<SearchReport, EvalError> {
    let center = query.region.center().data().to_vec();
    let (lo, hi) = {
        let b = query.region.bounds();
        (b.lo, b.hi)
    };
    let epsilon = query
        .region
        .radius()
        .data()
        .iter()
        .copied()
        .fold(0.0_f64, f64::max);
    let step = config.step_size.unwrap_or(epsilon / 10.0);
    let shape = query.region.center().shape().to_vec();

    let mut report = SearchReport {
        witness: None,
        best_margin: f64::INFINITY,
        best_point: query.region.center().clone(),
        evaluations: 0,
        timed_out: false,
    };

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    for restart in 0..=config.restarts {
        let mut x = if restart == 0 {
            center.clone()
        } else {
            rng.set_stream(restart as u64);
            let mut sample: Vec<f64> = (0..center.len())
                .map(|i| lo[i] + rng.gen::<f64>() * (hi[i] - lo[i]))
                .collect();
            clip(&mut sample, &lo, &hi);
            sample
        };

        for step_idx in 0..=config.steps {
            if deadline.is_some_and(|d| Instant::now() >= d) {
                report.timed_out = true;
                return Ok(report);
            }
            let point = Tensor::new(shape.clone(), x.clone()).expect("region-shaped point");
            let values = match forward_values(&query.graph, std::slice::from_ref(&point)) {
                Ok(v) => v,
                Err(e) if restart == 0 && step_idx == 0 => return Err(e),
                Err(_) => break,
            };
            report.evaluations += 1;
            let margins: Vec<f64> = query
                .constraints
                .iter()
                .map(|c| values[c.node.index()].scalar_value().expect("scalar margin"))
                .collect();
            let exact_min = margins.iter().copied().fold(f64::INFINITY, f64::min);
            if exact_min < report.best_margin {
                report.best_margin = exact_min;
                report.best_point = point.clone();
            }
            if exact_min <= 0.0 && query.region.contains(&point) {
                report.witness = Some(Witness {
                    point,
                    margins: query
                        .constraints
                        .iter()
                        .zip(&margins)
                        .map(|(c, &m)| (c.name.clone(), m))
                        .collect(),
                    objective: exact_min,
                    restart,
                    step: step_idx,
                });
                return Ok(report);
            }
            if step_idx == config.steps {
                break;
            }

            let grad = match objective_gradient(query, &values, &margins, config.temperature) {
                Ok(g) => g,
                Err(_) => break,
            };
            for (xi, gi) in x.iter_mut().zip(&grad) {
                *xi -= step * sign(*gi);
            }
            clip(&mut x, &lo, &hi);
        }
    }
    Ok(report)
}

/// Project onto the region box (the box already carries any image clip).
fn clip(x: &mut [f64], lo: &[f64], hi: &[f64]) {
    for i in 0..x.len() {
        x[i] = x[i].clamp(lo[i], hi[i]);
    }
}

/// Gradient of the search objective with respect to the flat input.
pub(crate) fn objective_gradient(
    query: &VerificationQuery,
    values: &[Tensor],
    margins: &[f64],
    temperature: f64,
) -> Result<Vec<f64>, EvalError> {
    if query.kind == AttackKind::Misdetection {
        return flip_gradient(query, values);
    }
    let weights = scalarize_weights(margins, temperature);
    let numel = query.region.center().numel();
    let mut grad = vec![0.0; numel];
    for (constraint, w) in query.constraints.iter().zip(weights) {
        if w < WEIGHT_FLOOR {
            continue;
        }
        let seed = Tensor::new(vec![1], vec![w]).unwrap();
        let g = backward(&query.graph, values, constraint.node, &seed)?;
        for (acc, v) in grad.iter_mut().zip(g.input_grads[0].data()) {
            *acc += v;
        }
    }
    Ok(grad)
}

/// Misdetection surrogate: descend the smallest distance-to-flip over all
/// objectness scores, in whichever direction crosses the threshold.
fn flip_gradient(query: &VerificationQuery, values: &[Tensor]) -> Result<Vec<f64>, EvalError> {
    let head = &values[query.head_node.index()];
    let mut best: Option<(f64, usize, f64)> = None;
    for slots in &query.head.boxes {
        let o = head.data()[slots.objectness];
        // Flip away from the side the box currently counts on: positives
        // descend below the threshold band, negatives climb above it.
        let (dist, dir) = if o >= OBJECTNESS_THRESHOLD {
            (o - (OBJECTNESS_THRESHOLD - FLIP_GUARD), 1.0)
        } else {
            ((OBJECTNESS_THRESHOLD + FLIP_GUARD) - o, -1.0)
        };
        if best.is_none_or(|(b, _, _)| dist < b) {
            best = Some((dist, slots.objectness, dir));
        }
    }
    let (_, slot, dir) = best.expect("head has at least one box");
    let mut seed_data = vec![0.0; head.numel()];
    seed_data[slot] = dir;
    let seed = Tensor::new(head.shape().to_vec(), seed_data).unwrap();
    let g = backward(&query.graph, values, query.head_node, &seed)?;
    Ok(g.input_grads[0].data().to_vec())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detection::{DetectionHeadSpec, GroundTruthSet};
    use crate::encoder::MarginConstraint;
    use crate::graph::ComputeGraph;
    use crate::region::InputRegion;
    use std::time::Duration;

    fn linear_query(
        weights: Vec<f64>,
        bias: f64,
        center: Vec<f64>,
        epsilon: f64,
        clip01: bool,
    ) -> VerificationQuery {
        let dims = weights.len();
        let mut g = ComputeGraph::new();
        let x = g.input(vec![dims]);
        let w = Tensor::new(vec![1, dims], weights).unwrap();
        let m = g.affine(x, w, Tensor::vector(vec![bias])).unwrap();
        g.set_output("margin", m).unwrap();
        VerificationQuery {
            graph: g,
            region: InputRegion::uniform(Tensor::vector(center), epsilon, clip01).unwrap(),
            constraints: vec![MarginConstraint {
                name: "margin".to_string(),
                node: m,
            }],
            kind: AttackKind::Misclassification,
            timeout: Duration::from_secs(10),
            head: DetectionHeadSpec::block_layout(1, 1).unwrap(),
            head_node: x,
            ground_truth: GroundTruthSet::empty(),
            uses_binarizer: false,
        }
    }

    #[test]
    fn single_margin_scalarizes_to_itself_at_any_temperature() {
        for t in [0.0, 0.01, 1.0, 50.0] {
            assert_eq!(scalarize(&[0.37], t), 0.37);
        }
    }

    #[test]
    fn zero_temperature_is_the_exact_minimum() {
        assert_eq!(scalarize(&[0.5, 0.1], 0.0), 0.1);
        assert_eq!(scalarize(&[-0.2, 0.1, 0.4], 0.0), -0.2);
    }

    #[test]
    fn equal_margins_at_unit_temperature_drop_by_log_two() {
        let v = scalarize(&[0.0, 0.0], 1.0);
        assert!((v + std::f64::consts::LN_2).abs() < 1e-12, "{v}");
    }

    #[test]
    fn soft_min_never_exceeds_the_exact_minimum() {
        let cases = [
            vec![0.5, 0.1],
            vec![-3.0, 200.0, 0.0],
            vec![1e6, 1e6 + 1.0],
            vec![0.25; 7],
        ];
        for margins in &cases {
            let exact = margins.iter().copied().fold(f64::INFINITY, f64::min);
            for t in [1e-6, 0.01, 1.0, 100.0] {
                let soft = scalarize(margins, t);
                assert!(soft <= exact + 1e-12, "T={t} soft={soft} exact={exact}");
            }
        }
    }

    #[test]
    fn weights_form_a_softmax_over_negated_margins() {
        let w = scalarize_weights(&[0.5, 0.1], 0.0);
        assert_eq!(w, vec![0.0, 1.0]);
        let w = scalarize_weights(&[0.2, 0.2], 0.0);
        assert_eq!(w, vec![1.0, 0.0]);
        let w = scalarize_weights(&[0.0, 0.0], 1.0);
        assert!((w[0] - 0.5).abs() < 1e-12 && (w[1] - 0.5).abs() < 1e-12);
        let w = scalarize_weights(&[0.0, 1.0], 0.5);
        assert!(w[0] > w[1] && (w.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn sign_has_a_dead_zone_at_zero() {
        assert_eq!(sign(0.0), 0.0);
        assert_eq!(sign(-0.0), 0.0);
        assert_eq!(sign(3.2), 1.0);
        assert_eq!(sign(-1e-300), -1.0);
        assert_eq!(sign(f64::NAN), 0.0);
    }

    #[test]
    fn linear_search_reaches_the_analytic_minimizer() {
        // min of w.x + b over the box sits at center - eps*sign(w); a
        // positive minimum keeps the search running to convergence.
        let query = linear_query(vec![2.0, -1.0], 0.35, vec![0.3, 0.6], 0.1, false);
        let report = pgd_search(&query, &PgdConfig::default(), None).unwrap();
        assert!(report.witness.is_none());
        assert!((report.best_point.data()[0] - 0.2).abs() < 1e-9);
        assert!((report.best_point.data()[1] - 0.7).abs() < 1e-9);
        // w.center - eps*|w|_1 + b = 0.0 - 0.3 + 0.35
        assert!((report.best_margin - 0.05).abs() < 1e-9);
    }

    #[test]
    fn linear_search_stops_at_the_first_violation() {
        let query = linear_query(vec![2.0, -1.0], 0.2, vec![0.3, 0.6], 0.1, false);
        let report = pgd_search(&query, &PgdConfig::default(), None).unwrap();
        let w = report.witness.expect("negative minimum exists");
        assert!(w.objective <= 0.0);
        assert!(query.region.contains(&w.point));
    }

    #[test]
    fn zero_radius_tries_only_the_center() {
        let violated = linear_query(vec![1.0], -0.5, vec![0.4], 0.0, false);
        let report = pgd_search(&violated, &PgdConfig::default(), None).unwrap();
        let w = report.witness.expect("center violates");
        assert_eq!(w.restart, 0);
        assert_eq!(w.step, 0);
        assert_eq!(w.point.data(), &[0.4]);

        let safe = linear_query(vec![1.0], -0.5, vec![0.6], 0.0, false);
        let report = pgd_search(&safe, &PgdConfig::default(), None).unwrap();
        assert!(report.witness.is_none());
        assert!((report.best_margin - 0.1).abs() < 1e-12);
    }

    #[test]
    fn clean_image_counts_as_the_first_candidate() {
        let query = linear_query(vec![0.0, 0.0], -0.25, vec![0.5, 0.5], 0.1, true);
        let report = pgd_search(&query, &PgdConfig::default(), None).unwrap();
        let w = report.witness.expect("constant margin is negative");
        assert_eq!((w.restart, w.step), (0, 0));
    }

    fn plateau_query() -> VerificationQuery {
        // margin = 0.1 + x - relu(8*(x - 0.75)): descending from the center
        // walks into the flat basin at x = 0 (margin 0.1), so only restarts
        // that sample x > 0.75 can ride the negative slope to a violation.
        let mut g = ComputeGraph::new();
        let x = g.input(vec![1]);
        let w8 = Tensor::new(vec![1, 1], vec![8.0]).unwrap();
        let shifted = g.affine(x, w8, Tensor::vector(vec![-6.0])).unwrap();
        let r = g.relu(shifted).unwrap();
        let w1 = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
        let lin = g.affine(x, w1, Tensor::vector(vec![0.1])).unwrap();
        let m = g.sub(lin, r).unwrap();
        g.set_output("margin", m).unwrap();
        VerificationQuery {
            graph: g,
            region: InputRegion::uniform(Tensor::vector(vec![0.5]), 0.5, true).unwrap(),
            constraints: vec![MarginConstraint {
                name: "margin".to_string(),
                node: m,
            }],
            kind: AttackKind::Misclassification,
            timeout: Duration::from_secs(10),
            head: DetectionHeadSpec::block_layout(1, 1).unwrap(),
            head_node: x,
            ground_truth: GroundTruthSet::empty(),
            uses_binarizer: false,
        }
    }

    #[test]
    fn extra_restarts_keep_an_earlier_witness() {
        let query = plateau_query();
        let few = PgdConfig {
            restarts: 40,
            ..PgdConfig::default()
        };
        let report = pgd_search(&query, &few, None).unwrap();
        let first = report.witness.expect("some restart lands past the ridge");
        assert!(first.restart > 0, "center start must get stuck");

        let many = PgdConfig {
            restarts: 80,
            ..PgdConfig::default()
        };
        let again = pgd_search(&query, &many, None).unwrap().witness.unwrap();
        assert_eq!(again.restart, first.restart);
        assert_eq!(again.point.data(), first.point.data());
    }

    #[test]
    fn witnesses_violate_an_exact_margin_inside_the_region() {
        let query = plateau_query();
        let config = PgdConfig {
            restarts: 40,
            ..PgdConfig::default()
        };
        let report = pgd_search(&query, &config, None).unwrap();
        let w = report.witness.unwrap();
        assert!(query.region.contains(&w.point));
        let margins = query.margins_at(&w.point).unwrap();
        assert!(margins.iter().any(|(_, m)| *m <= 0.0));
    }

    #[test]
    fn expired_deadline_reports_a_timeout() {
        let query = plateau_query();
        let deadline = Some(Instant::now() - Duration::from_millis(1));
        let report = pgd_search(&query, &PgdConfig::default(), deadline).unwrap();
        assert!(report.timed_out);
        assert!(report.witness.is_none());
        assert_eq!(report.evaluations, 0);
    }
}

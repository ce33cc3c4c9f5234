//! Release gates. Each test checks one gate end to end and prints a single
//! `ACCEPT n PASS` line once its assertions hold.

mod common;

use std::time::{Duration, Instant};

use odverify_core::bounds::{backward_linear_bounds, concretize, ibp};
use odverify_core::detection::{self, GroundTruth};
use odverify_core::encoder::{build_iou_margin, MarginConstraint};
use odverify_core::eval::{backward, forward_values, stable_sigmoid};
use odverify_core::falsifier::pgd_search;
use odverify_core::harness::dataset::Dataset;
use odverify_core::harness::{
    emit_report, epsilon_sweep, gen_dataset, train, DatasetConfig, DetectorConfig, SweepMode,
    SweepRequest,
};
use odverify_core::harness::report::ReportContext;
use odverify_core::verifier::outcome_json;
use odverify_core::{
    encode_query, verify, AttackKind, BoundingBox, ComputeGraph, Detection, DetectionHeadSpec,
    EncodeOptions, GroundTruthSet, InputRegion, PgdConfig, Tensor, Verdict, VerificationQuery,
    VerifierConfig,
};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

fn minimum(margins: &[(String, f64)]) -> (&str, f64) {
    let mut best = 0;
    for (i, m) in margins.iter().enumerate() {
        if m.1 < margins[best].1 {
            best = i;
        }
    }
    (margins[best].0.as_str(), margins[best].1)
}

/// Gate 1: the IoU margin subgraph reproduces closed-form box arithmetic.
#[test]
fn criterion_1_iou_subgraph_matches_closed_form() {
    let start = Instant::now();

    // Worked pair: det (0,0,2,2) against gt (1,1,2,2) overlaps in a unit
    // square, unions to 7, and misses tau = 0.5 by 2.5.
    let gt = BoundingBox::new(1.0, 1.0, 2.0, 2.0).unwrap();
    let mut g = ComputeGraph::new();
    let input = g.input(vec![4]);
    let det = [
        g.slice(input, 0, 1).unwrap(),
        g.slice(input, 1, 2).unwrap(),
        g.slice(input, 2, 3).unwrap(),
        g.slice(input, 3, 4).unwrap(),
    ];
    let handle = build_iou_margin(&mut g, det, &gt, 0.5).unwrap();
    let values = forward_values(&g, &[Tensor::vector(vec![0.0, 0.0, 2.0, 2.0])]).unwrap();
    let at = |id: odverify_core::NodeId| values[id.index()].data()[0];
    assert!((at(handle.area_intersection) - 1.0).abs() < 1e-12);
    assert!((at(handle.area_union) - 7.0).abs() < 1e-12);
    assert!((at(handle.margin) + 2.5).abs() < 1e-12);

    let mut rng = ChaCha20Rng::seed_from_u64(101);
    let pairs = 10_000;
    let mut worst = 0.0f64;
    for _ in 0..pairs {
        let sample_box = |rng: &mut ChaCha20Rng| {
            BoundingBox::new(
                rng.gen_range(0.0..0.7),
                rng.gen_range(0.0..0.7),
                rng.gen_range(0.01..0.3),
                rng.gen_range(0.01..0.3),
            )
            .unwrap()
        };
        let a = sample_box(&mut rng);
        let b = sample_box(&mut rng);
        let tau = 0.5;

        let mut g = ComputeGraph::new();
        let input = g.input(vec![4]);
        let det = [
            g.slice(input, 0, 1).unwrap(),
            g.slice(input, 1, 2).unwrap(),
            g.slice(input, 2, 3).unwrap(),
            g.slice(input, 3, 4).unwrap(),
        ];
        let handle = build_iou_margin(&mut g, det, &b, tau).unwrap();
        let point = Tensor::vector(vec![a.x, a.y, a.w, a.h]);
        let values = forward_values(&g, &[point]).unwrap();
        let at = |id: odverify_core::NodeId| values[id.index()].data()[0];

        let inter = detection::intersection_area(&a, &b);
        let union = detection::union_area(&a, &b);
        let margin = detection::iou_margin(&a, &b, tau);
        worst = worst
            .max((at(handle.area_intersection) - inter).abs())
            .max((at(handle.area_union) - union).abs())
            .max((at(handle.margin) - margin).abs());
        assert!(
            (at(handle.margin) - margin).abs() <= 1e-9,
            "graph margin {} vs closed form {margin} for {a:?} / {b:?} tau {tau}",
            at(handle.margin)
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(10), "took {elapsed:?}");
    println!(
        "ACCEPT 1 PASS: worked IoU pair exact, {pairs} random pairs within 1e-9 \
         (worst deviation {worst:.3e}, {elapsed:?})"
    );
}

/// Gate 2: interval and linear bounds contain every sampled execution.
#[test]
fn criterion_2_bounds_contain_sampled_executions() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(202);
    let graphs = 50;
    let samples_per_graph = 2_000;

    for case in 0..graphs {
        let g = common::random_scalar_graph(&mut rng);
        let center: Vec<f64> = (0..g.dims).map(|_| rng.gen_range(-0.5..0.5)).collect();
        let radius: Vec<f64> = (0..g.dims).map(|_| rng.gen_range(0.1..0.5)).collect();
        let region =
            InputRegion::new(Tensor::vector(center), Tensor::vector(radius), false).unwrap();
        let box_ = region.bounds();

        let iv = ibp(&g.graph, &region).unwrap();
        let entry = backward_linear_bounds(&g.graph, &iv, g.output).unwrap();
        let (concrete_lo, concrete_hi) = concretize(&entry, &box_);

        for _ in 0..samples_per_graph {
            let x = common::sample_in_box(&mut rng, &box_.lo, &box_.hi);
            let values = forward_values(&g.graph, &[Tensor::vector(x.clone())]).unwrap();
            for (n, value) in values.iter().enumerate() {
                let (lo, hi) = (iv.lo[n].data(), iv.hi[n].data());
                for (k, &v) in value.data().iter().enumerate() {
                    let tol = 1e-6 * v.abs().max(1.0);
                    assert!(
                        lo[k] - tol <= v && v <= hi[k] + tol,
                        "case {case}: node {n}[{k}] = {v} escapes [{}, {}]",
                        lo[k],
                        hi[k]
                    );
                }
            }
            let out = values[g.output.index()].data()[0];
            let affine = |coeffs: &[f64], offset: f64| {
                coeffs.iter().zip(&x).map(|(c, xi)| c * xi).sum::<f64>() + offset
            };
            let lower = affine(&entry.lower_coeffs, entry.lower_offset);
            let upper = affine(&entry.upper_coeffs, entry.upper_offset);
            let tol = 1e-6 * out.abs().max(1.0);
            assert!(lower <= out + tol, "case {case}: lower plane {lower} > {out}");
            assert!(upper >= out - tol, "case {case}: upper plane {upper} < {out}");
            assert!(concrete_lo <= out + tol && out <= concrete_hi + tol);
        }
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(120), "took {elapsed:?}");
    println!(
        "ACCEPT 2 PASS: {graphs} random graphs x {samples_per_graph} samples stayed inside \
         interval and linear bounds ({elapsed:?})"
    );
}

/// Gate 3: the steep sigmoid tracks the unit step away from the origin.
#[test]
fn criterion_3_binarizer_approaches_step() {
    let grid: Vec<f64> = {
        let mut xs = Vec::with_capacity(10_000);
        for i in 0..5_000 {
            xs.push(-1.0 + (1.0 - 0.005) * i as f64 / 4_999.0);
        }
        for i in 0..5_000 {
            xs.push(0.005 + (1.0 - 0.005) * i as f64 / 4_999.0);
        }
        xs
    };
    let max_dev = |slope: f64| {
        grid.iter()
            .map(|&x| {
                let step = if x > 0.0 { 1.0 } else { 0.0 };
                (stable_sigmoid(slope, x) - step).abs()
            })
            .fold(0.0f64, f64::max)
    };

    let at_1000 = max_dev(1000.0);
    assert!(
        at_1000 <= 0.01,
        "slope 1000 deviates by {at_1000} beyond |x| >= 0.005"
    );

    let slopes = [1.0, 10.0, 100.0, 1000.0];
    let devs: Vec<f64> = slopes.iter().map(|&s| max_dev(s)).collect();
    for pair in devs.windows(2) {
        assert!(
            pair[1] < pair[0],
            "sharpening did not shrink the gap: {devs:?}"
        );
    }
    println!(
        "ACCEPT 3 PASS: slope-1000 binarizer within {at_1000:.4} of the step on |x| >= 0.005, \
         deviations {devs:?} strictly shrink"
    );
}

/// Gate 4: reverse-mode gradients agree with central finite differences.
#[test]
fn criterion_4_gradients_match_finite_differences() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(404);
    let mut checked = 0;
    let mut worst = 0.0f64;

    while checked < 50 {
        let g = common::random_scalar_graph(&mut rng);
        let lo = vec![-1.0; g.dims];
        let hi = vec![1.0; g.dims];

        // ReLU kinks break the finite-difference model, so sample a point
        // where every ReLU operand is clear of zero.
        let mut found = None;
        for _ in 0..500 {
            let x = common::sample_in_box(&mut rng, &lo, &hi);
            let point = Tensor::vector(x);
            let values = forward_values(&g.graph, std::slice::from_ref(&point)).unwrap();
            if common::relu_inputs_clear(&g.graph, &values, 1e-3) {
                found = Some((point, values));
                break;
            }
        }
        let Some((point, values)) = found else {
            continue;
        };

        let grads = backward(&g.graph, &values, g.output, &Tensor::scalar(1.0)).unwrap();
        let analytic = grads.input_grads[0].data();
        let numeric = common::central_fd(&g.graph, &point, 1e-6);
        for (i, (&a, &n)) in analytic.iter().zip(&numeric).enumerate() {
            let rel = (a - n).abs() / a.abs().max(n.abs()).max(1e-6);
            worst = worst.max(rel);
            assert!(
                rel <= 1e-4,
                "graph {checked} coordinate {i}: analytic {a} vs numeric {n} (rel {rel})"
            );
        }
        checked += 1;
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(60), "took {elapsed:?}");
    println!(
        "ACCEPT 4 PASS: {checked} random graphs gradient-checked, worst relative error \
         {worst:.3e} ({elapsed:?})"
    );
}

/// Smallest margin over a dense axis-aligned grid of the perturbed pixels.
fn grid_min_margin(query: &VerificationQuery, pixels: &[usize], steps: &[usize]) -> f64 {
    let bounds = query.region.bounds();
    let shape = query.region.center().shape().to_vec();
    let mut point = query.region.center().data().to_vec();
    let mut idx = vec![0usize; pixels.len()];
    let mut min_margin = f64::INFINITY;
    loop {
        for (k, &p) in pixels.iter().enumerate() {
            let t = idx[k] as f64 / (steps[k] - 1) as f64;
            point[p] = bounds.lo[p] + (bounds.hi[p] - bounds.lo[p]) * t;
        }
        let tensor = Tensor::new(shape.clone(), point.clone()).unwrap();
        let margins = query.margins_at(&tensor).unwrap();
        let m = margins.iter().map(|m| m.1).fold(f64::INFINITY, f64::min);
        min_margin = min_margin.min(m);

        let mut k = 0;
        loop {
            if k == idx.len() {
                return min_margin;
            }
            idx[k] += 1;
            if idx[k] < steps[k] {
                break;
            }
            idx[k] = 0;
            k += 1;
        }
    }
}

/// Gate 5: verdicts on pixel-restricted queries agree with brute-force
/// enumeration of the perturbed coordinates.
#[test]
fn criterion_5_verdicts_match_grid_enumeration() {
    let start = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(505);
    let head = DetectionHeadSpec::block_layout(1, 2).unwrap();
    let config = VerifierConfig {
        max_depth: 60,
        min_width: 1e-5,
        pgd: PgdConfig {
            steps: 150,
            restarts: 6,
            seed: 9,
            ..PgdConfig::default()
        },
        ..VerifierConfig::default()
    };

    let mut checked = 0;
    let mut verified = 0;
    let mut falsified = 0;
    while checked < 20 {
        // A one-box detector over a 4x4 image: dense layer, sigmoid coords
        // and objectness, raw class logits.
        let mut g = ComputeGraph::new();
        let input = g.input(vec![1, 4, 4]);
        let dense = g
            .affine(
                input,
                common::random_tensor(&mut rng, vec![7, 16], 0.5),
                common::random_tensor(&mut rng, vec![7], 0.3),
            )
            .unwrap();
        let coords = g.slice(dense, 0, 4).unwrap();
        let coords = g.sigmoid(coords, 1.0).unwrap();
        let logits = g.slice(dense, 4, 6).unwrap();
        let obj = g.slice(dense, 6, 7).unwrap();
        let obj = g.sigmoid(obj, 1.0).unwrap();
        let head_node = g.concat(&[coords, logits, obj]).unwrap();
        g.set_output("head", head_node).unwrap();

        let image = Tensor::new(
            vec![1, 4, 4],
            (0..16).map(|_| rng.gen_range(0.2..0.8)).collect(),
        )
        .unwrap();

        // Ground truth is the clean prediction clipped into the image, so
        // small perturbations verify and large ones have room to break.
        let values = forward_values(&g, std::slice::from_ref(&image)).unwrap();
        let clean = head.decode(&values[head_node.index()]).unwrap();
        let b = &clean[0].box_;
        let w = b.w.min(1.0 - b.x);
        let h = b.h.min(1.0 - b.y);
        if w < 0.05 || h < 0.05 {
            continue;
        }
        let gts = GroundTruthSet::new(
            vec![GroundTruth {
                box_: BoundingBox::new(b.x, b.y, w, h).unwrap(),
                class: clean[0].predicted_class(),
            }],
            2,
        )
        .unwrap();

        let kind = if checked % 2 == 0 {
            AttackKind::Mislocalization
        } else {
            AttackKind::Misclassification
        };
        let dims = 1 + checked % 3;
        let mut pixels = Vec::new();
        while pixels.len() < dims {
            let p = rng.gen_range(0..16);
            if !pixels.contains(&p) {
                pixels.push(p);
            }
        }
        let epsilon = rng.gen_range(0.08..0.45);
        let query = encode_query(
            kind,
            &g,
            &head,
            &image,
            &gts,
            epsilon,
            0.5,
            4.0,
            Duration::from_secs(120),
            &EncodeOptions {
                pixels: Some(pixels.clone()),
                clip01: true,
            },
        )
        .unwrap();

        let steps = match dims {
            1 => vec![1_000_001],
            2 => vec![1_000, 1_000],
            _ => vec![100, 100, 100],
        };
        let oracle = grid_min_margin(&query, &pixels, &steps);
        if oracle.abs() <= 1e-3 {
            // The property sits on the decision boundary; skip instances a
            // sound tool cannot be expected to label either way.
            continue;
        }

        let outcome = verify(&query, &config).unwrap();
        match &outcome.verdict {
            Verdict::Verified => {
                assert!(
                    oracle > 0.0,
                    "query {checked} verified but the grid dips to {oracle}"
                );
                verified += 1;
            }
            Verdict::Falsified {
                witness, margins, ..
            } => {
                assert!(oracle <= 1e-6, "query {checked} falsified but grid minimum is {oracle}");
                assert!(query.region.contains(witness), "witness left the region");
                let exact = query.margins_at(witness).unwrap();
                assert!(minimum(&exact).1 <= 0.0, "witness does not violate: {exact:?}");
                assert!(minimum(margins).1 <= 0.0);
                falsified += 1;
            }
            Verdict::Unknown { reason } => {
                panic!("query {checked} (grid minimum {oracle}) came back unknown: {reason:?}")
            }
        }
        checked += 1;
    }
    assert!(verified >= 3, "only {verified} verified instances in the sample");
    assert!(falsified >= 3, "only {falsified} falsified instances in the sample");

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    println!(
        "ACCEPT 5 PASS: {checked} pixel-restricted queries matched grid enumeration \
         ({verified} verified, {falsified} falsified, {elapsed:?})"
    );
}

/// Gate 6: on a pure linear margin the descent lands on the exact optimum.
#[test]
fn criterion_6_descent_reaches_linear_optimum() {
    let start = Instant::now();
    let weights: [f64; 6] = [0.8, -1.3, 0.45, 2.0, -0.7, 1.1];
    let center: [f64; 6] = [0.3, -0.2, 0.05, 0.4, -0.35, 0.15];
    let epsilon = 0.25;
    let l1: f64 = weights.iter().map(|w| w.abs()).sum();
    let dot: f64 = weights.iter().zip(&center).map(|(w, c)| w * c).sum();
    // Bias chosen so the region minimum sits at +0.05: nothing to falsify,
    // so the search must run its full budget and still report the optimum.
    let bias = epsilon * l1 - dot + 0.05;

    let mut g = ComputeGraph::new();
    let input = g.input(vec![6]);
    let margin = g
        .affine(
            input,
            Tensor::new(vec![1, 6], weights.to_vec()).unwrap(),
            Tensor::vector(vec![bias]),
        )
        .unwrap();
    g.set_output("margin", margin).unwrap();
    let query = VerificationQuery {
        graph: g,
        region: InputRegion::uniform(Tensor::vector(center.to_vec()), epsilon, false).unwrap(),
        constraints: vec![MarginConstraint {
            name: "margin".to_string(),
            node: margin,
        }],
        kind: AttackKind::Mislocalization,
        timeout: Duration::from_secs(10),
        head: DetectionHeadSpec::block_layout(1, 2).unwrap(),
        head_node: margin,
        ground_truth: GroundTruthSet::empty(),
        uses_binarizer: false,
    };

    let report = pgd_search(
        &query,
        &PgdConfig {
            steps: 200,
            restarts: 3,
            step_size: None,
            temperature: 0.0,
            seed: 3,
        },
        None,
    )
    .unwrap();

    assert!(report.witness.is_none(), "a +0.05 floor cannot be violated");
    let expected = dot + bias - epsilon * l1;
    assert!(
        (report.best_margin - expected).abs() <= 1e-9,
        "best margin {} vs exact optimum {expected}",
        report.best_margin
    );
    for (i, (&w, &c)) in weights.iter().zip(&center).enumerate() {
        let corner = c - epsilon * w.signum();
        let got = report.best_point.data()[i];
        assert!(
            (got - corner).abs() <= 1e-12,
            "coordinate {i}: {got} vs corner {corner}"
        );
    }

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(1), "took {elapsed:?}");
    println!(
        "ACCEPT 6 PASS: descent reached the linear optimum {expected:.6} exactly ({elapsed:?})"
    );
}

fn small_dataset(seed: u64) -> Dataset {
    gen_dataset(&DatasetConfig {
        samples: 4,
        seed,
        ..DatasetConfig::default()
    })
    .unwrap()
}

/// Gate 7: train, sweep epsilon, falsify past the transition, and emit the
/// report artifacts for a localization attack.
#[test]
fn criterion_7_pipeline_localization_sweep() {
    let start = Instant::now();
    let data = small_dataset(7);
    let (det, report) = train(
        &DetectorConfig {
            epochs: 1500,
            ..DetectorConfig::default()
        },
        &data,
    )
    .unwrap();
    assert!(
        report.mean_iou >= 0.7,
        "trained detector only reaches IoU {}",
        report.mean_iou
    );

    let built = det.build().unwrap();
    let image = &data.images[0];
    let gts = &data.annotations[0];
    let config = VerifierConfig {
        pgd: PgdConfig {
            steps: 150,
            restarts: 8,
            seed: 11,
            ..PgdConfig::default()
        },
        ..VerifierConfig::default()
    };
    let sweep = epsilon_sweep(
        &SweepRequest {
            kind: AttackKind::Mislocalization,
            model: &built.graph,
            head: &det.head,
            image,
            gts,
            tau: 0.5,
            slope: 8.0,
            timeout_per_query: Duration::from_secs(15),
            encode: EncodeOptions::default(),
            verifier: config.clone(),
        },
        SweepMode::Bisect,
    )
    .unwrap();
    let max_verified = sweep.max_verified.expect("no epsilon verified");
    let min_falsified = sweep.min_falsified.expect("no epsilon falsified");
    assert!(max_verified < min_falsified);

    let query = encode_query(
        AttackKind::Mislocalization,
        &built.graph,
        &det.head,
        image,
        gts,
        min_falsified,
        0.5,
        8.0,
        Duration::from_secs(30),
        &EncodeOptions::default(),
    )
    .unwrap();
    let outcome = verify(&query, &config).unwrap();
    let Verdict::Falsified {
        witness,
        margins,
        detections,
    } = &outcome.verdict
    else {
        panic!("epsilon {min_falsified} did not falsify: {:?}", outcome.verdict);
    };
    assert!(query.region.contains(witness));
    let (name, value) = minimum(margins);
    assert!(value <= 0.0);
    assert!(
        name.starts_with("iou"),
        "expected the overlap margin to break first, got {name} = {value}"
    );
    let gt_box = &gts.items()[0].box_;
    let drifted = detection::iou(&detections[0].box_, gt_box);
    assert!(
        drifted < 0.5,
        "witness detection still overlaps at IoU {drifted}"
    );

    let dir = tempfile::tempdir().unwrap();
    let doc = outcome_json(&query, &outcome, &config);
    let paths = emit_report(
        dir.path(),
        &ReportContext {
            label: "localization",
            image,
            gts,
            query_doc: doc,
            outcome: &outcome,
            sweep: Some(&sweep),
        },
    )
    .unwrap();
    assert!(paths.json.exists());
    assert!(paths.clean_image.exists());
    let witness_image = paths.witness_image.expect("falsified run renders a witness");
    assert!(witness_image.exists());
    assert_eq!(paths.canonical_sha256.len(), 64);

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    println!(
        "ACCEPT 7 PASS: IoU {:.3} detector, bracket [{max_verified:.3e}, {min_falsified:.3e}], \
         witness IoU {drifted:.3}, artifacts emitted ({elapsed:?})",
        report.mean_iou
    );
}

fn decoded_count(detections: &[Detection]) -> usize {
    detections.iter().filter(|d| d.objectness > 0.5).count()
}

/// Gate 8: a two-slot detector admits a counting counterexample.
#[test]
fn criterion_8_misdetection_counterexample() {
    let start = Instant::now();
    // Mix single- and double-object scenes so the second slot's objectness
    // actually depends on the input.
    let singles = gen_dataset(&DatasetConfig {
        samples: 8,
        seed: 21,
        ..DatasetConfig::default()
    })
    .unwrap();
    let doubles = gen_dataset(&DatasetConfig {
        samples: 8,
        objects_per_image: 2,
        side_min: 4,
        side_max: 6,
        seed: 22,
        ..DatasetConfig::default()
    })
    .unwrap();
    let mut images = singles.images.clone();
    images.extend(doubles.images.clone());
    let mut annotations = singles.annotations.clone();
    annotations.extend(doubles.annotations.clone());
    let data = Dataset {
        config: singles.config.clone(),
        images,
        annotations,
    };

    let (det, _) = train(
        &DetectorConfig {
            boxes: 2,
            epochs: 2000,
            seed: 3,
            ..DetectorConfig::default()
        },
        &data,
    )
    .unwrap();
    let built = det.build().unwrap();

    // Pick a single-object scene the detector counts correctly with margin.
    let mut candidate = None;
    for (i, (image, gts)) in data.images.iter().zip(&data.annotations).enumerate() {
        if gts.items().len() != 1 {
            continue;
        }
        let values = forward_values(&built.graph, std::slice::from_ref(image)).unwrap();
        let clean = det.head.decode(&values[built.head_node.index()]).unwrap();
        let objectness: Vec<f64> = clean.iter().map(|d| d.objectness).collect();
        let high = objectness.iter().filter(|&&o| o > 0.55).count();
        let low = objectness.iter().filter(|&&o| o < 0.45).count();
        if high == 1 && low == objectness.len() - 1 {
            candidate = Some((i, image, gts));
            break;
        }
    }
    let (index, image, gts) =
        candidate.expect("no scene decodes to a confident single detection");

    let query = encode_query(
        AttackKind::Misdetection,
        &built.graph,
        &det.head,
        image,
        gts,
        0.3,
        0.5,
        8.0,
        Duration::from_secs(300),
        &EncodeOptions::default(),
    )
    .unwrap();
    let config = VerifierConfig {
        pgd: PgdConfig {
            steps: 250,
            restarts: 12,
            seed: 17,
            ..PgdConfig::default()
        },
        ..VerifierConfig::default()
    };
    let outcome = verify(&query, &config).unwrap();
    let Verdict::Falsified {
        witness,
        margins,
        detections,
    } = &outcome.verdict
    else {
        panic!("no counting counterexample found: {:?}", outcome.verdict);
    };

    assert!(query.region.contains(witness));
    assert!(minimum(margins).1 <= 0.0);
    let count = decoded_count(detections);
    assert_ne!(
        count,
        gts.items().len(),
        "witness still decodes to the annotated count"
    );

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    println!(
        "ACCEPT 8 PASS: scene {index} annotated 1 object, witness decodes to {count} \
         ({elapsed:?})"
    );
}

/// Gate 9: repeated end-to-end runs are bit-identical.
#[test]
fn criterion_9_runs_are_reproducible() {
    let start = Instant::now();
    let mut categories = Vec::new();
    let mut hashes = Vec::new();
    let mut losses = Vec::new();

    for _ in 0..5 {
        let data = small_dataset(7);
        let (det, report) = train(
            &DetectorConfig {
                epochs: 300,
                ..DetectorConfig::default()
            },
            &data,
        )
        .unwrap();
        losses.push(report.final_loss.to_bits());
        let built = det.build().unwrap();

        let query = encode_query(
            AttackKind::Mislocalization,
            &built.graph,
            &det.head,
            &data.images[0],
            &data.annotations[0],
            0.3,
            0.5,
            8.0,
            Duration::from_secs(60),
            &EncodeOptions::default(),
        )
        .unwrap();
        let config = VerifierConfig::default();
        let outcome = verify(&query, &config).unwrap();
        categories.push(outcome.verdict.category());

        let dir = tempfile::tempdir().unwrap();
        let paths = emit_report(
            dir.path(),
            &ReportContext {
                label: "repro",
                image: &data.images[0],
                gts: &data.annotations[0],
                query_doc: outcome_json(&query, &outcome, &config),
                outcome: &outcome,
                sweep: None,
            },
        )
        .unwrap();
        hashes.push(paths.canonical_sha256);
    }

    assert!(
        categories.iter().all(|c| c == &categories[0]),
        "verdicts diverged: {categories:?}"
    );
    assert_ne!(categories[0], "unknown", "verdict must be decisive to compare");
    assert!(
        losses.iter().all(|l| l == &losses[0]),
        "training losses diverged bitwise"
    );
    assert!(
        hashes.iter().all(|h| h == &hashes[0]),
        "canonical digests diverged: {hashes:?}"
    );

    let elapsed = start.elapsed();
    assert!(elapsed < Duration::from_secs(600), "took {elapsed:?}");
    println!(
        "ACCEPT 9 PASS: 5/5 runs produced verdict '{}' and canonical digest {} ({elapsed:?})",
        categories[0],
        &hashes[0][..12]
    );
}

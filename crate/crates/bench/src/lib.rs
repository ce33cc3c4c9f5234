//! Shared fixtures for the engine benchmarks: a small trained detector and
//! encoded robustness queries at fixed budgets.

use std::time::Duration;

use odverify_core::encoder::{encode_query, AttackKind, EncodeOptions};
use odverify_core::harness::dataset::{gen_dataset, Dataset, DatasetConfig};
use odverify_core::harness::trainer::{train, DetectorConfig};
use odverify_core::{ComputeGraph, DetectionHeadSpec, GroundTruthSet, Tensor, VerificationQuery};

/// A 16×16 one-box detector trained briefly on four samples.
pub struct Fixture {
    pub graph: ComputeGraph,
    pub head: DetectionHeadSpec,
    pub dataset: Dataset,
}

impl Fixture {
    pub fn image(&self) -> &Tensor {
        &self.dataset.images[0]
    }

    pub fn gts(&self) -> &GroundTruthSet {
        &self.dataset.annotations[0]
    }

    pub fn query(&self, kind: AttackKind, epsilon: f64) -> VerificationQuery {
        encode_query(
            kind,
            &self.graph,
            &self.head,
            self.image(),
            self.gts(),
            epsilon,
            0.5,
            1000.0,
            Duration::from_secs(600),
            &EncodeOptions::default(),
        )
        .expect("fixture query encodes")
    }
}

pub fn fixture() -> Fixture {
    let dataset = gen_dataset(&DatasetConfig {
        samples: 4,
        seed: 7,
        ..DatasetConfig::default()
    })
    .expect("fixture dataset");
    let config = DetectorConfig {
        epochs: 300,
        seed: 1,
        ..DetectorConfig::default()
    };
    let (detector, _) = train(&config, &dataset).expect("fixture training");
    let built = detector.build().expect("fixture graph");
    Fixture {
        graph: built.graph,
        head: detector.head,
        dataset,
    }
}

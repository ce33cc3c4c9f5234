//! Verification engine for small object-detection networks.
//!
//! The crate models a detector as a compute graph of a fixed, analyzable
//! node vocabulary, encodes detection robustness queries (IoU overlap,
//! matching, object count) as extra layers on that graph, and decides them
//! with interval/linear bound propagation, gradient attacks, and
//! branch-and-bound over the input region.

pub mod bounds;
pub mod detection;
pub mod encoder;
pub mod eval;
pub mod falsifier;
pub mod graph;
pub mod harness;
pub mod model_io;
pub mod region;
pub mod tensor;
pub mod verifier;
pub mod vnnlib;

pub use detection::{
    BoundingBox, BoxSlots, Detection, DetectionHeadSpec, GroundTruth, GroundTruthSet,
};
pub use encoder::{encode_query, AttackKind, EncodeOptions, VerificationQuery};
pub use falsifier::{pgd_search, PgdConfig, SearchReport, Witness};
pub use graph::{ComputeGraph, Node, NodeId, NodeKind};
pub use region::{BoxBounds, InputRegion};
pub use tensor::Tensor;
pub use verifier::{verify, UnknownReason, Verdict, VerificationOutcome, VerifierConfig};

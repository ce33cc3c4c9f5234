//! Sound output bounds over an input region: interval propagation plus
//! backward linear-relaxation bounds.

mod ibp;
mod linear;

pub use ibp::{ibp, ibp_box, IntervalBounds};
pub use linear::{backward_linear_bounds, concretize, LinearBoundsEntry};

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum BoundsError {
    #[error("bounds need a single-input graph, this one declares {0}")]
    NotSingleInput(usize),
    #[error("region has {region} elements, graph input has {input}")]
    RegionSize { region: usize, input: usize },
    #[error("target node {0} does not exist")]
    UnknownTarget(usize),
    #[error("target node {node} has {numel} elements, expected a scalar")]
    NonScalarTarget { node: usize, numel: usize },
    #[error("malformed graph: {0}")]
    Malformed(String),
}

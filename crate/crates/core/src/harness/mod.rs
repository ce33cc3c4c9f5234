//! End-to-end pipeline: synthetic detection data, a desk-scale trainer,
//! epsilon sweeps, and report emission.

pub mod dataset;
pub mod report;
pub mod sweep;
pub mod trainer;

pub use dataset::{gen_dataset, load_dataset, save_dataset, Dataset, DatasetConfig, ShapeClass};
pub use report::{emit_report, ReportContext, ReportPaths};
pub use sweep::{epsilon_sweep, SweepMode, SweepPoint, SweepRequest, SweepResult};
pub use trainer::{train, Detector, DetectorConfig, TrainReport};

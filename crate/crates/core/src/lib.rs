//! Multi-modal place descriptors for loop closure detection.
//!
//! The crate covers the full path from raw recordings to a benchmark report:
//!
//! * [`geo`] turns GPS tracks into metric poses, discretizes them into
//!   places and produces leakage-free train/test splits,
//! * [`imaging`] builds fixed-size network inputs from camera frames and
//!   spinning-lidar intensity returns, including the fused layout,
//! * [`mining`] assembles triplet databases (random and hard negatives),
//! * [`descriptor`] is a compact three-tower convolutional network trained
//!   with a bounded triplet loss, with analytic gradients,
//! * [`eval`] runs nearest-neighbour retrieval and aggregates accuracy into
//!   weather-conditioned matrices,
//! * [`harness`] generates deterministic synthetic worlds with weather
//!   effects and orchestrates the whole pipeline.
//!
//! Everything is deterministic under explicit seeds: rerunning a stage with
//! the same config and seed reproduces its artifacts byte for byte.

pub mod descriptor;
pub mod eval;
pub mod geo;
pub mod harness;
pub mod imaging;
pub mod manifest;
pub mod mining;

mod ids;

pub use ids::{PlaceId, RunId, SampleId};

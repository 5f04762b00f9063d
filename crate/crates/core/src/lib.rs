//! Segment-level multiple-instance learning with concept bottlenecks.
//!
//! Images become bags of segment instances (`bagbuild`), stored as bagpack
//! files (`bagio`). `milmodel` maps instances to concept scores and pools
//! them with attention; `training` fits it, `metrics` scores it, and
//! `synthbench` generates controlled benchmarks.

pub mod bagbuild;
pub mod bagio;
pub mod benchmark;
pub mod checkpoint;
pub mod error;
pub mod mask;
pub mod metrics;
pub mod milmodel;
pub mod numeric;
pub mod synthbench;
pub mod training;

pub use error::{Error, ErrorClass, Result};

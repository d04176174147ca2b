//! Class-incremental semantic segmentation on a synthetic shapes benchmark.
//!
//! The pipeline: a [`schedule::TaskSchedule`] splits the class catalog into
//! tasks, [`synth`] renders labeled scenes, a frozen [`backbone::Extractor`]
//! produces per-pixel features, and per-class linear [`heads`] are trained task
//! by task on labels rewritten by [`labelaug`], optionally with replay from an
//! [`memory::ExemplarMemory`]. [`metrics`] scores each step and [`harness`] runs
//! whole scenarios and ablation suites.

pub mod backbone;
mod codec;
pub mod error;
pub mod harness;
pub mod heads;
pub mod labelaug;
pub mod memory;
pub mod metrics;
pub mod raster;
pub mod schedule;
pub mod seed;
pub mod synth;

pub use error::{Error, Result};
pub use schedule::ClassId;

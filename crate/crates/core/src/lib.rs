//! Lidar-to-radar knowledge transfer toolkit.
//!
//! The crate covers the data side of training radar-only 3D object detectors
//! with help from lidar: point-cloud thin-out strategies ([`sampling`]),
//! radar-prioritized mixing and pillarization ([`mixing`]), multi-stage
//! curriculum schedules ([`curriculum`]), knowledge-distillation loss kernels
//! ([`distill`]) and range-binned rotated-box evaluation ([`eval`]). A
//! deterministic scene generator ([`synth`]) stands in for a real dataset.
//!
//! Every stochastic routine takes an explicit 64-bit seed; identical inputs
//! and seeds produce bit-identical outputs regardless of thread count.

pub mod cloud;
pub mod curriculum;
pub mod distill;
pub mod error;
pub mod eval;
pub mod geometry;
pub mod io;
pub mod mixing;
pub mod sampling;
pub mod seed;
pub mod synth;

pub use cloud::{Frame, PointCloud, Range3D, Source};
pub use error::{Error, Result};
pub use geometry::Box3D;

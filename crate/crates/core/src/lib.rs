//! Speaker-verification back-end toolkit over pre-extracted embeddings.
//!
//! Two halves share the vector math in [`embed`] and the file formats in
//! [`store`]:
//!
//! * Trial scoring and evaluation: cosine [`scoring`], adaptive symmetric
//!   score normalization, quality-feature calibration [`qmf`], score fusion,
//!   and detection metrics [`metrics`].
//! * Pseudo-labeling for semi-supervised adaptation: thresholds from a small
//!   labeled subset, KNN graph and map-equation clustering [`cluster`],
//!   sub-center purification [`subcenter`], and the one-shot [`pipeline`]
//!   runner.
//!
//! [`synth`] generates seeded corpora with planted ground truth, and [`rng`]
//! documents the exact pseudo-random streams so runs are reproducible down
//! to the byte.

pub mod cluster;
pub mod embed;
pub mod error;
pub mod metrics;
pub mod pipeline;
pub mod qmf;
pub mod rng;
pub mod scoring;
pub mod store;
pub mod subcenter;
pub mod synth;

pub use error::{Error, Result};

//! Desk-scale test-bed for predictive-uncertainty estimation in classifiers.
//!
//! The crate trains small feedforward networks with eight algorithm variants,
//! scores test inputs with a family of uncertainty measures, evaluates
//! in-domain (accuracy, ECE, NLL) and out-domain (AUC, confusion-rate)
//! metrics, applies temperature calibration and best-k ensembling, builds
//! in/out class partitions by Ward clustering of class prototypes, and runs
//! the whole protocol as an automated sweep that renders result tables.
//!
//! Module map:
//!
//! * [`net`] — minimal feedforward engine: forward/backward, softmax with
//!   temperature, dropout, spectral normalization, input Jacobians, SGD.
//! * [`data`] — dataset generation/ingestion, class prototypes, Ward
//!   clustering, the in/out root partition, seeded splits.
//! * [`algo`] — the eight training procedures over a shared loop.
//! * [`measure`] — uncertainty measures, including fitted (GMM) and
//!   algorithm-native ones.
//! * [`metric`] — in-domain and out-domain evaluation metrics.
//! * [`posthoc`] — temperature calibration and best-k ensembling.
//! * [`pipeline`] — sweep orchestration, persistence, and report rendering.
//! * [`cli`] — the command-line surface.

pub mod algo;
pub mod cli;
pub mod data;
pub mod error;
pub mod measure;
pub mod metric;
pub mod net;
pub mod pipeline;
pub mod posthoc;
pub mod rng;

pub use error::{Error, Result};

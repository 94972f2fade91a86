//! Few-shot fine-tuning with geometric constraints on the hypersphere.
//!
//! A network is first trained on base categories with a scaled cosine
//! classifier. Novel categories are then added from a handful of examples by
//! fine-tuning a duplicated copy of the top blocks together with new
//! classifier columns, while two geometric losses keep novel features
//! clustered around their weights and novel weights angularly separated from
//! every other weight. The base stream is never touched after stage 1.
//!
//! Module map:
//! - [`tensor`], [`tape`]: dense arrays and reverse-mode differentiation
//! - [`geometry`]: cosines, feature aggregates, weight imprinting
//! - [`losses`]: cross-entropy, WCFC, AWS and their weighted sum
//! - [`model`], [`checkpoint`]: block network, two-stream scoring, persistence
//! - [`optim`], [`augment`], [`training`]: stage 1, stage 2, incremental runs
//! - [`evaluation`]: episodes, accuracies, priors, statistics, diagnostics
//! - [`datasets`]: synthetic blobs, CSV I/O, base/novel splits
//! - [`config`], [`pipeline`]: the JSON run configuration and the run wiring
//!   shared by the CLI

pub mod augment;
pub mod checkpoint;
pub mod config;
pub mod datasets;
pub mod error;
pub mod evaluation;
pub mod geometry;
pub mod losses;
pub mod model;
pub mod optim;
pub mod pipeline;
pub mod tape;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};

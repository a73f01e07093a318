//! Metric learning with cluster loss, batch-hard cluster loss and triplet
//! baselines, plus the sequential clustering and ranking evaluations used to
//! compare the resulting embeddings.
//!
//! The crate is organised bottom-up:
//!
//! - [`nn`]: a small dense network producing embeddings, backprop and Adam.
//! - [`losses`]: loss values and analytic gradients with respect to embeddings.
//! - [`gradcheck`]: central finite-difference checks of those gradients.
//! - [`sampler`]: PK batch composition and identity-group streams.
//! - [`trainer`]: the training loop and checkpoints.
//! - [`seqclust`]: online threshold clustering with running means.
//! - [`metrics`]: cluster quality, Rand index, CMC and mAP.
//! - [`datasets`]: synthetic data, IDX files and embedding CSVs.
//! - [`experiment`]: glue used by the command-line tool.

pub mod datasets;
pub mod error;
pub mod experiment;
pub mod gradcheck;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod sampler;
pub mod seqclust;
pub mod trainer;

pub use error::{Error, ErrorKind, Result};
pub use losses::{EmbeddingBatch, LossConfig, LossResult};
pub use nn::{AdamConfig, AdamState, MlpParams};

//! Toolkit for definition extraction on DEFT-style corpora: TSV parsing
//! and windowing, feature encoding, a BiLSTM encoder with a CRF tagging
//! head and a multi-head relation scorer, training with Adam, evaluation
//! with macro-averaged F1, and majority-vote ensembling over runs.
//!
//! Everything runs on a small tensor/autodiff layer in [`tensor`] and
//! [`tape`]; no external numerics are involved, so results are exactly
//! reproducible from a seed.

pub mod check;
pub mod corpus;
pub mod crf;
pub mod encoder;
pub mod ensemble;
pub mod error;
pub mod features;
pub mod fixture;
pub mod labels;
pub mod metrics;
pub mod model;
pub mod predictions;
pub mod relation;
pub mod rng;
pub mod tape;
pub mod tensor;
pub mod train;

pub use error::{Error, Result};
pub use tensor::Tensor;

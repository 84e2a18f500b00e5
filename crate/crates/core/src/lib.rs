//! Transductive zero-shot classification.
//!
//! Visual features are mapped into a word-vector semantic space by a
//! closed-form kernel ridge regression, optionally regularized by a KNN
//! graph Laplacian over labeled and unlabeled instances and augmented with
//! auxiliary labeled data. Unseen classes are then recognized by matching
//! projections against class-name prototypes, with optional self-training
//! of the prototypes and hubness-corrected matching.

pub mod analysis;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod graph;
pub mod inference;
pub mod linalg;
pub mod regression;
pub mod wordvec;

pub use error::{ErrorKind, Result, ZslError};

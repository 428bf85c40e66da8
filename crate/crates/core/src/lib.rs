//! Metadata augmentation for small-RNA expression profiles.
//!
//! Predicts missing sample annotations (tissue group, sex, age interval) from
//! expression matrices with two classifiers written from scratch, a
//! fully-connected network ([`mlp`]) and a two-stage random forest ([`rf`]),
//! and explains the network with DeepLIFT scores ([`attribution`]).
//!
//! Data flows `ingest` → `preprocess` → learner → `validation` / `attribution`.

pub mod attribution;
pub mod error;
pub mod ingest;
pub mod mlp;
pub mod preprocess;
pub mod rf;
pub mod rng;
pub mod validation;

pub use error::{Error, Result};

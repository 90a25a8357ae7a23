//! relkit: regression and treatment-effect estimation for tabular data with
//! pairwise sample relationships.
//!
//! The crate provides, from scratch over `f64`:
//!
//! | module   | contents                                                      |
//! |----------|---------------------------------------------------------------|
//! | `math`   | dense matrices, tape-based reverse-mode autodiff, Adam        |
//! | `nw`     | Nadaraya-Watson regression, five kernel variants              |
//! | `tabrel` | transformer with relation-biased multi-head attention         |
//! | `meta`   | S/T/X meta-learners for CATE estimation, PEHE                 |
//! | `datagen`| clustered synthetic benchmark generators and split sampling   |
//! | `dataio` | delimited-table loading, relation construction, KS diagnostic |
//!
//! All estimators consume a feature matrix X, a response vector y, and a
//! symmetric relation matrix R whose entry r_ij measures how related
//! samples i and j are. Fitting minimizes trial-set MSE given a background
//! set, with all randomness drawn from explicit seeds.

pub mod datagen;
pub mod dataio;
pub mod error;
pub mod math;
pub mod meta;
pub mod metrics;
pub mod nw;
pub mod stats;
pub mod tabrel;

pub use error::{Error, Result};

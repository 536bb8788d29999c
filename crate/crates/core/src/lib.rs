//! Classification and evaluation engine for heterogeneous sounds organized
//! by a two-level taxonomy.
//!
//! The crate consumes precomputed per-sound feature matrices (FVEC files),
//! turns them into fixed-length representations, trains and grid-searches
//! exact k-NN classifiers, and evaluates them at both taxonomy levels.

pub mod audio;
pub mod dataset;
pub mod error;
pub mod evaluation;
pub mod fvec;
pub mod knn;
pub mod repr;
pub mod taxonomy;

pub use error::{Error, Result};
pub use taxonomy::{Level, Taxonomy};

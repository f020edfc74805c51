//! Two-stage face detector with feature-map magnification.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod anchors;
pub mod cli;
pub mod dataio;
pub mod error;
pub mod evaluation;
pub mod gradcheck;
pub(crate) mod graph;
pub mod inference;
pub mod layers;
pub mod losses;
pub mod models;
pub mod roi;
pub mod tensor;
pub mod trainer;

pub use error::{Error, Result};
pub use graph::ParamStore;

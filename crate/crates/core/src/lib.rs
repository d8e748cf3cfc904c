//! Iconometric analysis of statue faces and a benchmarking harness for
//! metadata classification.
//!
//! The pipeline runs from curated statue metadata ([`catalog`]) and 68-point
//! 3D facial landmarks ([`landmarks`]) to six canon proportions
//! ([`iconometry`]), knowledge-graph node embeddings ([`kgraph`]), aligned
//! feature matrices ([`features`]), two classifier families ([`learn`]) and a
//! stratified cross-validation harness ([`evalharness`]).

pub mod catalog;
pub mod error;
pub mod evalharness;
pub mod features;
pub mod iconometry;
pub mod kgraph;
pub mod landmarks;
pub mod learn;
pub mod matrix;
pub mod synth;

pub use error::{Error, Result};
pub use matrix::DenseMatrix;

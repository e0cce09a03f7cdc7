//! Clustering of multivariate, variable-length EMA time series under DTW and
//! the global alignment kernel, with validity and stability measures.

#[cfg(doctest)]
#[doc = include_str!("../../../README.md")]
pub struct ReadmeDoctests;

pub mod data;
pub mod distance;
pub mod error;
pub mod kernel;

pub use error::{Error, ErrorKind, Result};
pub mod cluster;
pub mod validity;
pub mod synthetic;
pub mod harness;

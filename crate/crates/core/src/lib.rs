//! Scale-coded bag-of-deep-features image representations.
//!
//! Multi-scale local descriptors are coded against a diagonal-covariance
//! GMM vocabulary (Fisher or hard-assignment BOW coding) and pooled into
//! per-instance vectors. Pooling either marginalizes scale away
//! ([`scale_coding::pool_invariant`]) or keeps it by concatenating one
//! block per scale partition, with partitions defined on the absolute
//! image rescale factor ([`scale_coding::pool_absolute`]) or on the factor
//! re-parameterized by the instance box size ([`scale_coding::pool_relative`]).
//!
//! The crate also carries the surrounding experiment machinery: dataset
//! manifests, the `.scdf` descriptor format, a toy extractor, a synthetic
//! scale-discriminative dataset, one-vs-rest linear SVMs, AP/mAP evaluation
//! and the end-to-end pipeline with its two sweeps.
//!
//! Data-parallel loops go through [`parallel::Parallelism`]; with the
//! `parallel` feature disabled every policy runs sequentially. Results are
//! bit-identical between the two because all reductions use a fixed order.

pub mod classify;
pub mod dataset;
pub mod descriptors;
pub mod encoding;
pub mod error;
pub mod matrix;
pub mod parallel;
pub mod pipeline;
pub mod scale_coding;
pub mod vocabulary;

pub use error::{Error, ErrorKind, Result};
pub use matrix::Matrix;

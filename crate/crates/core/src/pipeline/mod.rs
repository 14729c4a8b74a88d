//! End-to-end experiment orchestration.
//!
//! [`run`] and the sweeps work on an in-memory manifest and any
//! [`DescriptorSource`](crate::descriptors::DescriptorSource); the
//! [`commands`] wrappers read inputs from and write artifacts to the
//! directories named in a [`PipelineConfig`].
//!
//! Stages fetch labels only through a [`LabelAudit`](crate::dataset::LabelAudit):
//! training reads the train split, evaluation the test split, and nothing
//! reads labels while sampling, fitting the vocabulary or encoding.

pub mod commands;
mod config;
mod run;
mod sweep;

pub use config::{CoderKind, Experiment, GridSpec, Paths, PipelineConfig};
pub use run::{
    encode_instances, feature_matrix, fit_vocabulary, load_external, pooling_for, run, score_representations,
    train_representations, ModeResult, RunOutput,
};
pub use sweep::{sweep_components, sweep_partitions, sweep_table_csv, timing_table_csv, SweepRow};

#[cfg(test)]
mod tests;

//! Ensembling of attribute-value labels produced by several independent
//! annotators (LLM providers or simulated workers).
//!
//! The pipeline is:
//!
//! - [`extract`] queries providers and normalizes their answers into
//!   [`AnnotationRecord`]s,
//! - [`label`] encodes records into a sparse [`AnnotationMatrix`],
//! - [`aggregate`] learns per-annotator weights by iterated weighted majority
//!   voting and produces consensus labels,
//! - [`simulate`] generates synthetic workers with known accuracies,
//! - [`io`] reads and writes the JSONL / JSON interchange formats.

pub mod aggregate;
pub mod cli;
pub mod error;
pub mod extract;
pub mod io;
pub mod label;
pub mod simulate;

pub use aggregate::{
    estimate_accuracies, majority_vote, oracle_weights, run_ensemble, update_weights,
    weighted_vote, EnsembleConfig, EnsembleState, TieBreak,
};
pub use error::{Error, Result};
pub use label::{
    build_matrix, encode_label, AnnotationMatrix, AnnotationRecord, AttributeSchema, ExtendedLabel,
};

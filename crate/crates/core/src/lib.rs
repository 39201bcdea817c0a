//! Inpatient pathway decision pipeline.
//!
//! The crate covers the full desk-scale workflow: building a benchmark
//! dataset from MIMIC-shaped CSV tables, reviewing medical histories against
//! radiology reports, retrieving similar cases and guidelines from a vector
//! index, running the triage/diagnosis/treatment agent pathway with chief
//! oversight, and scoring the results with the complete metrics suite.
//!
//! Every backend-facing operation has a deterministic mock implementation so
//! the whole pipeline runs hermetically without a live model endpoint.

pub mod case_model;
pub mod config;
pub mod eval_metrics;
pub mod ipds_ingest;
pub mod model_backends;
pub mod pathway_agents;
pub mod record_review;
pub mod reg_retrieval;

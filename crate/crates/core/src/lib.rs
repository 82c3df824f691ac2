//! Active speaker detection toolkit: manifests, utterance-to-track
//! alignment, the face-voice association head, score fusion, metrics,
//! quality stratification and synthetic data generation.

pub mod align;
pub mod datamodel;
pub mod fusion;
pub mod fva;
pub mod metrics;
pub mod simgen;
pub mod report;
pub mod strata;

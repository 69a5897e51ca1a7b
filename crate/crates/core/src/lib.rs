//! Clickstream preprocessing and recommendation-metric evaluation.

pub mod behavior;
pub mod identity;
pub mod ingest;
pub mod journey;
pub mod metrics;
pub mod model;
pub mod outliers;
pub mod par;
pub mod pipeline;
pub mod synth;
pub mod validation;

//! Index-score matching within PIC standard-error calipers.
//!
//! The crate fits an index score by estimating equations, derives the PIC
//! standard error and the selectively narrowed caliper from the estimated
//! coefficient covariance, matches treated and control units optimally within
//! the caliper, and estimates matched treatment effects. [`simlab`] holds the
//! data-generating processes and Monte-Carlo studies used to check the
//! method's bounds.

pub mod caliper;
pub mod dataset;
pub mod effect;
mod error;
pub mod index_model;
pub mod linalg;
pub mod matcher;
pub mod pipeline;
pub mod simlab;

pub use caliper::{CaliperOptions, CaliperPolicy, PolicyKind, Verdict};
pub use dataset::{center, load_csv, read_csv, CenteredSample, Sample, Schema, Strata};
pub use effect::{EffectEstimate, WeightScheme};
pub use error::{Error, Result};
pub use index_model::{CovEstimator, FamilyKind, FitOptions, IndexFit, ScoreFamily};
pub use matcher::{EligibilityGraph, MatchMethod, MatchResult, Objective};
pub use pipeline::{PipelineConfig, PipelineOutput};

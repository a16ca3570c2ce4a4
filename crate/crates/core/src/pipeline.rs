//! Fit, caliper, graph and match in one call.

use nalgebra::DMatrix;

use crate::caliper::{self, CaliperOptions, CaliperPolicy, CovarianceSummary};
use crate::dataset::{center, CenteredSample, Sample};
use crate::error::Result;
use crate::index_model::{self, CovEstimator, FitOptions, IndexFit, ScoreFamily};
use crate::matcher::{self, EligibilityGraph, MatchMethod, MatchResult, Objective};

#[derive(Debug, Clone)]
pub struct PipelineConfig {
    pub family: ScoreFamily,
    pub fit: FitOptions,
    pub cov: CovEstimator,
    pub caliper: CaliperOptions,
    pub method: MatchMethod,
    pub objective: Objective,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            family: ScoreFamily::logistic(),
            fit: FitOptions::default(),
            cov: CovEstimator::InverseInformation,
            caliper: CaliperOptions::default(),
            method: MatchMethod::Optimal,
            objective: Objective::TotalCost,
        }
    }
}

#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub sample: CenteredSample,
    pub fit: IndexFit,
    pub c_hat: DMatrix<f64>,
    pub covariance: CovarianceSummary,
    pub policy: CaliperPolicy,
    pub graph: EligibilityGraph,
    pub matched: MatchResult,
}

/// Fits the index model.
pub fn fit_only(s: &Sample, cfg: &PipelineConfig) -> Result<(CenteredSample, IndexFit, DMatrix<f64>)> {
    let centered = center(s);
    let fit = index_model::fit(&centered, &cfg.family, &cfg.fit)?;
    let c_hat = index_model::cov_beta(&fit, cfg.cov)?;
    Ok((centered, fit, c_hat))
}

/// Runs the full matching pipeline on a raw sample.
pub fn run(s: &Sample, cfg: &PipelineConfig) -> Result<PipelineOutput> {
    let (centered, fit, c_hat) = fit_only(s, cfg)?;
    let (covariance, policy) = caliper::caliper_policy(&centered, &fit, &c_hat, &cfg.caliper)?;
    let graph = matcher::build_graph(&centered, &fit, &c_hat, &policy)?;
    let matched = matcher::run_match(&graph, cfg.method, cfg.objective);
    Ok(PipelineOutput {
        sample: centered,
        fit,
        c_hat,
        covariance,
        policy,
        graph,
        matched,
    })
}

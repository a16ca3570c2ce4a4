//! Shared fixtures for the benchmarks.

use picmatch::index_model::{self, FitOptions};
use picmatch::simlab::{self, DgpConfig};
use picmatch::{caliper, center, CaliperOptions, CaliperPolicy, CenteredSample, CovEstimator, IndexFit, ScoreFamily};

use nalgebra::DMatrix;

pub struct Fixture {
    pub sample: CenteredSample,
    pub fit: IndexFit,
    pub c_hat: DMatrix<f64>,
    pub policy: CaliperPolicy,
}

/// Simulated sample of `n` rows and `p` covariates, fitted and calibrated.
pub fn fixture(n: usize, p: usize) -> Fixture {
    let (raw, _) = simlab::generate(&DgpConfig { seed: 7, ..DgpConfig::new(n, p) }, 0).expect("valid config");
    let sample = center(&raw);
    let fit = index_model::fit(&sample, &ScoreFamily::logistic(), &FitOptions::default()).expect("fit");
    let c_hat = index_model::cov_beta(&fit, CovEstimator::InverseInformation).expect("covariance");
    let (_, policy) = caliper::caliper_policy(&sample, &fit, &c_hat, &CaliperOptions::default()).expect("policy");
    Fixture {
        sample,
        fit,
        c_hat,
        policy,
    }
}

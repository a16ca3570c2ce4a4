//! Data-generating processes for the simulation studies.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, StudentT};
use serde::Serialize;

use crate::dataset::Sample;
use crate::error::{Error, Result};
use crate::index_model::expit;

use super::rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "family")]
pub enum CovariateFamily {
    GaussianIid,
    /// AR(1) correlation `rho^{|j-k|}` between columns.
    GaussianCorrelated { rho: f64 },
    /// Independent Student-t columns rescaled to unit variance (`df > 2`).
    ScaledT { df: f64 },
}

#[derive(Debug, Clone, Serialize)]
pub struct DgpConfig {
    pub n: usize,
    pub p: usize,
    pub family: CovariateFamily,
    /// Population variance of the true index, `beta' Sigma beta`.
    pub index_variance: f64,
    /// Logit-scale intercept of the treatment model.
    pub intercept: f64,
    /// Constant treatment effect.
    pub tau: f64,
    /// Coefficient of the true index in the outcome model.
    pub prognostic: f64,
    pub noise_sd: f64,
    pub seed: u64,
}

impl DgpConfig {
    pub fn new(n: usize, p: usize) -> Self {
        DgpConfig {
            n,
            p,
            family: CovariateFamily::GaussianIid,
            index_variance: 1.0,
            intercept: -0.5,
            tau: 1.0,
            prognostic: 1.0,
            noise_sd: 1.0,
            seed: 0,
        }
    }

    /// Population covariance of a covariate row.
    pub fn sigma(&self) -> DMatrix<f64> {
        match self.family {
            CovariateFamily::GaussianCorrelated { rho } => DMatrix::from_fn(self.p, self.p, |j, k| {
                rho.powi((j as i32 - k as i32).abs())
            }),
            _ => DMatrix::identity(self.p, self.p),
        }
    }

    /// Equal coefficients scaled so that `beta' Sigma beta = index_variance`.
    pub fn beta_true(&self) -> DVector<f64> {
        let ones = DVector::from_element(self.p, 1.0);
        let q = (self.sigma() * &ones).dot(&ones);
        if self.index_variance <= 0.0 {
            return DVector::zeros(self.p);
        }
        ones * (self.index_variance / q).sqrt()
    }

    fn validate(&self) -> Result<()> {
        if self.p < 2 || self.p >= self.n {
            return Err(Error::invalid(
                "simlab",
                format!("degenerate configuration: need 2 <= p < n, got n = {}, p = {}", self.n, self.p),
            ));
        }
        match self.family {
            CovariateFamily::GaussianCorrelated { rho } if !(rho.abs() < 1.0) => {
                Err(Error::invalid("simlab", "AR(1) correlation must lie in (-1, 1)"))
            }
            CovariateFamily::ScaledT { df } if !(df > 2.0) => {
                Err(Error::invalid("simlab", "scaled t needs df > 2 for unit variance"))
            }
            _ if !(self.index_variance >= 0.0 && self.noise_sd >= 0.0) => {
                Err(Error::invalid("simlab", "variances must be nonnegative"))
            }
            _ => Ok(()),
        }
    }
}

/// Simulation truth accompanying a generated sample.
#[derive(Debug, Clone)]
pub struct Truth {
    pub beta_true: DVector<f64>,
    pub intercept: f64,
    /// Logit-scale true scores `intercept + x_i beta_true`.
    pub theta: Vec<f64>,
    pub tau: f64,
    pub sigma: DMatrix<f64>,
    /// Potential outcomes under control and treatment.
    pub y0: Vec<f64>,
    pub y1: Vec<f64>,
}

/// Draws covariates, treatment and outcomes for replicate `replicate`.
///
/// Treatment is Bernoulli with logit `intercept + x beta_true`; the outcome is
/// `prognostic * x beta_true + tau z + noise`, so it depends on covariates
/// only through the true index. Fails if a draw leaves an arm empty.
pub fn generate(cfg: &DgpConfig, replicate: u64) -> Result<(Sample, Truth)> {
    cfg.validate()?;
    let mut rng = rng::stream(cfg.seed, replicate);
    let (n, p) = (cfg.n, cfg.p);
    let sigma = cfg.sigma();
    let beta = cfg.beta_true();

    let mut x = DMatrix::<f64>::zeros(n, p);
    match cfg.family {
        CovariateFamily::GaussianIid => {
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = rng.sample(StandardNormal);
                }
            }
        }
        CovariateFamily::GaussianCorrelated { rho } => {
            // AR(1) recursion has exactly the Toeplitz covariance
            let innov = (1.0 - rho * rho).sqrt();
            for i in 0..n {
                let mut prev: f64 = rng.sample(StandardNormal);
                x[(i, 0)] = prev;
                for j in 1..p {
                    let e: f64 = rng.sample(StandardNormal);
                    prev = rho * prev + innov * e;
                    x[(i, j)] = prev;
                }
            }
        }
        CovariateFamily::ScaledT { df } => {
            let t = StudentT::new(df).map_err(|e| Error::invalid("simlab", e.to_string()))?;
            let scale = ((df - 2.0) / df).sqrt();
            for i in 0..n {
                for j in 0..p {
                    x[(i, j)] = scale * t.sample(&mut rng);
                }
            }
        }
    }

    let index = &x * &beta;
    let mut theta = Vec::with_capacity(n);
    let mut z = Vec::with_capacity(n);
    let mut y0 = Vec::with_capacity(n);
    let mut y1 = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for i in 0..n {
        let th = cfg.intercept + index[i];
        let zi = rng.random::<f64>() < expit(th);
        let e: f64 = rng.sample(StandardNormal);
        let base = cfg.prognostic * index[i] + cfg.noise_sd * e;
        theta.push(th);
        z.push(zi);
        y0.push(base);
        y1.push(base + cfg.tau);
        y.push(Some(if zi { base + cfg.tau } else { base }));
    }
    let names = (1..=p).map(|j| format!("x{j}")).collect();
    let sample = Sample::new(x, z, Some(y), None)?.with_covariate_names(names);
    sample.require_both_arms()?;
    Ok((
        sample,
        Truth {
            beta_true: beta,
            intercept: cfg.intercept,
            theta,
            tau: cfg.tau,
            sigma,
            y0,
            y1,
        },
    ))
}

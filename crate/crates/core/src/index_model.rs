//! Index-score estimation by estimating equations.
//!
//! The parameter vector is laid out as `(intercepts, slopes)`: one intercept
//! per pre-existing stratum (a single intercept when unstratified), then the
//! `p` covariate slopes. The score for observation `i` is
//! `psi_i = w(x_i) * psi_c(r_i, eta_i) * (d_i, x_i)` with `d_i` the stratum
//! indicator row, plus an optional penalty gradient on the summed score.
//!
//! `A_hat` is the derivative of the mean score and is negative definite for
//! both shipped families; covariance estimates are formed from `-A_hat` so
//! that they come out PSD.

use std::fmt;
use std::sync::Arc;

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use serde::{Deserialize, Serialize};

use crate::dataset::{CenteredSample, Sample};
use crate::error::{Error, Result};
use crate::linalg;

/// Condition-number ceiling for the design and for `-A_hat`.
pub const MAX_CONDITION: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FamilyKind {
    Logistic,
    Linear,
}

impl FamilyKind {
    /// Score kernel `psi_c(r, eta)`.
    pub fn kernel(self, r: f64, eta: f64) -> f64 {
        match self {
            FamilyKind::Logistic => r - expit(eta),
            FamilyKind::Linear => r - eta,
        }
    }

    /// `d psi_c / d eta`.
    pub fn kernel_derivative(self, eta: f64) -> f64 {
        match self {
            FamilyKind::Logistic => {
                let m = expit(eta);
                -m * (1.0 - m)
            }
            FamilyKind::Linear => -1.0,
        }
    }

    /// Lipschitz constant recorded for the kernel's derivative bound.
    pub fn lipschitz(self) -> f64 {
        match self {
            FamilyKind::Logistic => 0.25,
            FamilyKind::Linear => 1.0,
        }
    }
}

impl fmt::Display for FamilyKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FamilyKind::Logistic => "logistic",
            FamilyKind::Linear => "linear",
        })
    }
}

/// Logistic CDF, computed without overflow for large `|eta|`.
pub fn expit(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// Penalty hook added to the summed score.
pub trait Penalty: Send + Sync {
    /// `alpha(theta)`, same length as the parameter vector.
    fn gradient(&self, theta: &DVector<f64>) -> DVector<f64>;

    /// Jacobian of `alpha`; zero unless overridden.
    fn jacobian(&self, theta: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::zeros(theta.len(), theta.len())
    }
}

pub type CovariateWeight = Arc<dyn Fn(&[f64]) -> f64 + Send + Sync>;

/// A score family: kernel, covariate weight `w(x)` and penalty hook.
#[derive(Clone)]
pub struct ScoreFamily {
    pub kind: FamilyKind,
    /// `w(x)`; `None` means `w = 1`.
    pub weight: Option<CovariateWeight>,
    /// `alpha(beta)`; `None` means identically zero.
    pub penalty: Option<Arc<dyn Penalty>>,
}

impl fmt::Debug for ScoreFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("ScoreFamily")
            .field("kind", &self.kind)
            .field("weight", &self.weight.as_ref().map(|_| "custom"))
            .field("penalty", &self.penalty.as_ref().map(|_| "custom"))
            .finish()
    }
}

impl ScoreFamily {
    pub fn new(kind: FamilyKind) -> Self {
        ScoreFamily {
            kind,
            weight: None,
            penalty: None,
        }
    }

    pub fn logistic() -> Self {
        Self::new(FamilyKind::Logistic)
    }

    pub fn linear() -> Self {
        Self::new(FamilyKind::Linear)
    }

    fn weight_at(&self, x: &[f64]) -> f64 {
        self.weight.as_ref().map_or(1.0, |w| w(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CovEstimator {
    #[serde(rename = "info")]
    InverseInformation,
    #[serde(rename = "sandwich")]
    Sandwich,
}

#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iter: usize,
    /// Convergence requires `|sum psi| <= tol * sqrt(n)`.
    pub tol: f64,
    /// Logistic slopes beyond this (sup norm) with a non-vanishing score
    /// are reported as separation.
    pub separation_cap: f64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions {
            max_iter: 50,
            tol: 1e-10,
            separation_cap: 30.0,
        }
    }
}

/// A fitted index model.
#[derive(Debug, Clone)]
pub struct IndexFit {
    pub family: FamilyKind,
    /// One intercept per stratum (a single one when unstratified).
    pub intercepts: Vec<f64>,
    /// Slope vector `beta_hat`.
    pub beta: DVector<f64>,
    pub converged: bool,
    pub iterations: usize,
    /// `|sum_i psi(r_i, x_i; beta_hat)|_2`.
    pub score_norm: f64,
    pub n: usize,
    /// Dispersion used by the inverse-information estimator (1 for logistic).
    pub dispersion: f64,
    pub a_hat: DMatrix<f64>,
    pub b_hat: DMatrix<f64>,
    /// Slope block of `n^{-1} (-A_hat)^{-1}` (times dispersion).
    pub c_inv_info: DMatrix<f64>,
    /// Slope block of `n^{-1} A_hat^{-1} B_hat A_hat^{-1}'`.
    pub c_sandwich: DMatrix<f64>,
    pub condition_a_hat: f64,
    pub condition_b_hat: f64,
}

impl IndexFit {
    /// Full parameter vector `(intercepts, slopes)`.
    pub fn theta(&self) -> DVector<f64> {
        let l = self.intercepts.len();
        DVector::from_iterator(
            l + self.beta.len(),
            self.intercepts.iter().copied().chain(self.beta.iter().copied()),
        )
    }

    pub fn cov(&self, estimator: CovEstimator) -> &DMatrix<f64> {
        match estimator {
            CovEstimator::InverseInformation => &self.c_inv_info,
            CovEstimator::Sandwich => &self.c_sandwich,
        }
    }
}

/// Design matrix `(stratum indicators, x)`.
pub fn design_matrix(s: &Sample) -> DMatrix<f64> {
    let (n, p) = (s.n(), s.p());
    let l = s.n_strata();
    let mut d = DMatrix::zeros(n, l + p);
    for i in 0..n {
        d[(i, s.stratum_of(i))] = 1.0;
        for j in 0..p {
            d[(i, l + j)] = s.x()[(i, j)];
        }
    }
    d
}

/// Response for a family: treatment for logistic, outcome for linear.
pub fn response(s: &Sample, kind: FamilyKind) -> Result<DVector<f64>> {
    match kind {
        FamilyKind::Logistic => Ok(DVector::from_iterator(
            s.n(),
            s.z().iter().map(|&t| if t { 1.0 } else { 0.0 }),
        )),
        FamilyKind::Linear => {
            let y = s.y().ok_or_else(|| {
                Error::invalid("index_model", "linear family needs an outcome column")
            })?;
            y.iter()
                .enumerate()
                .map(|(i, v)| {
                    v.ok_or_else(|| {
                        Error::invalid(
                            "index_model",
                            format!("linear family needs complete outcomes; row {} missing", i + 1),
                        )
                    })
                })
                .collect::<Result<Vec<_>>>()
                .map(DVector::from_vec)
        }
    }
}

/// Everything needed to evaluate scores, computed once per sample.
struct Problem {
    design: DMatrix<f64>,
    r: DVector<f64>,
    w: DVector<f64>,
}

impl Problem {
    fn new(s: &Sample, fam: &ScoreFamily) -> Result<Self> {
        let design = design_matrix(s);
        let r = response(s, fam.kind)?;
        let w = DVector::from_iterator(
            s.n(),
            (0..s.n()).map(|i| {
                let row: Vec<f64> = s.x().row(i).iter().copied().collect();
                fam.weight_at(&row)
            }),
        );
        Ok(Problem { design, r, w })
    }

    fn n(&self) -> usize {
        self.design.nrows()
    }

    /// Per-observation multipliers `w_i * psi_c(r_i, eta_i)`.
    fn kernel_terms(&self, kind: FamilyKind, theta: &DVector<f64>) -> DVector<f64> {
        let eta = &self.design * theta;
        DVector::from_iterator(
            self.n(),
            (0..self.n()).map(|i| self.w[i] * kind.kernel(self.r[i], eta[i])),
        )
    }

    fn score_sum(&self, fam: &ScoreFamily, theta: &DVector<f64>) -> DVector<f64> {
        let terms = self.kernel_terms(fam.kind, theta);
        let mut g = self.design.tr_mul(&terms);
        if let Some(pen) = &fam.penalty {
            g += pen.gradient(theta);
        }
        g
    }

    fn a_hat(&self, fam: &ScoreFamily, theta: &DVector<f64>) -> DMatrix<f64> {
        let eta = &self.design * theta;
        let n = self.n();
        // -A = X' diag(-w psi_c') X / n; psi_c' <= 0 so the square root is real.
        let mut scaled = self.design.clone();
        for i in 0..n {
            let d = -self.w[i] * fam.kind.kernel_derivative(eta[i]);
            let sd = d.max(0.0).sqrt();
            scaled.row_mut(i).scale_mut(sd);
        }
        let mut a = -scaled.tr_mul(&scaled) / n as f64;
        if let Some(pen) = &fam.penalty {
            a += pen.jacobian(theta) / n as f64;
        }
        linalg::symmetrize(&a)
    }

    fn b_hat(&self, fam: &ScoreFamily, theta: &DVector<f64>) -> DMatrix<f64> {
        let terms = self.kernel_terms(fam.kind, theta);
        let mut psi = self.design.clone();
        for i in 0..self.n() {
            psi.row_mut(i).scale_mut(terms[i]);
        }
        linalg::symmetrize(&(psi.tr_mul(&psi) / self.n() as f64))
    }
}

/// `sum_i psi(r_i, x_i; theta) + alpha(theta)`.
pub fn score_sum(s: &Sample, fam: &ScoreFamily, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(Problem::new(s, fam)?.score_sum(fam, theta))
}

/// `n^{-1} (sum_i psi + alpha)`.
pub fn mean_score(s: &Sample, fam: &ScoreFamily, theta: &DVector<f64>) -> Result<DVector<f64>> {
    Ok(score_sum(s, fam, theta)? / s.n() as f64)
}

/// Empirical derivative of the mean score, `A_hat(theta)`.
pub fn a_hat(s: &Sample, fam: &ScoreFamily, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(Problem::new(s, fam)?.a_hat(fam, theta))
}

/// `B_hat(theta) = n^{-1} sum_i psi_i psi_i'`.
pub fn b_hat(s: &Sample, fam: &ScoreFamily, theta: &DVector<f64>) -> Result<DMatrix<f64>> {
    Ok(Problem::new(s, fam)?.b_hat(fam, theta))
}

fn neg_a_cholesky(a: &DMatrix<f64>) -> Result<Cholesky<f64, Dyn>> {
    let cond = linalg::condition_number(a);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Conditioning {
            module: "index_model",
            what: "A_hat",
            condition: cond,
        });
    }
    Cholesky::new(-a.clone()).ok_or(Error::Conditioning {
        module: "index_model",
        what: "A_hat (not negative definite)",
        condition: cond,
    })
}

fn check_design(design: &DMatrix<f64>) -> Result<()> {
    let gram = design.tr_mul(design);
    let cond = linalg::condition_number(&gram);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Conditioning {
            module: "index_model",
            what: "design matrix (intercepts + covariates)",
            condition: cond,
        });
    }
    Ok(())
}

/// Symmetrizes, checks the PSD tolerance, and clamps.
fn finish_cov(c: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let c = linalg::symmetrize(&c);
    let floor = -1e-10 * c.trace().abs().max(f64::MIN_POSITIVE);
    let min = linalg::min_eigenvalue(&c);
    if min < floor {
        return Err(Error::Consistency(format!(
            "covariance estimate has eigenvalue {min:.3e} below {floor:.3e}"
        )));
    }
    Ok(linalg::clamp_psd(&c))
}

fn slope_block(full: &DMatrix<f64>, l: usize) -> DMatrix<f64> {
    let k = full.nrows();
    full.view((l, l), (k - l, k - l)).into_owned()
}

/// Fits the index model by Newton-Raphson with step halving.
///
/// The linear family converges in one step. Covariance estimates are the
/// slope blocks of the inverse-information and sandwich forms.
pub fn fit(s: &CenteredSample, fam: &ScoreFamily, opts: &FitOptions) -> Result<IndexFit> {
    let problem = Problem::new(s, fam)?;
    check_design(&problem.design)?;
    let n = problem.n();
    let l = s.n_strata();
    let k = problem.design.ncols();
    let target = opts.tol * (n as f64).sqrt();

    let mut theta = DVector::zeros(k);
    let mut g = problem.score_sum(fam, &theta);
    let mut norm = g.norm();
    let mut iterations = 0;
    let separated = |theta: &DVector<f64>| theta.rows(l, k - l).amax();
    while norm > target {
        if iterations >= opts.max_iter {
            return Err(Error::NonConvergence {
                iterations,
                score_norm: norm,
                last_iterate: theta.iter().copied().collect(),
            });
        }
        if fam.kind == FamilyKind::Logistic && separated(&theta) > opts.separation_cap {
            return Err(Error::Separation {
                max_abs_coef: separated(&theta),
                cap: opts.separation_cap,
                score_norm: norm,
            });
        }
        let a = problem.a_hat(fam, &theta);
        let chol = match Cholesky::new(-a * n as f64) {
            Some(c) => c,
            None if fam.kind == FamilyKind::Logistic && separated(&theta) > 10.0 => {
                return Err(Error::Separation {
                    max_abs_coef: separated(&theta),
                    cap: opts.separation_cap,
                    score_norm: norm,
                })
            }
            None => {
                return Err(Error::Conditioning {
                    module: "index_model",
                    what: "Newton Hessian",
                    condition: f64::INFINITY,
                })
            }
        };
        let mut step = chol.solve(&g);
        let mut candidate = &theta + &step;
        let mut cand_g = problem.score_sum(fam, &candidate);
        let mut halvings = 0;
        while cand_g.norm() > norm && halvings < 40 {
            step *= 0.5;
            candidate = &theta + &step;
            cand_g = problem.score_sum(fam, &candidate);
            halvings += 1;
        }
        iterations += 1;
        if cand_g.norm() >= norm && halvings >= 40 {
            // no descent available: numerical floor
            return Err(Error::NonConvergence {
                iterations,
                score_norm: norm,
                last_iterate: theta.iter().copied().collect(),
            });
        }
        theta = candidate;
        g = cand_g;
        norm = g.norm();
    }

    if let Some(pen) = &fam.penalty {
        let size = pen.gradient(&theta).norm();
        if size > 0.1 * (n as f64).sqrt() {
            log::warn!(
                "index_model: penalty gradient norm {size:.3e} is not small relative to sqrt(n); \
                 the near-root estimability requirement may fail"
            );
        }
    }

    let a = problem.a_hat(fam, &theta);
    if fam.kind == FamilyKind::Logistic {
        // Under separation the score vanishes only because every fitted
        // probability is saturated; curvature collapses relative to the design.
        let design_scale = linalg::psd_operator_norm(&problem.design.tr_mul(&problem.design)) / n as f64;
        let curvature = linalg::psd_operator_norm(&(-&a));
        if curvature < 1e-8 * design_scale {
            return Err(Error::Separation {
                max_abs_coef: separated(&theta),
                cap: opts.separation_cap,
                score_norm: norm,
            });
        }
    }
    let b = problem.b_hat(fam, &theta);
    let chol = neg_a_cholesky(&a)?;
    let a_inv_neg = chol.inverse();
    let dispersion = match fam.kind {
        FamilyKind::Logistic => 1.0,
        FamilyKind::Linear => {
            let resid = problem.kernel_terms(fam.kind, &theta);
            let dof = n.saturating_sub(k).max(1);
            resid.norm_squared() / dof as f64
        }
    };
    let info_full = &a_inv_neg * (dispersion / n as f64);
    // A^{-1} B A^{-1}' with A^{-1} = -(-A)^{-1}; the signs cancel.
    let sandwich_full = &a_inv_neg * &b * a_inv_neg.transpose() / n as f64;

    Ok(IndexFit {
        family: fam.kind,
        intercepts: theta.rows(0, l).iter().copied().collect(),
        beta: theta.rows(l, k - l).into_owned(),
        converged: true,
        iterations,
        score_norm: norm,
        n,
        dispersion,
        condition_a_hat: linalg::condition_number(&a),
        condition_b_hat: linalg::condition_number(&b),
        a_hat: a,
        b_hat: b,
        c_inv_info: finish_cov(slope_block(&info_full, l))?,
        c_sandwich: finish_cov(slope_block(&sandwich_full, l))?,
    })
}

/// Slope-block covariance estimate `C_hat` for the chosen estimator.
pub fn cov_beta(fit: &IndexFit, estimator: CovEstimator) -> Result<DMatrix<f64>> {
    let cond = linalg::condition_number(&fit.a_hat);
    if !cond.is_finite() || cond > MAX_CONDITION {
        return Err(Error::Conditioning {
            module: "index_model",
            what: "A_hat",
            condition: cond,
        });
    }
    Ok(fit.cov(estimator).clone())
}

/// One-step expansion of the estimator around a known parameter.
#[derive(Debug, Clone)]
pub struct Linearization {
    /// Full parameter vector `(intercepts, slopes)`.
    pub beta_tilde: DVector<f64>,
}

/// `beta_tilde = theta_true - A(theta_true)^{-1} (mean score at theta_true)`.
///
/// `theta_true` is the full `(intercepts, slopes)` vector; simulation use only.
pub fn linearize(
    s: &CenteredSample,
    fam: &ScoreFamily,
    theta_true: &DVector<f64>,
) -> Result<Linearization> {
    let problem = Problem::new(s, fam)?;
    if theta_true.len() != problem.design.ncols() {
        return Err(Error::dimension(
            "index_model",
            format!(
                "theta_true has length {}, expected {}",
                theta_true.len(),
                problem.design.ncols()
            ),
        ));
    }
    let a = problem.a_hat(fam, theta_true);
    let chol = neg_a_cholesky(&a)?;
    let mean = problem.score_sum(fam, theta_true) / problem.n() as f64;
    // -A^{-1} m = (-A)^{-1} m
    Ok(Linearization {
        beta_tilde: theta_true + chol.solve(&mean),
    })
}

/// Index values `x_i beta_hat` plus the row's stratum intercept.
pub fn index_values(fit: &IndexFit, s: &Sample) -> DVector<f64> {
    let xb = s.x() * &fit.beta;
    DVector::from_iterator(
        s.n(),
        (0..s.n()).map(|i| xb[i] + fit.intercepts[s.stratum_of(i)]),
    )
}

/// Serializable fit summary.
#[derive(Debug, Clone, Serialize)]
pub struct FitReport {
    pub family: FamilyKind,
    pub covariates: Vec<String>,
    pub intercepts: Vec<f64>,
    pub coefficients: Vec<f64>,
    pub standard_errors: Vec<f64>,
    pub converged: bool,
    pub iterations: usize,
    pub score_norm: f64,
    pub condition_a_hat: f64,
    pub condition_b_hat: f64,
    pub cov_estimator: CovEstimator,
    pub n: usize,
}

impl FitReport {
    pub fn new(fit: &IndexFit, s: &Sample, estimator: CovEstimator) -> Self {
        let c = fit.cov(estimator);
        FitReport {
            family: fit.family,
            covariates: s.covariate_names().to_vec(),
            intercepts: fit.intercepts.clone(),
            coefficients: fit.beta.iter().copied().collect(),
            standard_errors: (0..c.nrows()).map(|j| c[(j, j)].sqrt()).collect(),
            converged: fit.converged,
            iterations: fit.iterations,
            score_norm: fit.score_norm,
            condition_a_hat: fit.condition_a_hat,
            condition_b_hat: fit.condition_b_hat,
            cov_estimator: estimator,
            n: fit.n,
        }
    }
}

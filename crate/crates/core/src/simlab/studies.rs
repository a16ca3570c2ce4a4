//! Monte-Carlo studies of the caliper bounds, rates and effect estimates.
//!
//! Every study takes a seed; replicate `r` uses stream `r` of that seed and
//! results are gathered in replicate order, so output does not depend on the
//! thread count.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::caliper::{self, CaliperOptions, PolicyKind};
use crate::dataset::center;
use crate::effect::{self, WeightScheme};
use crate::error::{Error, Result};
use crate::index_model::{self, CovEstimator, FitOptions, ScoreFamily};
use crate::linalg;
use crate::matcher::{self, MatchMethod, MatchResult, Objective};

use super::dgp::{generate, CovariateFamily, DgpConfig, Truth};
use super::rng;

fn normals(rng: &mut ChaCha8Rng, k: usize) -> DVector<f64> {
    DVector::from_fn(k, |_, _| rng.sample(StandardNormal))
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    v.iter().sum::<f64>() / v.len() as f64
}

/// Standard error of the mean.
fn std_error(v: &[f64]) -> f64 {
    let k = v.len();
    if k < 2 {
        return f64::NAN;
    }
    let m = mean(v);
    let var = v.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (k - 1) as f64;
    (var / k as f64).sqrt()
}

/// Median (mean of the two middle values for even length).
pub fn median(v: &[f64]) -> f64 {
    if v.is_empty() {
        return f64::NAN;
    }
    let mut s = v.to_vec();
    s.sort_by(f64::total_cmp);
    let k = s.len();
    if k % 2 == 1 {
        s[k / 2]
    } else {
        0.5 * (s[k / 2 - 1] + s[k / 2])
    }
}

/// Whether `v` is strictly decreasing.
pub fn strictly_decreasing(v: &[f64]) -> bool {
    v.windows(2).all(|w| w[1] < w[0])
}

/// Least-squares slope of `ln y` on `ln x`.
pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let (mx, my) = (mean(&lx), mean(&ly));
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx) * (a - mx)).sum();
    sxy / sxx
}

/// Symmetric square root after checking the matrix is PSD.
fn psd_root(m: &DMatrix<f64>, what: &str) -> Result<DMatrix<f64>> {
    let floor = -1e-10 * m.trace().abs().max(f64::MIN_POSITIVE);
    if linalg::min_eigenvalue(m) < floor {
        return Err(Error::invalid("simlab", format!("{what} is not positive semidefinite")));
    }
    Ok(linalg::sym_sqrt(m))
}

// ---------------------------------------------------------------------------
// Gaussian pair errors

#[derive(Debug, Clone, Serialize)]
pub struct PairErrorResult {
    pub p: usize,
    pub n_pairs: usize,
    pub reps: usize,
    /// `<2 Sigma, C>`.
    pub target: f64,
    /// Replicate mean of the mean squared pair error, divided by `target`.
    pub mean_square_ratio: f64,
    /// Monte-Carlo standard error of `mean_square_ratio`.
    pub ratio_se: f64,
    /// Replicate mean of the largest absolute pair error.
    pub mean_max: f64,
    /// `z*_{n_pairs} <2 Sigma, C>^{1/2}`.
    pub max_bound: f64,
    /// `|ratio - 1| <= 3 se` (vacuous when `target = 0`).
    pub mean_square_ok: bool,
    pub max_ok: bool,
}

/// Draws `beta_tilde - beta_true ~ N(0, C)` independently of `n_pairs` pair
/// differences `~ N(0, 2 Sigma)` and summarizes the pair errors
/// `(x_i - x_j)(beta_tilde - beta_true)`.
pub fn verify_pair_errors(
    sigma: &DMatrix<f64>,
    c: &DMatrix<f64>,
    n_pairs: usize,
    reps: usize,
    seed: u64,
) -> Result<PairErrorResult> {
    let p = sigma.nrows();
    if sigma.shape() != c.shape() || !sigma.is_square() || p == 0 {
        return Err(Error::dimension("simlab", "Sigma and C must be square and equally sized"));
    }
    if n_pairs == 0 || reps < 2 {
        return Err(Error::invalid("simlab", "need at least one pair and two replicates"));
    }
    let root_2sigma = psd_root(&(sigma * 2.0), "Sigma")?;
    let root_c = psd_root(c, "C")?;
    let target = 2.0 * linalg::frobenius_inner(sigma, c);

    let per_rep: Vec<(f64, f64)> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let err = &root_c * normals(&mut rng, p);
            // d_k . err with d_k = g_k (2 Sigma)^{1/2}
            let u = &root_2sigma * err;
            let mut sq = 0.0;
            let mut mx: f64 = 0.0;
            for _ in 0..n_pairs {
                let v = normals(&mut rng, p).dot(&u);
                sq += v * v;
                mx = mx.max(v.abs());
            }
            (sq / n_pairs as f64, mx)
        })
        .collect();

    let ms: Vec<f64> = per_rep.iter().map(|r| r.0).collect();
    let mx: Vec<f64> = per_rep.iter().map(|r| r.1).collect();
    let (ratio, se) = if target > 0.0 {
        (mean(&ms) / target, std_error(&ms) / target)
    } else {
        (1.0, 0.0)
    };
    let mean_max = mean(&mx);
    let max_bound = caliper::z_star(n_pairs)? * target.sqrt();
    Ok(PairErrorResult {
        p,
        n_pairs,
        reps,
        target,
        mean_square_ratio: ratio,
        ratio_se: se,
        mean_max,
        max_bound,
        mean_square_ok: target == 0.0 || (ratio - 1.0).abs() <= 3.0 * se,
        max_ok: mean_max <= max_bound,
    })
}

#[derive(Debug, Clone, Serialize)]
pub struct ChaosResult {
    pub label: String,
    pub p: usize,
    pub m_pairs: usize,
    pub reps: usize,
    pub intrinsic_dimension: f64,
    /// `(E max_k |d_k C^{1/2}|^2)^{1/2}`, estimated.
    pub rms_max: f64,
    pub bound: f64,
    /// `bound - rms_max`.
    pub slack: f64,
    pub ok: bool,
}

/// Root mean square of the largest index error distance among `m_pairs`
/// Gaussian pair differences, against the chaos bound. With one pair the
/// bound is an equality, checked at three standard errors.
pub fn verify_chaos(
    label: &str,
    sigma: &DMatrix<f64>,
    c: &DMatrix<f64>,
    m_pairs: usize,
    reps: usize,
    seed: u64,
) -> Result<ChaosResult> {
    let p = sigma.nrows();
    if sigma.shape() != c.shape() || !sigma.is_square() || p == 0 {
        return Err(Error::dimension("simlab", "Sigma and C must be square and equally sized"));
    }
    if reps < 2 {
        return Err(Error::invalid("simlab", "need at least two replicates"));
    }
    let bound = caliper::chaos_bound(sigma, c, m_pairs)?;
    let root_sigma = psd_root(sigma, "Sigma")?;
    let factor = psd_root(&(sigma * 2.0), "Sigma")? * psd_root(c, "C")?;
    let dim = linalg::intrinsic_dimension(&(&root_sigma * c * &root_sigma));

    let maxima: Vec<f64> = (0..reps)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(seed, r as u64);
            let mut mx: f64 = 0.0;
            for _ in 0..m_pairs {
                let g = normals(&mut rng, p);
                mx = mx.max(factor.tr_mul(&g).norm_squared());
            }
            mx
        })
        .collect();
    let ms = mean(&maxima);
    let rms_max = ms.sqrt();
    let ok = if m_pairs == 1 {
        (ms - bound * bound).abs() <= 3.0 * std_error(&maxima)
    } else {
        rms_max <= bound
    };
    Ok(ChaosResult {
        label: label.to_string(),
        p,
        m_pairs,
        reps,
        intrinsic_dimension: dim,
        rms_max,
        bound,
        slack: bound - rms_max,
        ok,
    })
}

/// The isotropic, spiked-Sigma and rank-deficient-C configurations.
pub fn chaos_configs(p: usize) -> Vec<(&'static str, DMatrix<f64>, DMatrix<f64>)> {
    let eye = DMatrix::<f64>::identity(p, p);
    let mut spiked = eye.clone();
    spiked[(0, 0)] = 10.0;
    let half = DMatrix::from_fn(p, p, |i, j| if i == j && i < p / 2 { 0.01 } else { 0.0 });
    vec![
        ("isotropic", eye.clone(), &eye * 0.01),
        ("spiked", spiked, &eye * 0.01),
        ("rank_deficient", eye, half),
    ]
}

// ---------------------------------------------------------------------------
// Pipeline replicates

/// Covariate dimension as a function of `n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
#[serde(rename_all = "snake_case", tag = "rule", content = "value")]
pub enum PRule {
    Fixed(usize),
    /// `p = ceil(n^a)`.
    Power(f64),
}

impl PRule {
    pub fn p(self, n: usize) -> usize {
        match self {
            PRule::Fixed(p) => p,
            PRule::Power(a) => ((n as f64).powf(a) - 1e-9).ceil() as usize,
        }
    }
}

struct Fitted {
    sample: crate::dataset::CenteredSample,
    fit: index_model::IndexFit,
    c_hat: DMatrix<f64>,
}

fn fit_replicate(cfg: &DgpConfig, r: u64) -> Result<(Fitted, Truth)> {
    let (raw, truth) = generate(cfg, r)?;
    let sample = center(&raw);
    let fit = index_model::fit(&sample, &ScoreFamily::logistic(), &FitOptions::default())?;
    let c_hat = index_model::cov_beta(&fit, CovEstimator::InverseInformation)?;
    Ok((Fitted { sample, fit, c_hat }, truth))
}

fn match_with(f: &Fitted, policy: PolicyKind, method: MatchMethod) -> Result<(caliper::CaliperPolicy, MatchResult)> {
    let opts = CaliperOptions {
        policy,
        ..CaliperOptions::default()
    };
    let (_, pol) = caliper::caliper_policy(&f.sample, &f.fit, &f.c_hat, &opts)?;
    let g = matcher::build_graph(&f.sample, &f.fit, &f.c_hat, &pol)?;
    Ok((pol, matcher::run_match(&g, method, Objective::TotalCost)))
}

/// Largest matched true-index gap under unrestricted 1-nearest-neighbor
/// matching on the estimated index (treated units focal, controls reused).
pub fn unrestricted_nn_max_gap(est_index: &[f64], true_index: &[f64], z: &[bool]) -> f64 {
    let mut controls: Vec<(f64, usize)> = (0..z.len())
        .filter(|&i| !z[i])
        .map(|i| (est_index[i], i))
        .collect();
    controls.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut worst: f64 = 0.0;
    for t in (0..z.len()).filter(|&i| z[i]) {
        let v = est_index[t];
        let k = controls.partition_point(|c| c.0 < v);
        let mut best: Option<(f64, usize)> = None;
        for cand in [k.checked_sub(1), Some(k)].into_iter().flatten() {
            if let Some(&(cv, ci)) = controls.get(cand) {
                let d = (v - cv).abs();
                if best.is_none_or(|(bd, bi)| d < bd || (d == bd && ci < bi)) {
                    best = Some((d, ci));
                }
            }
        }
        if let Some((_, c)) = best {
            worst = worst.max((true_index[t] - true_index[c]).abs());
        }
    }
    worst
}

#[derive(Debug, Clone, Serialize)]
pub struct RateConfig {
    pub base: DgpConfig,
    pub p_rule: PRule,
    pub n_grid: Vec<usize>,
    pub reps: usize,
    pub policy: PolicyKind,
    pub method: MatchMethod,
}

/// One replicate of the rate study.
#[derive(Debug, Clone, Serialize)]
pub struct RateRow {
    pub n: usize,
    pub p: usize,
    pub replicate: usize,
    pub n_treated: usize,
    pub matched: usize,
    pub picse: f64,
    pub hard_limit: f64,
    pub max_sed: f64,
    pub max_true_gap: f64,
    pub max_pic_error: f64,
    pub nn_max_true_gap: f64,
    pub tau_uniform: f64,
    pub tau_att: f64,
    pub abs_tau_error: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatePoint {
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    pub failures: usize,
    pub median_max_true_gap: f64,
    pub median_max_pic_error: f64,
    pub median_nn_max_true_gap: f64,
    pub median_abs_tau_error: f64,
    /// Share of replicates whose largest matched index error distance is
    /// within the hard limit.
    pub sed_within_hard_limit: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RateStudy {
    pub points: Vec<RatePoint>,
    pub gap_slope: f64,
    pub pic_error_slope: f64,
    pub tau_error_slope: f64,
    pub gap_decreasing: bool,
    pub tau_error_decreasing: bool,
    #[serde(skip)]
    pub rows: Vec<RateRow>,
}

fn rate_replicate(cfg: &RateConfig, n: usize, r: usize) -> Result<RateRow> {
    let p = cfg.p_rule.p(n);
    let dgp = DgpConfig { n, p, ..cfg.base.clone() };
    let (f, truth) = fit_replicate(&dgp, r as u64)?;
    let (pol, m) = match_with(&f, cfg.policy, cfg.method)?;
    let d = matcher::match_diagnostics(&m, &f.sample, &f.fit, Some(&truth.beta_true));
    let est: Vec<f64> = (f.sample.x() * &f.fit.beta).iter().copied().collect();
    let tru: Vec<f64> = (f.sample.x() * &truth.beta_true).iter().copied().collect();
    let nn = unrestricted_nn_max_gap(&est, &tru, f.sample.z());
    let y = effect::outcome_vector(&f.sample)?;
    let strata = m.strata();
    let (tu, ta) = match (
        effect::tau_hat(&strata, &y, f.sample.z(), WeightScheme::Uniform),
        effect::tau_hat(&strata, &y, f.sample.z(), WeightScheme::Att),
    ) {
        (Ok(a), Ok(b)) => (a.tau_hat, b.tau_hat),
        _ => (f64::NAN, f64::NAN),
    };
    Ok(RateRow {
        n,
        p,
        replicate: r,
        n_treated: f.sample.n_treated(),
        matched: m.pairs.len(),
        picse: pol.picse,
        hard_limit: pol.hard_limit,
        max_sed: d.max_sed,
        max_true_gap: d.max_true_gap.unwrap_or(f64::NAN),
        max_pic_error: d.max_pic_error.unwrap_or(f64::NAN),
        nn_max_true_gap: nn,
        tau_uniform: tu,
        tau_att: ta,
        abs_tau_error: (tu - truth.tau).abs(),
    })
}

/// Medians of the largest matched true-index gap, PIC error and effect error
/// across `n`, with log-log slopes. Replicates whose fit fails are counted
/// and dropped.
pub fn rate_study(cfg: &RateConfig, seed: u64) -> Result<RateStudy> {
    if cfg.reps == 0 || cfg.n_grid.is_empty() {
        return Err(Error::invalid("simlab", "rate study needs replicates and an n grid"));
    }
    let mut rows = Vec::new();
    let mut points = Vec::new();
    for &n in &cfg.n_grid {
        let point_seed = rng::derive_seed(seed, &format!("rate-n{n}"));
        let local = RateConfig {
            base: DgpConfig { seed: point_seed, ..cfg.base.clone() },
            ..cfg.clone()
        };
        let results: Vec<Result<RateRow>> = (0..cfg.reps)
            .into_par_iter()
            .map(|r| rate_replicate(&local, n, r))
            .collect();
        let mut ok_rows = Vec::new();
        let mut failures = 0;
        for res in results {
            match res {
                Ok(row) => ok_rows.push(row),
                Err(e) => {
                    log::warn!("simlab: rate replicate at n = {n} failed: {e}");
                    failures += 1;
                }
            }
        }
        let col = |f: fn(&RateRow) -> f64| -> Vec<f64> { ok_rows.iter().map(f).filter(|v| v.is_finite()).collect() };
        let within = ok_rows.iter().filter(|r| r.max_sed <= r.hard_limit).count();
        points.push(RatePoint {
            n,
            p: cfg.p_rule.p(n),
            replicates: ok_rows.len(),
            failures,
            median_max_true_gap: median(&col(|r| r.max_true_gap)),
            median_max_pic_error: median(&col(|r| r.max_pic_error)),
            median_nn_max_true_gap: median(&col(|r| r.nn_max_true_gap)),
            median_abs_tau_error: median(&col(|r| r.abs_tau_error)),
            sed_within_hard_limit: if ok_rows.is_empty() {
                f64::NAN
            } else {
                within as f64 / ok_rows.len() as f64
            },
        });
        rows.extend(ok_rows);
    }
    let ns: Vec<f64> = points.iter().map(|p| p.n as f64).collect();
    let gaps: Vec<f64> = points.iter().map(|p| p.median_max_true_gap).collect();
    let errs: Vec<f64> = points.iter().map(|p| p.median_max_pic_error).collect();
    let taus: Vec<f64> = points.iter().map(|p| p.median_abs_tau_error).collect();
    Ok(RateStudy {
        gap_slope: log_log_slope(&ns, &gaps),
        pic_error_slope: log_log_slope(&ns, &errs),
        tau_error_slope: log_log_slope(&ns, &taus),
        gap_decreasing: strictly_decreasing(&gaps),
        tau_error_decreasing: strictly_decreasing(&taus),
        points,
        rows,
    })
}

/// Median `|tau_hat - tau|` per `n` under the constant-effect design.
pub fn verify_effect(cfg: &RateConfig, seed: u64) -> Result<(Vec<(usize, f64)>, bool)> {
    let study = rate_study(cfg, seed)?;
    let table: Vec<(usize, f64)> = study.points.iter().map(|p| (p.n, p.median_abs_tau_error)).collect();
    Ok((table, study.tau_error_decreasing))
}

// ---------------------------------------------------------------------------
// PIC SE consistency

#[derive(Debug, Clone, Serialize)]
pub struct PicseRow {
    pub n: usize,
    pub p: usize,
    pub replicates: usize,
    /// Median over replicates of `|<S_perp(beta_hat), C_hat> - <S_perp(beta_true), C_mc>| / (p/n)`.
    pub median_scaled_error: f64,
    pub mean_estimate: f64,
    pub monte_carlo_target: f64,
}

/// Compares `<S_perp(beta_hat), C_hat>` with its Monte-Carlo analogue, where
/// `C_mc` is the covariance of `beta_hat` across replicates.
pub fn verify_picse_consistency(
    base: &DgpConfig,
    grid: &[(usize, usize)],
    reps: usize,
    seed: u64,
) -> Result<(Vec<PicseRow>, bool)> {
    if reps < 3 {
        return Err(Error::invalid("simlab", "need at least three replicates"));
    }
    let mut out = Vec::new();
    for &(n, p) in grid {
        let cfg = DgpConfig {
            n,
            p,
            seed: rng::derive_seed(seed, &format!("picse-n{n}-p{p}")),
            ..base.clone()
        };
        let results: Vec<Result<(f64, DVector<f64>, DMatrix<f64>)>> = (0..reps)
            .into_par_iter()
            .map(|r| {
                let (f, truth) = fit_replicate(&cfg, r as u64)?;
                let s = caliper::s_matrix(&f.sample);
                let est = linalg::frobenius_inner(&caliper::s_perp(&s, &f.fit.beta), &f.c_hat);
                Ok((est, f.fit.beta.clone(), caliper::s_perp(&s, &truth.beta_true)))
            })
            .collect();
        let ok: Vec<_> = results.into_iter().filter_map(|r| r.ok()).collect();
        if ok.len() < 3 {
            return Err(Error::invalid("simlab", format!("too few successful fits at n = {n}")));
        }
        let k = ok.len() as f64;
        let mean_beta = ok.iter().fold(DVector::zeros(p), |acc, r| acc + &r.1) / k;
        let c_mc = ok.iter().fold(DMatrix::zeros(p, p), |acc, r| {
            let d = &r.1 - &mean_beta;
            acc + &d * d.transpose()
        }) / (k - 1.0);
        let targets: Vec<f64> = ok.iter().map(|r| linalg::frobenius_inner(&r.2, &c_mc)).collect();
        let scale = p as f64 / n as f64;
        let errs: Vec<f64> = ok.iter().zip(&targets).map(|(r, t)| (r.0 - t).abs() / scale).collect();
        out.push(PicseRow {
            n,
            p,
            replicates: ok.len(),
            median_scaled_error: median(&errs),
            mean_estimate: mean(&ok.iter().map(|r| r.0).collect::<Vec<_>>()),
            monte_carlo_target: mean(&targets),
        });
    }
    let trend = out.windows(2).all(|w| w[1].median_scaled_error <= w[0].median_scaled_error);
    Ok((out, trend))
}

// ---------------------------------------------------------------------------
// Caliper enforcement

#[derive(Debug, Clone, Serialize)]
pub struct EnforcementResult {
    pub datasets: usize,
    pub pairs_checked: usize,
    pub narrowed_violations: usize,
    pub hard66_violations: usize,
    pub failures: usize,
}

/// Re-checks every emitted pair against its rule with index error distances
/// recomputed from the covariate differences.
pub fn caliper_enforcement(configs: &[DgpConfig], seed: u64) -> Result<EnforcementResult> {
    let results: Vec<Result<(usize, usize, usize)>> = configs
        .par_iter()
        .enumerate()
        .map(|(k, cfg)| {
            let cfg = DgpConfig { seed: rng::derive_seed(seed, "enforce"), ..cfg.clone() };
            let (f, _) = fit_replicate(&cfg, k as u64)?;
            let x = f.sample.x();
            let idx = x * &f.fit.beta;
            let mut checked = 0;
            let mut bad = [0usize; 2];
            for (slot, kind) in [PolicyKind::PicseNarrowed, PolicyKind::PicseHard66].into_iter().enumerate() {
                let (pol, m) = match_with(&f, kind, MatchMethod::Optimal)?;
                for pr in &m.pairs {
                    checked += 1;
                    let diff: Vec<f64> = (0..x.ncols()).map(|j| x[(pr.treated, j)] - x[(pr.control, j)]).collect();
                    let sed = linalg::quad_form(&f.c_hat, &diff).max(0.0).sqrt();
                    let pic = idx[pr.treated] - idx[pr.control];
                    let tol = 1e-9 * (1.0 + pol.picse);
                    let ok = match kind {
                        PolicyKind::PicseHard66 => sed <= pol.hard_limit + tol && pic.abs() <= pol.pic_width + tol,
                        _ => {
                            let e = caliper::excess(sed, pol.nominal_sup);
                            e <= pol.picse + tol && pic.abs() <= pol.multiplier * (pol.picse - e) + tol
                        }
                    };
                    if !ok {
                        bad[slot] += 1;
                    }
                }
            }
            Ok((checked, bad[0], bad[1]))
        })
        .collect();
    let mut out = EnforcementResult {
        datasets: configs.len(),
        pairs_checked: 0,
        narrowed_violations: 0,
        hard66_violations: 0,
        failures: 0,
    };
    for r in results {
        match r {
            Ok((c, a, b)) => {
                out.pairs_checked += c;
                out.narrowed_violations += a;
                out.hard66_violations += b;
            }
            Err(e) => {
                log::warn!("simlab: enforcement dataset failed: {e}");
                out.failures += 1;
            }
        }
    }
    Ok(out)
}

/// Gaussian and heavy-tailed datasets for [`caliper_enforcement`].
pub fn enforcement_configs(count: usize, n: usize, p: usize) -> Vec<DgpConfig> {
    (0..count)
        .map(|k| {
            let family = match k % 3 {
                0 => CovariateFamily::GaussianIid,
                1 => CovariateFamily::GaussianCorrelated { rho: 0.5 },
                _ => CovariateFamily::ScaledT { df: 4.0 },
            };
            DgpConfig { family, ..DgpConfig::new(n, p) }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Oracle versus feasible estimating function

#[derive(Debug, Clone, Serialize)]
pub struct OracleGapResult {
    pub draws: usize,
    pub matched_sets: usize,
    /// Largest within-set spread of true logit scores.
    pub delta: f64,
    /// `|mean(psi_tilde(tau) - psi(tau))|` over reassignment draws.
    pub lhs: f64,
    pub lhs_se: f64,
    /// `(e^{4 delta} - 1)` times the weighted mean of `E|V_s|`, with
    /// `E|V_s|` replaced by its Monte-Carlo mean.
    pub rhs: f64,
    pub ok: bool,
}

/// Holds one matched design fixed, redraws within-set assignments from
/// their conditional law and outcome noise, and compares the mean gap
/// between the oracle and feasible estimating functions with its bound.
pub fn verify_oracle_gap(cfg: &DgpConfig, draws: usize, seed: u64) -> Result<OracleGapResult> {
    if draws < 2 {
        return Err(Error::invalid("simlab", "need at least two draws"));
    }
    let cfg = DgpConfig { seed: rng::derive_seed(seed, "oracle-gap"), ..cfg.clone() };
    let (f, truth) = fit_replicate(&cfg, 0)?;
    let (_, m) = match_with(&f, PolicyKind::PicseNarrowed, MatchMethod::Optimal)?;
    let sets = m.matched_sets();
    if sets.is_empty() {
        return Err(Error::Effect("no matched sets to evaluate".into()));
    }
    let delta = sets
        .iter()
        .map(|s| {
            let th: Vec<f64> = s.iter().map(|&i| truth.theta[i]).collect();
            th.iter().copied().fold(f64::NEG_INFINITY, f64::max) - th.iter().copied().fold(f64::INFINITY, f64::min)
        })
        .fold(0.0, f64::max);
    let z_obs = f.sample.z().to_vec();
    let n = z_obs.len();
    let true_index: Vec<f64> = (f.sample.x() * &truth.beta_true).iter().copied().collect();
    let scheme = WeightScheme::Uniform;

    // per draw: psi_tilde - psi at tau, and per-set treated-minus-control differences
    let per_draw: Vec<Result<(f64, Vec<f64>)>> = (0..draws)
        .into_par_iter()
        .map(|r| {
            let mut rng = rng::stream(rng::derive_seed(cfg.seed, "draws"), r as u64);
            let mut z = z_obs.clone();
            for s in &sets {
                let th: Vec<f64> = s.iter().map(|&i| truth.theta[i]).collect();
                let n1 = s.iter().filter(|&&i| z_obs[i]).count();
                let one_treated = n1 == 1;
                // the odd unit out is drawn with the conditional probabilities
                let probs: Vec<f64> = (0..s.len())
                    .map(|k| {
                        let zeta: Vec<bool> = (0..s.len()).map(|j| (j == k) == one_treated).collect();
                        effect::assignment_prob(&th, &zeta)
                    })
                    .collect::<Result<_>>()?;
                let u: f64 = rng.random();
                let mut acc = 0.0;
                let mut pick = s.len() - 1;
                for (k, pk) in probs.iter().enumerate() {
                    acc += pk;
                    if u < acc {
                        pick = k;
                        break;
                    }
                }
                for (k, &i) in s.iter().enumerate() {
                    z[i] = (k == pick) == one_treated;
                }
            }
            let mut y = vec![f64::NAN; n];
            for s in &sets {
                for &i in s {
                    let e: f64 = rng.sample(StandardNormal);
                    let base = cfg.prognostic * true_index[i] + cfg.noise_sd * e;
                    y[i] = base + if z[i] { truth.tau } else { 0.0 };
                }
            }
            let gap = effect::psi_tilde_value(&sets, &y, &z, scheme, &truth.theta, truth.tau)?
                - effect::psi_value(&sets, &y, &z, scheme, truth.tau)?;
            let est = effect::tau_hat(&sets, &y, &z, scheme)?;
            Ok((gap, est.strata.iter().map(|c| c.difference).collect()))
        })
        .collect();
    let mut gaps = Vec::with_capacity(draws);
    let mut diffs = Vec::with_capacity(draws);
    for r in per_draw {
        let (g, d) = r?;
        gaps.push(g);
        diffs.push(d);
    }
    let k = sets.len();
    let mut weighted = 0.0;
    let mut total = 0.0;
    // w_tilde |s| depends only on set sizes and treated counts, fixed across draws
    let est0 = {
        let y0: Vec<f64> = vec![0.0; n];
        effect::tau_hat(&sets, &y0, &z_obs, scheme)?
    };
    for j in 0..k {
        let col: Vec<f64> = diffs.iter().map(|d| d[j]).collect();
        let m = mean(&col);
        let ev = mean(&col.iter().map(|v| (v - m).abs()).collect::<Vec<_>>());
        let w = est0.strata[j].w_tilde * est0.strata[j].size as f64;
        weighted += w * ev;
        total += w;
    }
    let lhs = mean(&gaps).abs();
    let rhs = (4.0 * delta).exp_m1() * weighted / total;
    Ok(OracleGapResult {
        draws,
        matched_sets: k,
        delta,
        lhs,
        lhs_se: std_error(&gaps),
        rhs,
        ok: lhs <= rhs,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn median_and_trend_helpers() {
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(strictly_decreasing(&[3.0, 2.0, 1.0]));
        assert!(!strictly_decreasing(&[3.0, 3.0, 1.0]));
        assert!((log_log_slope(&[1.0, 2.0, 4.0], &[1.0, 0.5, 0.25]) + 1.0).abs() < 1e-12);
    }

    #[test]
    fn p_rules() {
        assert_eq!(PRule::Fixed(5).p(1000), 5);
        assert_eq!(PRule::Power(0.4).p(500), 13);
        assert_eq!(PRule::Power(0.4).p(4000), 28);
        assert_eq!(PRule::Power(0.5).p(100), 10);
    }

    #[test]
    fn zero_c_gives_zero_errors() {
        let r = verify_pair_errors(&DMatrix::identity(3, 3), &DMatrix::zeros(3, 3), 10, 20, 1).unwrap();
        assert_eq!(r.mean_max, 0.0);
        assert!(r.mean_square_ok && r.max_ok);
    }

    #[test]
    fn single_pair_max_bound() {
        let eye = DMatrix::<f64>::identity(10, 10);
        let r = verify_pair_errors(&eye, &(&eye * 0.01), 1, 2000, 4).unwrap();
        assert!((r.max_bound / 0.2f64.sqrt() - 1.1774100225154747).abs() < 1e-12);
        assert!(r.max_ok);
    }

    #[test]
    fn nearest_neighbor_gap() {
        let est = [0.0, 0.1, 1.0, 0.95];
        let tru = [0.0, 0.3, 1.0, 2.0];
        let z = [true, false, true, false];
        // unit 0 -> 1 (gap 0.3), unit 2 -> 3 (gap 1.0)
        assert!((unrestricted_nn_max_gap(&est, &tru, &z) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn pair_error_small_run_is_reproducible() {
        let eye = DMatrix::<f64>::identity(4, 4);
        let a = verify_pair_errors(&eye, &(&eye * 0.05), 50, 40, 9).unwrap();
        let b = verify_pair_errors(&eye, &(&eye * 0.05), 50, 40, 9).unwrap();
        assert_eq!(a.mean_square_ratio.to_bits(), b.mean_square_ratio.to_bits());
    }
}

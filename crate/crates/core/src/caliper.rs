//! Caliper quantities: covariate covariance and its index-orthogonal part,
//! the PIC standard error, Gaussian-max multipliers, index error distances,
//! their nominal supremum and hard limit, and the eligibility rules built on
//! them. Comparison calipers (0.2 sd of the index, Euclidean distance) live
//! here too.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::dataset::CenteredSample;
use crate::error::{Error, Result};
use crate::index_model::{self, IndexFit};
use crate::linalg;

/// Covariate covariance `S`, the index variance `beta' S beta`, and `S`
/// projected onto the orthocomplement of the index direction.
#[derive(Debug, Clone)]
pub struct CovarianceSummary {
    pub s: DMatrix<f64>,
    pub s2_index: f64,
    pub s_perp: DMatrix<f64>,
    /// `beta' S beta` was zero, so `s_perp` fell back to `S`.
    pub degenerate: bool,
}

/// `S = (n - L)^{-1} x'x` on (stratum-)centered covariates.
pub fn s_matrix(s: &CenteredSample) -> DMatrix<f64> {
    let x = s.x();
    let denom = (s.n() - s.n_strata()) as f64;
    linalg::symmetrize(&(x.tr_mul(x) / denom))
}

/// Rank diagnostic for `S`: the smallest-to-largest eigenvalue ratio.
pub fn s_rank_ratio(s: &DMatrix<f64>) -> f64 {
    let eig = linalg::sym_eigen(s);
    let max = eig.eigenvalues.iter().copied().fold(0.0, f64::max);
    let min = eig.eigenvalues.iter().copied().fold(f64::INFINITY, f64::min);
    if max <= 0.0 {
        0.0
    } else {
        min.max(0.0) / max
    }
}

/// `S - (S beta)(S beta)' / (beta' S beta)`.
///
/// Returns `S` unchanged (with a warning) when `beta' S beta` vanishes.
pub fn s_perp(s: &DMatrix<f64>, beta: &DVector<f64>) -> DMatrix<f64> {
    s_perp_checked(s, beta).0
}

fn s_perp_checked(s: &DMatrix<f64>, beta: &DVector<f64>) -> (DMatrix<f64>, bool) {
    let sb = s * beta;
    let q = beta.dot(&sb);
    if !(q > 0.0) || q <= 1e-300 {
        log::warn!("caliper: index direction is degenerate (beta' S beta = {q:e}); using S");
        return (s.clone(), true);
    }
    let out = s - (&sb * sb.transpose()) / q;
    (linalg::symmetrize(&out), false)
}

pub fn covariance_summary(s: &CenteredSample, beta: &DVector<f64>) -> CovarianceSummary {
    let sm = s_matrix(s);
    let s2_index = beta.dot(&(&sm * beta));
    let (s_perp, degenerate) = s_perp_checked(&sm, beta);
    CovarianceSummary {
        s: sm,
        s2_index,
        s_perp,
        degenerate,
    }
}

/// PIC standard error `<2 S_perp, C>^{1/2}`.
pub fn pic_se(s_perp: &DMatrix<f64>, c_hat: &DMatrix<f64>) -> Result<f64> {
    if s_perp.shape() != c_hat.shape() {
        return Err(Error::dimension(
            "caliper",
            format!("S_perp is {:?} but C_hat is {:?}", s_perp.shape(), c_hat.shape()),
        ));
    }
    let t = 2.0 * linalg::frobenius_inner(s_perp, c_hat);
    if t < -1e-10 {
        return Err(Error::Consistency(format!(
            "<2 S_perp, C_hat> = {t:e} is negative"
        )));
    }
    Ok(t.max(0.0).sqrt())
}

/// Gaussian max-of-`m` multiplier `(2 ln 2m)^{1/2}`.
pub fn z_star(m: usize) -> Result<f64> {
    if m == 0 {
        return Err(Error::invalid("caliper", "z* needs m >= 1"));
    }
    Ok((2.0 * (2.0 * m as f64).ln()).sqrt())
}

/// `((x_i - x_j) C (x_i - x_j)')^{1/2}`.
pub fn index_error_distance(xi: &[f64], xj: &[f64], c_hat: &DMatrix<f64>) -> f64 {
    let d: Vec<f64> = xi.iter().zip(xj).map(|(a, b)| a - b).collect();
    linalg::quad_form(c_hat, &d).max(0.0).sqrt()
}

/// `(ln m / divisor)^{1/2}`, zero when `m = 1`.
fn log_ratio(m: usize, divisor: f64) -> f64 {
    let l = (m as f64).ln();
    if l <= 0.0 {
        0.0
    } else {
        (l / divisor).sqrt()
    }
}

fn sup_divisor(p: usize) -> Result<f64> {
    if p < 2 {
        return Err(Error::dimension("caliper", format!("need p >= 2, got {p}")));
    }
    Ok((p - 1) as f64)
}

fn pair_count(n0: usize, n1: usize) -> Result<usize> {
    let m = n0.min(n1);
    if m == 0 {
        return Err(Error::invalid("caliper", "both arms must be nonempty"));
    }
    Ok(m)
}

/// Nominal supremum of index error distances,
/// `picse (1 + (ln min(n0, n1) / (p - 1))^{1/2})`.
pub fn nominal_sup(picse: f64, n0: usize, n1: usize, p: usize) -> Result<f64> {
    Ok(picse * (1.0 + log_ratio(pair_count(n0, n1)?, sup_divisor(p)?)))
}

/// Hard limit on index error distances,
/// `picse (2 + (ln min(n0, n1) / (p - 1))^{1/2})`.
pub fn hard_limit(picse: f64, n0: usize, n1: usize, p: usize) -> Result<f64> {
    Ok(picse * (2.0 + log_ratio(pair_count(n0, n1)?, sup_divisor(p)?)))
}

/// Excess of an index error distance over its nominal supremum.
pub fn excess(sed: f64, nominal_sup: f64) -> f64 {
    (sed - nominal_sup).max(0.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Eligible,
    /// The PIC exceeds its (possibly narrowed) allowance.
    IneligiblePic,
    /// The index error distance leaves no PIC allowance.
    IneligibleSed,
    /// A Euclidean covariate-distance caliper failed.
    IneligibleDistance,
}

impl Verdict {
    pub fn is_eligible(self) -> bool {
        self == Verdict::Eligible
    }
}

/// Selectively narrowed rule given a precomputed nominal supremum:
/// eligible iff `|pic| <= c_n (picse - excess)`, and never when the excess
/// exceeds the PIC SE.
pub fn narrowed_verdict(pic: f64, sed: f64, picse: f64, nominal: f64, c_n: f64) -> Verdict {
    let e = excess(sed, nominal);
    if e > picse {
        return Verdict::IneligibleSed;
    }
    let allowance = c_n * (picse - e);
    if pic.abs() <= allowance {
        Verdict::Eligible
    } else if e == picse {
        // zero allowance left by the distance itself
        Verdict::IneligibleSed
    } else {
        Verdict::IneligiblePic
    }
}

/// Eligibility under the selectively narrowed PIC SE caliper.
pub fn eligible(
    pic: f64,
    sed: f64,
    picse: f64,
    n0: usize,
    n1: usize,
    p: usize,
    c_n: f64,
) -> Result<Verdict> {
    let nominal = nominal_sup(picse, n0, n1, p)?;
    Ok(narrowed_verdict(pic, sed, picse, nominal, c_n))
}

/// The conventional comparison caliper, 0.2 times the sample standard
/// deviation (denominator `n - 1`) of the index.
pub fn rr_caliper(index_values: &[f64]) -> f64 {
    let n = index_values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = index_values.iter().sum::<f64>() / n as f64;
    let ss: f64 = index_values.iter().map(|v| (v - mean).powi(2)).sum();
    0.2 * (ss / (n - 1) as f64).sqrt()
}

#[derive(Debug, Clone, Serialize)]
pub struct EuclideanCalipers {
    pub global: f64,
    pub per_dim: Vec<f64>,
}

/// Euclidean distance calipers `tr(S)^{1/2} (1 + (ln n / (p-1))^{1/2})`
/// overall and `s(x_j) (1 + ...)` per covariate.
pub fn euclidean_calipers(s: &DMatrix<f64>, n: usize, p: usize) -> Result<EuclideanCalipers> {
    if n == 0 {
        return Err(Error::invalid("caliper", "n must be positive"));
    }
    let factor = 1.0 + log_ratio(n, sup_divisor(p)?);
    Ok(EuclideanCalipers {
        global: s.trace().max(0.0).sqrt() * factor,
        per_dim: (0..s.nrows()).map(|j| s[(j, j)].max(0.0).sqrt() * factor).collect(),
    })
}

pub use crate::linalg::intrinsic_dimension;

/// Gaussian-chaos bound on the root mean square of the maximal pairwise
/// `|(X_i - X_j) C^{1/2}|_2` over `m_pairs` pairs:
/// `<2 Sigma, C>^{1/2} (1 + (ln m / p_[Sigma^{1/2} C Sigma^{1/2}])^{1/2})`.
pub fn chaos_bound(sigma: &DMatrix<f64>, c: &DMatrix<f64>, m_pairs: usize) -> Result<f64> {
    if m_pairs == 0 {
        return Err(Error::invalid("caliper", "chaos bound needs at least one pair"));
    }
    let base = (2.0 * linalg::frobenius_inner(sigma, c)).max(0.0).sqrt();
    if m_pairs == 1 {
        return Ok(base);
    }
    let root = linalg::sym_sqrt(sigma);
    let inner = &root * c * &root;
    let dim = linalg::intrinsic_dimension(&inner);
    if dim <= 0.0 {
        return Err(Error::invalid(
            "caliper",
            "intrinsic dimension of Sigma^{1/2} C Sigma^{1/2} is zero",
        ));
    }
    Ok(base * (1.0 + ((m_pairs as f64).ln() / dim).sqrt()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum PolicyKind {
    PicseFixed,
    PicseNarrowed,
    #[serde(rename = "hard66")]
    PicseHard66,
    Rr02,
    Euclidean,
    None,
}

impl std::str::FromStr for PolicyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "picse-fixed" | "picse_fixed" => PolicyKind::PicseFixed,
            "picse-narrowed" | "picse_narrowed" => PolicyKind::PicseNarrowed,
            "hard66" | "picse-hard66" | "picse_hard66" => PolicyKind::PicseHard66,
            "rr02" => PolicyKind::Rr02,
            "euclidean" => PolicyKind::Euclidean,
            "none" => PolicyKind::None,
            other => return Err(Error::invalid("caliper", format!("unknown policy `{other}`"))),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CaliperOptions {
    pub policy: PolicyKind,
    /// Override for the PIC multiplier `c_n`; defaults to `z*_{min(n0,n1)}`.
    pub multiplier: Option<f64>,
    /// Divide by the intrinsic dimension of `S_perp^{1/2} C S_perp^{1/2}`
    /// instead of `p - 1` in the nominal supremum and hard limit.
    pub intrinsic_divisor: bool,
}

impl Default for CaliperOptions {
    fn default() -> Self {
        CaliperOptions {
            policy: PolicyKind::PicseNarrowed,
            multiplier: None,
            intrinsic_divisor: false,
        }
    }
}

/// Every caliper quantity for one fitted sample, plus the active policy.
#[derive(Debug, Clone, Serialize)]
pub struct CaliperPolicy {
    pub kind: PolicyKind,
    pub n0: usize,
    pub n1: usize,
    pub p: usize,
    /// `min(n0, n1)`, the pair count behind `z*`.
    pub m: usize,
    pub z_star: f64,
    /// PIC multiplier `c_n`.
    pub multiplier: f64,
    pub picse: f64,
    /// Divisor under the log term (`p - 1` unless the intrinsic option is on).
    pub divisor: f64,
    pub nominal_sup: f64,
    pub hard_limit: f64,
    /// Fixed PIC caliper `c_n * picse`.
    pub pic_width: f64,
    pub rr_width: f64,
    pub euclidean: EuclideanCalipers,
    pub degenerate_index: bool,
    pub s_rank_ratio: f64,
}

impl CaliperPolicy {
    /// Verdict from the PIC and index error distance alone. Euclidean
    /// distance checks need [`CaliperPolicy::verdict_with_difference`].
    pub fn verdict(&self, pic: f64, sed: f64) -> Verdict {
        match self.kind {
            PolicyKind::None => Verdict::Eligible,
            PolicyKind::PicseFixed => {
                if pic.abs() <= self.pic_width {
                    Verdict::Eligible
                } else {
                    Verdict::IneligiblePic
                }
            }
            PolicyKind::PicseNarrowed | PolicyKind::Euclidean => {
                narrowed_verdict(pic, sed, self.picse, self.nominal_sup, self.multiplier)
            }
            PolicyKind::PicseHard66 => {
                if sed > self.hard_limit {
                    Verdict::IneligibleSed
                } else if pic.abs() <= self.pic_width {
                    Verdict::Eligible
                } else {
                    Verdict::IneligiblePic
                }
            }
            PolicyKind::Rr02 => {
                if pic.abs() <= self.rr_width {
                    Verdict::Eligible
                } else {
                    Verdict::IneligiblePic
                }
            }
        }
    }

    /// Whether verdicts depend on the raw covariate difference.
    pub fn needs_difference(&self) -> bool {
        self.kind == PolicyKind::Euclidean
    }

    /// Full verdict including Euclidean calipers on `diff = x_i - x_j`.
    pub fn verdict_with_difference(&self, pic: f64, sed: f64, diff: &[f64]) -> Verdict {
        let v = self.verdict(pic, sed);
        if !v.is_eligible() || !self.needs_difference() {
            return v;
        }
        let dist2: f64 = diff.iter().map(|d| d * d).sum();
        if dist2.sqrt() > self.euclidean.global {
            return Verdict::IneligibleDistance;
        }
        if diff
            .iter()
            .zip(&self.euclidean.per_dim)
            .any(|(d, w)| d.abs() > *w)
        {
            return Verdict::IneligibleDistance;
        }
        Verdict::Eligible
    }
}

/// Computes the policy for a fitted sample and a chosen `C_hat`.
pub fn caliper_policy(
    s: &CenteredSample,
    fit: &IndexFit,
    c_hat: &DMatrix<f64>,
    opts: &CaliperOptions,
) -> Result<(CovarianceSummary, CaliperPolicy)> {
    let (n0, n1, p) = (s.n_control(), s.n_treated(), s.p());
    let m = pair_count(n0, n1)?;
    let cov = covariance_summary(s, &fit.beta);
    let picse = pic_se(&cov.s_perp, c_hat)?;
    let divisor = if opts.intrinsic_divisor {
        let root = linalg::sym_sqrt(&cov.s_perp);
        let d = linalg::intrinsic_dimension(&(&root * c_hat * &root));
        if d <= 0.0 {
            return Err(Error::invalid(
                "caliper",
                "intrinsic-dimension divisor requested but S_perp^{1/2} C S_perp^{1/2} vanishes",
            ));
        }
        d
    } else {
        sup_divisor(p)?
    };
    let z = z_star(m)?;
    let multiplier = opts.multiplier.unwrap_or(z);
    if !(multiplier >= 0.0) {
        return Err(Error::invalid("caliper", "c_n must be nonnegative"));
    }
    let ratio = log_ratio(m, divisor);
    let index: Vec<f64> = index_model::index_values(fit, s).iter().copied().collect();
    let policy = CaliperPolicy {
        kind: opts.policy,
        n0,
        n1,
        p,
        m,
        z_star: z,
        multiplier,
        picse,
        divisor,
        nominal_sup: picse * (1.0 + ratio),
        hard_limit: picse * (2.0 + ratio),
        pic_width: multiplier * picse,
        rr_width: rr_caliper(&index),
        euclidean: euclidean_calipers(&cov.s, s.n(), p)?,
        degenerate_index: cov.degenerate,
        s_rank_ratio: s_rank_ratio(&cov.s),
    };
    if policy.s_rank_ratio < 1e-12 {
        log::warn!("caliper: S is numerically singular");
    }
    Ok((cov, policy))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{center, Sample};
    use approx::assert_relative_eq;

    #[test]
    fn s_matrix_two_points() {
        let x = DMatrix::from_row_slice(2, 2, &[-1.0, 0.5, 1.0, -0.5]);
        let s = center(&Sample::new(x, vec![true, false], None, None).unwrap());
        assert_relative_eq!(s_matrix(&s)[(0, 0)], 2.0, epsilon = 1e-15);
    }

    #[test]
    fn duplicate_column_flags_rank() {
        let x = DMatrix::from_row_slice(4, 2, &[1.0, 1.0, 2.0, 2.0, -1.0, -1.0, 0.5, 0.5]);
        let s = center(&Sample::new(x, vec![true, false, true, false], None, None).unwrap());
        assert!(s_rank_ratio(&s_matrix(&s)) < 1e-12);
    }

    #[test]
    fn s_perp_coordinate_projection() {
        let out = s_perp(&DMatrix::identity(2, 2), &DVector::from_vec(vec![1.0, 0.0]));
        assert_relative_eq!(out, DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]), epsilon = 1e-15);
    }

    #[test]
    fn s_perp_degenerate_returns_s() {
        let s = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let (out, degenerate) = s_perp_checked(&s, &DVector::from_vec(vec![0.0, 1e-3]));
        assert!(degenerate);
        assert_eq!(out, s);
    }

    #[test]
    fn pic_se_closed_form() {
        let sp = DMatrix::from_row_slice(2, 2, &[0.0, 0.0, 0.0, 1.0]);
        let c = DMatrix::identity(2, 2) * 0.01;
        assert_relative_eq!(pic_se(&sp, &c).unwrap(), 0.02f64.sqrt(), epsilon = 1e-15);
        assert_eq!(pic_se(&sp, &DMatrix::zeros(2, 2)).unwrap(), 0.0);
        assert!(pic_se(&sp, &(-c * 10.0)).is_err());
    }

    #[test]
    fn z_star_values() {
        assert_relative_eq!(z_star(1).unwrap(), 1.177410022515475, epsilon = 1e-12);
        assert_relative_eq!(z_star(100).unwrap(), 3.2552472614374586, epsilon = 1e-12);
        assert!(z_star(0).is_err());
        assert!(z_star(7).unwrap() < z_star(8).unwrap());
    }

    #[test]
    fn index_error_distance_euclidean() {
        let c = DMatrix::identity(2, 2);
        assert_relative_eq!(index_error_distance(&[3.0, 4.0], &[0.0, 0.0], &c), 5.0, epsilon = 1e-15);
        assert_eq!(index_error_distance(&[1.0, 2.0], &[1.0, 2.0], &c), 0.0);
    }

    #[test]
    fn nominal_sup_values() {
        let v = nominal_sup(0.1, 100, 250, 5).unwrap();
        assert_relative_eq!(v, 0.1 * (1.0 + (100f64.ln() / 4.0).sqrt()), epsilon = 1e-15);
        assert_relative_eq!(v, 0.20729830131446736, epsilon = 1e-12);
        assert_eq!(nominal_sup(0.1, 1, 40, 5).unwrap(), 0.1);
        assert!(nominal_sup(0.1, 10, 10, 1).is_err());
        assert!(nominal_sup(0.1, 100, 100, 100_000).unwrap() < 0.1007);
    }

    #[test]
    fn excess_values() {
        assert_relative_eq!(excess(0.25, 0.20729830131446736), 0.04270169868553264, epsilon = 1e-12);
        assert_eq!(excess(0.1, 0.2), 0.0);
        let ns = 0.3;
        assert_relative_eq!(excess(0.7, ns) + ns, 0.7, epsilon = 1e-15);
    }

    #[test]
    fn narrowed_rule_examples() {
        let c = z_star(100).unwrap();
        let ns = nominal_sup(0.1, 100, 100, 5).unwrap();
        assert_relative_eq!(c * (0.1 - excess(0.25, ns)), 0.18652013843893822, epsilon = 1e-12);
        assert_eq!(eligible(0.3, 0.25, 0.1, 100, 100, 5, c).unwrap(), Verdict::IneligiblePic);
        assert_eq!(eligible(0.18, 0.25, 0.1, 100, 100, 5, c).unwrap(), Verdict::Eligible);
        assert_eq!(eligible(0.3, 0.15, 0.1, 100, 100, 5, c).unwrap(), Verdict::Eligible);
        // excess beyond picse: ineligible whatever the PIC
        assert_eq!(eligible(0.0, 0.5, 0.1, 100, 100, 5, c).unwrap(), Verdict::IneligibleSed);
    }

    #[test]
    fn rr_caliper_values() {
        assert_relative_eq!(rr_caliper(&[-1.0, 1.0]), 0.2 * 2f64.sqrt(), epsilon = 1e-15);
        assert_eq!(rr_caliper(&[3.0, 3.0, 3.0]), 0.0);
        let v = [0.3, -1.2, 2.2, 0.1];
        let doubled: Vec<f64> = v.iter().map(|a| 2.0 * a).collect();
        assert_relative_eq!(rr_caliper(&doubled), 2.0 * rr_caliper(&v), epsilon = 1e-15);
    }

    #[test]
    fn euclidean_widths() {
        let e = euclidean_calipers(&DMatrix::identity(2, 2), 8, 2).unwrap();
        let factor = 1.0 + 8f64.ln().sqrt();
        assert_relative_eq!(e.global, 2f64.sqrt() * factor, epsilon = 1e-14);
        assert_relative_eq!(e.per_dim[1], factor, epsilon = 1e-14);
        let s = DMatrix::from_row_slice(2, 2, &[4.0, 0.3, 0.3, 9.0]);
        let e = euclidean_calipers(&s, 8, 2).unwrap();
        assert_relative_eq!(e.per_dim[0], 2.0 * factor, epsilon = 1e-14);
        assert_relative_eq!(e.per_dim[1], 3.0 * factor, epsilon = 1e-14);
    }

    #[test]
    fn chaos_bound_isotropic_closed_form() {
        let p = 6;
        let c = 0.02;
        let m = 50;
        let b = chaos_bound(&DMatrix::identity(p, p), &(DMatrix::identity(p, p) * c), m).unwrap();
        let expected = (2.0 * c * p as f64).sqrt() * (1.0 + ((m as f64).ln() / p as f64).sqrt());
        assert_relative_eq!(b, expected, epsilon = 1e-12);
        let one = chaos_bound(&DMatrix::identity(p, p), &(DMatrix::identity(p, p) * c), 1).unwrap();
        assert_relative_eq!(one, (2.0 * c * p as f64).sqrt(), epsilon = 1e-14);
        assert!(chaos_bound(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), 5).is_err());
    }

    #[test]
    fn policy_parsing() {
        assert_eq!("picse-narrowed".parse::<PolicyKind>().unwrap(), PolicyKind::PicseNarrowed);
        assert_eq!("hard66".parse::<PolicyKind>().unwrap(), PolicyKind::PicseHard66);
        assert!("bogus".parse::<PolicyKind>().is_err());
    }
}

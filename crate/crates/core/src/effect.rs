//! Matched treatment-effect estimation on a fine stratification.
//!
//! For weights `w_s` the estimating function is
//!
//! ```text
//! psi(eta) = sum_s w_s sum_{i in s} (Y_i - eta (Z_i - Zbar_s)) (Z_i - Zbar_s)
//!            / sum_s w_s |s| Zbar_s (1 - Zbar_s)
//! ```
//!
//! which is affine in `eta` with slope -1, so its root is the closed form
//! `sum_s wt_s |s| (Ybar_s1 - Ybar_s0) / sum_s wt_s |s|`, `wt_s = w_s Zbar_s (1 - Zbar_s)`.
//! Strata with `wt_s = 0` (singletons, zero weights) drop out of both sums.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::Sample;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WeightScheme {
    /// `w_s = 1`: the treatment coefficient of OLS on `z` and matched-set
    /// indicators.
    #[default]
    Uniform,
    /// `w_s = 1 / (1 - Zbar_s)` for matched sets, 0 for singletons: the
    /// effect of treatment on the treated.
    Att,
}

impl std::str::FromStr for WeightScheme {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "uniform" => Ok(WeightScheme::Uniform),
            "att" => Ok(WeightScheme::Att),
            other => Err(Error::invalid("effect", format!("unknown weight scheme `{other}`"))),
        }
    }
}

impl WeightScheme {
    /// `w_s` for a stratum of `size` units with treated share `zbar`.
    pub fn weight(self, size: usize, zbar: f64) -> f64 {
        match self {
            WeightScheme::Uniform => 1.0,
            WeightScheme::Att if size > 1 && zbar < 1.0 => 1.0 / (1.0 - zbar),
            WeightScheme::Att => 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct StratumContribution {
    pub stratum: usize,
    pub size: usize,
    pub n_treated: usize,
    pub weight: f64,
    /// `w_s Zbar_s (1 - Zbar_s)`.
    pub w_tilde: f64,
    /// Treated-minus-control mean outcome; 0 when an arm is empty.
    pub difference: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EffectEstimate {
    pub scheme: WeightScheme,
    pub tau_hat: f64,
    /// `sum_s wt_s |s|`.
    pub denominator: f64,
    pub n_strata: usize,
    /// Strata with `wt_s > 0`.
    pub informative_strata: usize,
    pub strata: Vec<StratumContribution>,
}

impl EffectEstimate {
    /// Per-stratum table as CSV.
    pub fn write_strata_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["stratum", "size", "n_treated", "weight", "w_tilde", "difference"])?;
        for c in &self.strata {
            wtr.write_record([
                c.stratum.to_string(),
                c.size.to_string(),
                c.n_treated.to_string(),
                c.weight.to_string(),
                c.w_tilde.to_string(),
                c.difference.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::Output(e.to_string()))?;
        Ok(())
    }
}

struct StratumStats {
    size: usize,
    n_treated: usize,
    zbar: f64,
    weight: f64,
    w_tilde: f64,
}

fn stats(s: &[usize], z: &[bool], scheme: WeightScheme) -> Result<StratumStats> {
    if s.is_empty() {
        return Err(Error::Effect("empty stratum".into()));
    }
    if let Some(&i) = s.iter().find(|&&i| i >= z.len()) {
        return Err(Error::Effect(format!("stratum refers to unit {i} beyond n = {}", z.len())));
    }
    let n_treated = s.iter().filter(|&&i| z[i]).count();
    let zbar = n_treated as f64 / s.len() as f64;
    let weight = scheme.weight(s.len(), zbar);
    if !(weight >= 0.0 && weight.is_finite()) {
        return Err(Error::Effect("stratum weights must be finite and nonnegative".into()));
    }
    Ok(StratumStats {
        size: s.len(),
        n_treated,
        zbar,
        weight,
        w_tilde: weight * zbar * (1.0 - zbar),
    })
}

fn check_outcomes(s: &[usize], y: &[f64]) -> Result<()> {
    for &i in s {
        match y.get(i) {
            Some(v) if v.is_finite() => {}
            _ => {
                return Err(Error::Effect(format!(
                    "outcome missing or non-finite for matched unit {i}"
                )))
            }
        }
    }
    Ok(())
}

/// `sum_s wt_s |s|`, with an error when it vanishes.
fn normalizer(strata: &[Vec<usize>], z: &[bool], scheme: WeightScheme) -> Result<f64> {
    let mut d = 0.0;
    for s in strata {
        let st = stats(s, z, scheme)?;
        d += st.w_tilde * st.size as f64;
    }
    if d > 0.0 {
        Ok(d)
    } else {
        Err(Error::Effect(
            "no informative strata: every stratum is a singleton, single-arm, or zero-weight".into(),
        ))
    }
}

/// `sum_{i in s} psi_si(eta)` for one stratum.
fn stratum_psi(s: &[usize], y: &[f64], z: &[bool], st: &StratumStats, eta: f64) -> f64 {
    s.iter()
        .map(|&i| {
            let dz = if z[i] { 1.0 } else { 0.0 } - st.zbar;
            st.weight * (y[i] - eta * dz) * dz
        })
        .sum()
}

/// The estimating function at `eta`, summed unit by unit.
///
/// `y` and `z` are indexed by unit; `strata` lists the fine stratification.
/// Outcomes are only read for units in informative strata.
pub fn psi_value(
    strata: &[Vec<usize>],
    y: &[f64],
    z: &[bool],
    scheme: WeightScheme,
    eta: f64,
) -> Result<f64> {
    let denom = normalizer(strata, z, scheme)?;
    let mut num = 0.0;
    for s in strata {
        let st = stats(s, z, scheme)?;
        if st.w_tilde == 0.0 {
            continue;
        }
        check_outcomes(s, y)?;
        num += stratum_psi(s, y, z, &st, eta);
    }
    Ok(num / denom)
}

/// Root of [`psi_value`] in closed form, with the per-stratum table.
pub fn tau_hat(
    strata: &[Vec<usize>],
    y: &[f64],
    z: &[bool],
    scheme: WeightScheme,
) -> Result<EffectEstimate> {
    let denominator = normalizer(strata, z, scheme)?;
    let mut num = 0.0;
    let mut rows = Vec::with_capacity(strata.len());
    let mut informative = 0;
    for (k, s) in strata.iter().enumerate() {
        let st = stats(s, z, scheme)?;
        let difference = if st.w_tilde > 0.0 {
            check_outcomes(s, y)?;
            informative += 1;
            let (mut s1, mut s0) = (0.0, 0.0);
            for &i in s {
                if z[i] {
                    s1 += y[i];
                } else {
                    s0 += y[i];
                }
            }
            let n1 = st.n_treated as f64;
            let n0 = (st.size - st.n_treated) as f64;
            let d = s1 / n1 - s0 / n0;
            num += st.w_tilde * st.size as f64 * d;
            d
        } else {
            0.0
        };
        rows.push(StratumContribution {
            stratum: k,
            size: st.size,
            n_treated: st.n_treated,
            weight: st.weight,
            w_tilde: st.w_tilde,
            difference,
        });
    }
    Ok(EffectEstimate {
        scheme,
        tau_hat: num / denominator,
        denominator,
        n_strata: strata.len(),
        informative_strata: informative,
        strata: rows,
    })
}

/// Outcome vector for effect estimation: NaN where the outcome is missing.
pub fn outcome_vector(s: &Sample) -> Result<Vec<f64>> {
    let y = s
        .y()
        .ok_or_else(|| Error::Effect("sample has no outcome column".into()))?;
    Ok(y.iter().map(|v| v.unwrap_or(f64::NAN)).collect())
}

/// Conditional probability of the within-stratum assignment `zeta` given its
/// treated count, for units with logit-scale scores `thetas`.
///
/// The stratum must be fine: `zeta` has at most one treated or at most one
/// control unit. Singletons have probability 1.
pub fn assignment_prob(thetas: &[f64], zeta: &[bool]) -> Result<f64> {
    if thetas.len() != zeta.len() || thetas.is_empty() {
        return Err(Error::dimension("effect", "thetas and zeta must be nonempty and equally long"));
    }
    if thetas.iter().any(|t| !t.is_finite()) {
        return Err(Error::invalid("effect", "theta values must be finite"));
    }
    let k = thetas.len();
    if k == 1 {
        return Ok(1.0);
    }
    let n1 = zeta.iter().filter(|&&b| b).count();
    let (odd, sign) = if n1 == 1 {
        (zeta.iter().position(|&b| b).unwrap(), 1.0)
    } else if n1 == k - 1 {
        (zeta.iter().position(|&b| !b).unwrap(), -1.0)
    } else if n1 == 0 || n1 == k {
        return Ok(1.0);
    } else {
        return Err(Error::invalid(
            "effect",
            format!("stratum of size {k} with {n1} treated is not fine"),
        ));
    };
    let shift = thetas
        .iter()
        .map(|t| sign * t)
        .fold(f64::NEG_INFINITY, f64::max);
    let total: f64 = thetas.iter().map(|t| (sign * t - shift).exp()).sum();
    Ok((sign * thetas[odd] - shift).exp() / total)
}

/// Oracle estimating function: each stratum term divided by
/// `|s| pi_s(Z_s)`, with the same normalizer as [`psi_value`]. Needs the
/// true logit-scale scores `theta`, so it exists for simulation only.
pub fn psi_tilde_value(
    strata: &[Vec<usize>],
    y: &[f64],
    z: &[bool],
    scheme: WeightScheme,
    theta: &[f64],
    eta: f64,
) -> Result<f64> {
    if theta.len() != z.len() {
        return Err(Error::dimension("effect", "theta must have one entry per unit"));
    }
    let denom = normalizer(strata, z, scheme)?;
    let mut num = 0.0;
    for s in strata {
        let st = stats(s, z, scheme)?;
        if st.w_tilde == 0.0 {
            continue;
        }
        check_outcomes(s, y)?;
        let th: Vec<f64> = s.iter().map(|&i| theta[i]).collect();
        let zs: Vec<bool> = s.iter().map(|&i| z[i]).collect();
        let pi = assignment_prob(&th, &zs)?;
        if !(pi > 0.0) {
            return Err(Error::Effect("assignment probability underflowed to zero".into()));
        }
        num += stratum_psi(s, y, z, &st, eta) / (st.size as f64 * pi);
    }
    Ok(num / denom)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MspsCheck {
    /// `| |s| pi_s - 1 | <= (1 - 1/|s|)(e^{2 delta} - 1)` for every stratum
    /// and admissible assignment.
    pub fwd_ok: bool,
    /// `| 1/(|s| pi_s) - 1 | <= (1 - 1/|s|)(e^{4 delta} - 1)`.
    pub inv_ok: bool,
    pub max_lhs_fwd: f64,
    pub max_lhs_inv: f64,
    /// Largest ratio of left side to right side over strata (0 if all sides vanish).
    pub max_ratio_fwd: f64,
    pub max_ratio_inv: f64,
    pub strata_checked: usize,
}

/// Checks the assignment-probability error bounds for strata whose
/// within-stratum score spread is at most `delta`, over every admissible
/// one-treated and one-control assignment.
pub fn msps_err_check(thetas_by_stratum: &[Vec<f64>], delta: f64) -> Result<MspsCheck> {
    if !(delta >= 0.0 && delta.is_finite()) {
        return Err(Error::invalid("effect", "delta must be finite and nonnegative"));
    }
    let mut out = MspsCheck {
        fwd_ok: true,
        inv_ok: true,
        max_lhs_fwd: 0.0,
        max_lhs_inv: 0.0,
        max_ratio_fwd: 0.0,
        max_ratio_inv: 0.0,
        strata_checked: 0,
    };
    // absorbs rounding in exp/sum when the bound is attained
    let slack = 1e-12;
    for th in thetas_by_stratum {
        let k = th.len();
        if k == 0 {
            return Err(Error::invalid("effect", "empty stratum"));
        }
        let lo = th.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = th.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if hi - lo > delta * (1.0 + 1e-12) + 1e-12 {
            return Err(Error::invalid(
                "effect",
                format!("stratum score spread {} exceeds delta {delta}", hi - lo),
            ));
        }
        out.strata_checked += 1;
        let kf = k as f64;
        let lead = 1.0 - 1.0 / kf;
        let rhs_fwd = lead * (2.0 * delta).exp_m1();
        let rhs_inv = lead * (4.0 * delta).exp_m1();
        for odd in 0..k {
            for treated_odd in [true, false] {
                let zeta: Vec<bool> = (0..k).map(|j| (j == odd) == treated_odd).collect();
                let pi = assignment_prob(th, &zeta)?;
                let lhs_fwd = (kf * pi - 1.0).abs();
                let lhs_inv = (1.0 / (kf * pi) - 1.0).abs();
                out.max_lhs_fwd = out.max_lhs_fwd.max(lhs_fwd);
                out.max_lhs_inv = out.max_lhs_inv.max(lhs_inv);
                if lhs_fwd > rhs_fwd + slack {
                    out.fwd_ok = false;
                }
                if lhs_inv > rhs_inv + slack {
                    out.inv_ok = false;
                }
                if rhs_fwd > 0.0 {
                    out.max_ratio_fwd = out.max_ratio_fwd.max(lhs_fwd / rhs_fwd);
                }
                if rhs_inv > 0.0 {
                    out.max_ratio_inv = out.max_ratio_inv.max(lhs_inv / rhs_inv);
                }
            }
        }
    }
    Ok(out)
}

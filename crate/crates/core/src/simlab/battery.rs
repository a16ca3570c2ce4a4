//! The verification battery behind `picmatch verify`.
//!
//! Each check reports the measured statistic, its threshold and a verdict.
//! Output files contain no timings or paths, so a rerun with the same seed
//! reproduces them byte for byte.

use std::fs;
use std::path::Path;

use nalgebra::DMatrix;
use rand::Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::Serialize;

use crate::caliper::PolicyKind;
use crate::effect;
use crate::error::{Error, Result};
use crate::matcher::MatchMethod;

use super::dgp::{CovariateFamily, DgpConfig};
use super::rng;
use super::studies::{self, PRule, RateConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub enum Relation {
    #[serde(rename = "<=")]
    AtMost,
    #[serde(rename = ">=")]
    AtLeast,
    #[serde(rename = "==")]
    Equal,
}

impl std::fmt::Display for Relation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Relation::AtMost => "<=",
            Relation::AtLeast => ">=",
            Relation::Equal => "==",
        })
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub statistic: f64,
    pub relation: Relation,
    pub threshold: f64,
    pub passed: bool,
    pub detail: String,
}

impl Check {
    fn new(name: &str, statistic: f64, relation: Relation, threshold: f64, detail: String) -> Check {
        let passed = match relation {
            Relation::AtMost => statistic <= threshold,
            Relation::AtLeast => statistic >= threshold,
            Relation::Equal => statistic == threshold,
        };
        Check {
            name: name.to_string(),
            statistic,
            relation,
            threshold,
            passed,
            detail,
        }
    }

    fn flag(name: &str, ok: bool, detail: String) -> Check {
        Check::new(name, if ok { 1.0 } else { 0.0 }, Relation::Equal, 1.0, detail)
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct BatteryReport {
    pub seed: u64,
    pub quick: bool,
    pub passed: bool,
    pub checks: Vec<Check>,
}

/// Report plus the CSV tables, ready to write.
#[derive(Debug, Clone)]
pub struct BatteryOutput {
    pub report: BatteryReport,
    /// `(file name, contents)`.
    pub files: Vec<(String, String)>,
}

impl BatteryOutput {
    /// Writes `verify_report.json` and the tables into `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::Io {
            path: dir.display().to_string(),
            source: e,
        })?;
        let mut all = vec![(
            "verify_report.json".to_string(),
            serde_json::to_string_pretty(&self.report)? + "\n",
        )];
        all.extend(self.files.iter().cloned());
        for (name, body) in all {
            let path = dir.join(&name);
            fs::write(&path, body).map_err(|e| Error::Io {
                path: path.display().to_string(),
                source: e,
            })?;
        }
        Ok(())
    }
}

/// Replicate counts and grids for one battery run.
#[derive(Debug, Clone)]
pub struct BatteryPlan {
    pub pair_error_reps: usize,
    pub chaos_reps: usize,
    pub chaos_pairs: usize,
    pub strata: usize,
    pub enforcement_datasets: usize,
    pub rate_grid: Vec<usize>,
    pub rate_reps: usize,
    /// `n` at which the narrowed and unrestricted gaps are compared.
    pub compare_at: usize,
    pub heavy_tail_reps: usize,
    pub picse_grid: Vec<(usize, usize)>,
    pub picse_reps: usize,
    pub oracle_draws: usize,
}

impl BatteryPlan {
    pub fn full() -> Self {
        BatteryPlan {
            pair_error_reps: 2000,
            chaos_reps: 2000,
            chaos_pairs: 500,
            strata: 10_000,
            enforcement_datasets: 50,
            rate_grid: vec![500, 1000, 2000, 4000],
            rate_reps: 200,
            compare_at: 2000,
            heavy_tail_reps: 50,
            picse_grid: vec![(250, 5), (500, 5), (1000, 5), (2000, 5)],
            picse_reps: 2000,
            oracle_draws: 2000,
        }
    }

    pub fn quick() -> Self {
        BatteryPlan {
            pair_error_reps: 500,
            chaos_reps: 500,
            chaos_pairs: 200,
            strata: 2000,
            enforcement_datasets: 12,
            rate_grid: vec![500, 1000, 2000],
            rate_reps: 60,
            compare_at: 2000,
            heavy_tail_reps: 12,
            picse_grid: vec![(250, 5), (1000, 5)],
            picse_reps: 400,
            oracle_draws: 500,
        }
    }
}

/// Random fine strata of size 1 to `max_size` with within-stratum score
/// spread `delta` drawn from (0, 1]. Returns `(thetas, delta)` per stratum.
pub fn random_fine_strata(count: usize, max_size: usize, seed: u64) -> Vec<(Vec<f64>, f64)> {
    (0..count)
        .into_par_iter()
        .map(|k| {
            let mut rng = rng::stream(seed, k as u64);
            let size = rng.random_range(1..=max_size);
            let delta = 1.0 - rng.random::<f64>();
            let base: f64 = 2.0 * rng.sample::<f64, _>(StandardNormal);
            let mut th: Vec<f64> = (0..size).map(|_| base + delta * rng.random::<f64>()).collect();
            if size >= 2 {
                // pin the extremes so the spread is exactly delta
                th[0] = base;
                th[size - 1] = base + delta;
            }
            (th, delta)
        })
        .collect()
}

fn csv_of<T: Serialize>(rows: &[T]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::Output(e.to_string()))?;
    String::from_utf8(bytes).map_err(|e| Error::Output(e.to_string()))
}

fn decreasing_violations(v: &[f64]) -> f64 {
    v.windows(2).filter(|w| !(w[1] < w[0])).count() as f64
}

/// Runs every Monte-Carlo and consistency check.
pub fn run_battery(seed: u64, quick: bool) -> Result<BatteryOutput> {
    let plan = if quick { BatteryPlan::quick() } else { BatteryPlan::full() };
    run_plan(seed, quick, &plan)
}

pub fn run_plan(seed: u64, quick: bool, plan: &BatteryPlan) -> Result<BatteryOutput> {
    let mut checks = Vec::new();
    let mut files = Vec::new();

    // Gaussian pair errors
    let eye = DMatrix::<f64>::identity(10, 10);
    let c = &eye * 0.01;
    let p3 = studies::verify_pair_errors(&eye, &c, 500, plan.pair_error_reps, rng::derive_seed(seed, "pair-errors"))?;
    checks.push(Check::new(
        "pair_error_mean_square_ratio_low",
        p3.mean_square_ratio,
        Relation::AtLeast,
        0.95,
        format!("se {:.3e}, 3-se agreement {}", p3.ratio_se, p3.mean_square_ok),
    ));
    checks.push(Check::new(
        "pair_error_mean_square_ratio_high",
        p3.mean_square_ratio,
        Relation::AtMost,
        1.05,
        String::new(),
    ));
    checks.push(Check::new("pair_error_mean_max", p3.mean_max, Relation::AtMost, p3.max_bound, String::new()));
    let p3one = studies::verify_pair_errors(&eye, &c, 1, plan.pair_error_reps, rng::derive_seed(seed, "pair-errors-one"))?;
    checks.push(Check::new(
        "pair_error_single_pair_mean_abs",
        p3one.mean_max,
        Relation::AtMost,
        p3one.max_bound,
        String::new(),
    ));
    files.push(("pair_errors.csv".to_string(), csv_of(&[p3, p3one])?));

    // Chaos bound
    let mut chaos_rows = Vec::new();
    for (label, sigma, cm) in studies::chaos_configs(10) {
        let r = studies::verify_chaos(label, &sigma, &cm, plan.chaos_pairs, plan.chaos_reps, rng::derive_seed(seed, label))?;
        checks.push(Check::new(
            &format!("chaos_bound_{label}"),
            r.rms_max,
            Relation::AtMost,
            r.bound,
            format!("slack {:.4e}", r.slack),
        ));
        chaos_rows.push(r);
    }
    let one = studies::verify_chaos("single_pair", &eye, &c, 1, plan.chaos_reps, rng::derive_seed(seed, "chaos-one"))?;
    checks.push(Check::flag(
        "chaos_single_pair_mean_square",
        one.ok,
        format!("rms {:.5} vs {:.5}", one.rms_max, one.bound),
    ));
    chaos_rows.push(one);
    files.push(("chaos.csv".to_string(), csv_of(&chaos_rows)?));

    // Assignment probabilities on random fine strata
    let strata = random_fine_strata(plan.strata, 6, rng::derive_seed(seed, "strata"));
    let mut worst_sum: f64 = 0.0;
    let mut v_fwd = 0usize;
    let mut v_inv = 0usize;
    for (th, delta) in &strata {
        let k = th.len();
        for treated_odd in [true, false] {
            let total: f64 = (0..k)
                .map(|odd| {
                    let zeta: Vec<bool> = (0..k).map(|j| (j == odd) == treated_odd).collect();
                    effect::assignment_prob(th, &zeta)
                })
                .sum::<Result<f64>>()?;
            worst_sum = worst_sum.max(if k == 1 { 0.0 } else { (total - 1.0).abs() });
        }
        let r = effect::msps_err_check(std::slice::from_ref(th), *delta)?;
        v_fwd += usize::from(!r.fwd_ok);
        v_inv += usize::from(!r.inv_ok);
    }
    checks.push(Check::new(
        "assignment_probabilities_sum_to_one",
        worst_sum,
        Relation::AtMost,
        1e-12,
        format!("{} strata", strata.len()),
    ));
    checks.push(Check::new("propensity_error_bound_e2delta", v_fwd as f64, Relation::Equal, 0.0, String::new()));
    checks.push(Check::new("propensity_error_bound_e4delta", v_inv as f64, Relation::Equal, 0.0, String::new()));

    // Caliper enforcement
    let enf = studies::caliper_enforcement(
        &studies::enforcement_configs(plan.enforcement_datasets, 400, 6),
        rng::derive_seed(seed, "enforce"),
    )?;
    checks.push(Check::new(
        "narrowed_caliper_violations",
        enf.narrowed_violations as f64,
        Relation::Equal,
        0.0,
        format!("{} pairs over {} datasets, {} failed fits", enf.pairs_checked, enf.datasets, enf.failures),
    ));
    checks.push(Check::new("hard_limit_violations", enf.hard66_violations as f64, Relation::Equal, 0.0, String::new()));

    // Rates and effects
    let rate_cfg = RateConfig {
        base: DgpConfig::new(plan.rate_grid[0], 2),
        p_rule: PRule::Power(0.4),
        n_grid: plan.rate_grid.clone(),
        reps: plan.rate_reps,
        policy: PolicyKind::PicseNarrowed,
        method: MatchMethod::Nearest,
    };
    let rate = studies::rate_study(&rate_cfg, rng::derive_seed(seed, "rate"))?;
    let gaps: Vec<f64> = rate.points.iter().map(|p| p.median_max_true_gap).collect();
    let taus: Vec<f64> = rate.points.iter().map(|p| p.median_abs_tau_error).collect();
    checks.push(Check::new(
        "max_true_gap_decreasing_violations",
        decreasing_violations(&gaps),
        Relation::Equal,
        0.0,
        format!("medians {gaps:?}, log-log slope {:.3}", rate.gap_slope),
    ));
    if let Some(pt) = rate.points.iter().find(|p| p.n == plan.compare_at) {
        checks.push(Check::new(
            "narrowed_gap_vs_unrestricted_nn",
            pt.median_max_true_gap,
            Relation::AtMost,
            pt.median_nn_max_true_gap,
            format!("n = {}", pt.n),
        ));
    }
    checks.push(Check::new(
        "effect_error_decreasing_violations",
        decreasing_violations(&taus),
        Relation::Equal,
        0.0,
        format!("medians {taus:?}, log-log slope {:.3}", rate.tau_error_slope),
    ));
    let failures: usize = rate.points.iter().map(|p| p.failures).sum();
    checks.push(Check::new("rate_study_failed_replicates", failures as f64, Relation::Equal, 0.0, String::new()));
    files.push(("rate_summary.csv".to_string(), csv_of(&rate.points)?));
    files.push(("rate_replicates.csv".to_string(), csv_of(&rate.rows)?));

    // Heavy tails: the hard limit holds in every replicate
    let heavy_cfg = RateConfig {
        base: DgpConfig {
            family: CovariateFamily::ScaledT { df: 4.0 },
            ..DgpConfig::new(1000, 2)
        },
        p_rule: PRule::Fixed(8),
        n_grid: vec![1000],
        reps: plan.heavy_tail_reps,
        policy: PolicyKind::PicseNarrowed,
        method: MatchMethod::Optimal,
    };
    let heavy = studies::rate_study(&heavy_cfg, rng::derive_seed(seed, "heavy"))?;
    checks.push(Check::new(
        "heavy_tail_sed_within_hard_limit_share",
        heavy.points[0].sed_within_hard_limit,
        Relation::Equal,
        1.0,
        format!("{} replicates", heavy.points[0].replicates),
    ));

    // PIC SE consistency
    let (picse_rows, trend) = studies::verify_picse_consistency(
        &DgpConfig::new(250, 5),
        &plan.picse_grid,
        plan.picse_reps,
        rng::derive_seed(seed, "picse"),
    )?;
    checks.push(Check::flag(
        "picse_scaled_error_nonincreasing",
        trend,
        format!(
            "{:?}",
            picse_rows.iter().map(|r| r.median_scaled_error).collect::<Vec<_>>()
        ),
    ));
    files.push(("picse_consistency.csv".to_string(), csv_of(&picse_rows)?));

    // Oracle versus feasible estimating function
    let og = studies::verify_oracle_gap(&DgpConfig::new(1000, 5), plan.oracle_draws, rng::derive_seed(seed, "oracle"))?;
    checks.push(Check::new(
        "oracle_estimating_function_gap",
        og.lhs,
        Relation::AtMost,
        og.rhs,
        format!("delta {:.4}, se {:.3e}, {} sets", og.delta, og.lhs_se, og.matched_sets),
    ));

    let passed = checks.iter().all(|c| c.passed);
    Ok(BatteryOutput {
        report: BatteryReport {
            seed,
            quick,
            passed,
            checks,
        },
        files,
    })
}

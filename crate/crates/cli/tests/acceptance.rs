//! Acceptance battery. Runs every criterion, prints one PASS/FAIL line each,
//! and exits nonzero if any fails.

use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use picmatch::caliper::{self, CaliperOptions, CaliperPolicy, EuclideanCalipers, PolicyKind, Verdict};
use picmatch::effect::{self, WeightScheme};
use picmatch::index_model::{self, FitOptions, ScoreFamily};
use picmatch::matcher::{self, Edge, EligibilityGraph, ExclusionCounts, Objective};
use picmatch::simlab::studies::{self, PRule, RateConfig};
use picmatch::simlab::{self, DgpConfig};
use picmatch::{center, CovEstimator, MatchMethod, Sample};

type Outcome = Result<String, String>;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn normal_matrix(r: &mut ChaCha8Rng, n: usize, p: usize) -> DMatrix<f64> {
    DMatrix::from_fn(n, p, |_, _| r.sample(StandardNormal))
}

fn rel_frob(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    (a - b).norm() / b.norm().max(1e-300)
}

fn ensure(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

/// Column-centered copy and the `n - 1` covariance.
fn centered_cov(x: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let n = x.nrows();
    let mut xc = x.clone();
    for j in 0..x.ncols() {
        let m = x.column(j).mean();
        for i in 0..n {
            xc[(i, j)] -= m;
        }
    }
    let s = xc.transpose() * &xc / (n as f64 - 1.0);
    (xc, s)
}

fn c1_u_statistic() -> Outcome {
    let mut r = rng(101);
    let mut worst = 0.0f64;
    for k in 0..20 {
        let n = r.random_range(80..=300);
        let p = r.random_range(2..=12);
        let (sample, _) = simlab::generate(&DgpConfig { seed: 500 + k, ..DgpConfig::new(n, p) }, 0)
            .map_err(|e| e.to_string())?;
        let cs = center(&sample);
        let fit = index_model::fit(&cs, &ScoreFamily::logistic(), &FitOptions::default())
            .map_err(|e| e.to_string())?;
        let c_hat = index_model::cov_beta(&fit, CovEstimator::InverseInformation).map_err(|e| e.to_string())?;
        let (_, policy) = caliper::caliper_policy(&cs, &fit, &c_hat, &CaliperOptions::default())
            .map_err(|e| e.to_string())?;

        // all-pairs mean of the PIC variance of the difference with its
        // index component removed
        let (_, s) = centered_cov(sample.x());
        let b = &fit.beta;
        let sb = &s * b;
        let q = b.dot(&sb);
        let x = sample.x();
        let mut total = 0.0;
        let mut count = 0usize;
        let mut d = DVector::zeros(p);
        for i in 0..n {
            for j in i + 1..n {
                for c in 0..p {
                    d[c] = x[(i, c)] - x[(j, c)];
                }
                let t = d.dot(b) / q;
                let dp = &d - &sb * t;
                total += dp.dot(&(&c_hat * &dp));
                count += 1;
            }
        }
        let oracle = total / count as f64;
        let rel = (policy.picse.powi(2) - oracle).abs() / oracle;
        worst = worst.max(rel);
    }
    ensure(worst <= 1e-9, format!("max relative error {worst:.2e} over 20 datasets"))
}

fn c2_s_perp() -> Outcome {
    let mut r = rng(202);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let p = r.random_range(2..=10);
        let n = r.random_range(p + 5..=80);
        let x = normal_matrix(&mut r, n, p) * normal_matrix(&mut r, p, p);
        let beta = DVector::from_fn(p, |_, _| r.sample::<f64, _>(StandardNormal));
        let (xc, s) = centered_cov(&x);
        // residualize each column on the index
        let v = &xc * &beta;
        let coef = xc.transpose() * &v / v.dot(&v);
        let resid = &xc - &v * coef.transpose();
        let oracle = resid.transpose() * &resid / (n as f64 - 1.0);
        worst = worst.max(rel_frob(&caliper::s_perp(&s, &beta), &oracle));
    }
    ensure(worst <= 1e-10, format!("max Frobenius relative error {worst:.2e} over 100 draws"))
}

fn c3_linear_self_linearization() -> Outcome {
    let mut r = rng(303);
    let mut worst = 0.0f64;
    for k in 0..50 {
        let n = r.random_range(40..=300);
        let p = r.random_range(2..=8);
        let (sample, _) = simlab::generate(&DgpConfig { seed: 900 + k, ..DgpConfig::new(n, p) }, 0)
            .map_err(|e| e.to_string())?;
        let cs = center(&sample);
        let fam = ScoreFamily::linear();
        let fit = index_model::fit(&cs, &fam, &FitOptions::default()).map_err(|e| e.to_string())?;
        let theta_true = DVector::from_fn(p + 1, |_, _| 3.0 * r.sample::<f64, _>(StandardNormal));
        let lin = index_model::linearize(&cs, &fam, &theta_true).map_err(|e| e.to_string())?;
        let diff = (lin.beta_tilde - fit.theta()).amax();
        worst = worst.max(diff / fit.theta().amax().max(1.0));
    }
    ensure(worst <= 1e-9, format!("max scaled difference {worst:.2e} over 50 datasets"))
}

fn c4_jacobian() -> Outcome {
    let mut r = rng(404);
    let (sample, _) = simlab::generate(&DgpConfig { seed: 44, ..DgpConfig::new(250, 4) }, 0)
        .map_err(|e| e.to_string())?;
    let cs = center(&sample);
    let s: &Sample = cs.sample();
    let mut worst = 0.0f64;
    for fam in [ScoreFamily::logistic(), ScoreFamily::linear()] {
        for _ in 0..5 {
            let theta = DVector::from_fn(5, |_, _| 0.5 * r.sample::<f64, _>(StandardNormal));
            let a = index_model::a_hat(s, &fam, &theta).map_err(|e| e.to_string())?;
            let h = 1e-5;
            let mut fd = DMatrix::zeros(5, 5);
            for j in 0..5 {
                let mut up = theta.clone();
                let mut dn = theta.clone();
                up[j] += h;
                dn[j] -= h;
                let g = (index_model::mean_score(s, &fam, &up).map_err(|e| e.to_string())?
                    - index_model::mean_score(s, &fam, &dn).map_err(|e| e.to_string())?)
                    / (2.0 * h);
                fd.set_column(j, &g);
            }
            worst = worst.max(rel_frob(&fd, &a));
        }
    }
    ensure(worst <= 1e-5, format!("max relative error {worst:.2e} over 10 parameter draws"))
}

fn c5_pair_errors() -> Outcome {
    let eye = DMatrix::identity(10, 10);
    let c = DMatrix::identity(10, 10) * 0.01;
    let r = studies::verify_pair_errors(&eye, &c, 500, 2000, 55).map_err(|e| e.to_string())?;
    ensure(
        (0.95..=1.05).contains(&r.mean_square_ratio) && r.mean_max <= r.max_bound,
        format!(
            "mean-square ratio {:.4}, E max {:.4} <= {:.4}",
            r.mean_square_ratio, r.mean_max, r.max_bound
        ),
    )
}

fn c6_chaos() -> Outcome {
    let mut parts = Vec::new();
    let mut ok = true;
    for (label, sigma, c) in studies::chaos_configs(10) {
        let r = studies::verify_chaos(label, &sigma, &c, 500, 2000, 66).map_err(|e| e.to_string())?;
        ok &= r.rms_max <= r.bound;
        parts.push(format!("{label} {:.4}<={:.4}", r.rms_max, r.bound));
    }
    ensure(ok, parts.join(", "))
}

/// `P(Z = zeta | sum Z)` for independent `Bernoulli(expit(theta_i))`.
fn enumerate_prob(thetas: &[f64], zeta: &[bool]) -> f64 {
    let k = thetas.len();
    let target = zeta.iter().filter(|&&b| b).count();
    let weight = |bits: &[bool]| -> f64 {
        thetas
            .iter()
            .zip(bits)
            .map(|(&t, &b)| {
                let pr = 1.0 / (1.0 + (-t).exp());
                if b {
                    pr
                } else {
                    1.0 - pr
                }
            })
            .product()
    };
    let mut total = 0.0;
    for mask in 0u32..(1 << k) {
        if mask.count_ones() as usize == target {
            let bits: Vec<bool> = (0..k).map(|i| mask >> i & 1 == 1).collect();
            total += weight(&bits);
        }
    }
    weight(zeta) / total
}

fn random_fine_stratum(r: &mut ChaCha8Rng, spread: f64) -> (Vec<f64>, Vec<bool>) {
    let k = r.random_range(2..=6);
    let base: f64 = r.random_range(-2.0..2.0);
    let thetas: Vec<f64> = (0..k).map(|_| base + spread * r.random::<f64>()).collect();
    let one = r.random_range(0..k);
    let one_treated = r.random::<bool>();
    let zeta = (0..k).map(|i| (i == one) == one_treated).collect();
    (thetas, zeta)
}

fn c7_assignment_probs() -> Outcome {
    let mut r = rng(707);
    let mut worst = 0.0f64;
    for _ in 0..10_000 {
        let (thetas, zeta) = random_fine_stratum(&mut r, 3.0);
        let got = effect::assignment_prob(&thetas, &zeta).map_err(|e| e.to_string())?;
        worst = worst.max((got - enumerate_prob(&thetas, &zeta)).abs());
    }
    ensure(worst <= 1e-12, format!("max abs error {worst:.2e} over 10^4 strata"))
}

fn c8_msps() -> Outcome {
    let mut r = rng(808);
    let mut violations = 0usize;
    let mut library_ok = true;
    for _ in 0..10_000 {
        let delta: f64 = 1.0 - r.random::<f64>();
        let (thetas, _) = random_fine_stratum(&mut r, delta);
        let k = thetas.len();
        let inv = 1.0 / k as f64;
        // every admissible pattern: each single treated and each single control
        for one in 0..k {
            for one_treated in [true, false] {
                let zeta: Vec<bool> = (0..k).map(|i| (i == one) == one_treated).collect();
                let pi = enumerate_prob(&thetas, &zeta);
                let lhs_fwd = (pi / inv - 1.0).abs();
                let lhs_inv = (inv / pi - 1.0).abs();
                if lhs_fwd > (1.0 - inv) * ((2.0 * delta).exp() - 1.0) + 1e-12
                    || lhs_inv > (1.0 - inv) * ((4.0 * delta).exp() - 1.0) + 1e-12
                {
                    violations += 1;
                }
            }
        }
        let check = effect::msps_err_check(&[thetas], delta).map_err(|e| e.to_string())?;
        library_ok &= check.fwd_ok && check.inv_ok;
    }
    ensure(
        violations == 0 && library_ok,
        format!("{violations} oracle violations, library verdict {library_ok}"),
    )
}

fn c9_effect() -> Outcome {
    let mut r = rng(909);
    let (mut worst_fe, mut worst_root, mut worst_slope) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..20 {
        let mut strata: Vec<Vec<usize>> = Vec::new();
        let mut z = Vec::new();
        let n_sets = r.random_range(5..=40);
        for _ in 0..n_sets {
            let k = r.random_range(1..=5);
            let one_treated = r.random::<bool>();
            let start = z.len();
            for i in 0..k {
                z.push((i == 0) == one_treated);
            }
            strata.push((start..start + k).collect());
        }
        let n = z.len();
        let y: Vec<f64> = (0..n)
            .map(|i| 2.0 * f64::from(u8::from(z[i])) + r.sample::<f64, _>(StandardNormal))
            .collect();
        let est = match effect::tau_hat(&strata, &y, &z, WeightScheme::Uniform) {
            Ok(e) => e,
            Err(_) => continue,
        };
        // OLS on z plus one indicator per stratum
        let l = strata.len();
        let mut design = DMatrix::zeros(n, l + 1);
        for (k, s) in strata.iter().enumerate() {
            for &i in s {
                design[(i, 0)] = f64::from(u8::from(z[i]));
                design[(i, k + 1)] = 1.0;
            }
        }
        let yv = DVector::from_vec(y.clone());
        let svd = design.clone().svd(true, true);
        let coef = svd.solve(&yv, 1e-12).map_err(|e| e.to_string())?;
        worst_fe = worst_fe.max((coef[0] - est.tau_hat).abs() / coef[0].abs().max(1.0));
        let at = |eta| effect::psi_value(&strata, &y, &z, WeightScheme::Uniform, eta);
        worst_root = worst_root.max(at(est.tau_hat).map_err(|e| e.to_string())?.abs());
        let slope = at(est.tau_hat + 1.0).map_err(|e| e.to_string())? - at(est.tau_hat).map_err(|e| e.to_string())?;
        worst_slope = worst_slope.max((slope + 1.0).abs());
    }
    ensure(
        worst_fe <= 1e-8 && worst_root <= 1e-10 && worst_slope <= 1e-12,
        format!("fixed-effects gap {worst_fe:.2e}, root {worst_root:.2e}, slope error {worst_slope:.2e}"),
    )
}

fn open_policy() -> CaliperPolicy {
    CaliperPolicy {
        kind: PolicyKind::None,
        n0: 8,
        n1: 8,
        p: 2,
        m: 8,
        z_star: 1.0,
        multiplier: 1.0,
        picse: 1.0,
        divisor: 1.0,
        nominal_sup: f64::INFINITY,
        hard_limit: f64::INFINITY,
        pic_width: f64::INFINITY,
        rr_width: f64::INFINITY,
        euclidean: EuclideanCalipers {
            global: f64::INFINITY,
            per_dim: vec![f64::INFINITY; 2],
        },
        degenerate_index: false,
        s_rank_ratio: 1.0,
    }
}

/// Dynamic program over treated rows and subsets of used controls: the
/// lexicographically best (cardinality, -total cost).
fn brute_match(nt: usize, nc: usize, cost: &[Option<f64>]) -> (usize, f64) {
    let full = 1usize << nc;
    let worse = |a: (usize, f64), b: (usize, f64)| a.0 < b.0 || (a.0 == b.0 && a.1 > b.1);
    // best[mask] after processing the first t treated rows
    let mut best = vec![None::<(usize, f64)>; full];
    best[0] = Some((0, 0.0));
    for t in 0..nt {
        let mut next = best.clone();
        for mask in 0..full {
            let Some(cur) = best[mask] else { continue };
            for c in 0..nc {
                if mask >> c & 1 == 1 {
                    continue;
                }
                if let Some(w) = cost[t * nc + c] {
                    let cand = (cur.0 + 1, cur.1 + w);
                    let slot = &mut next[mask | 1 << c];
                    if slot.is_none_or(|s| worse(s, cand)) {
                        *slot = Some(cand);
                    }
                }
            }
        }
        best = next;
    }
    best.into_iter()
        .flatten()
        .fold((0, 0.0), |acc, v| if worse(acc, v) { v } else { acc })
}

fn c10_matcher() -> Outcome {
    let mut r = rng(1010);
    let mut mismatches = 0usize;
    for _ in 0..200 {
        let nt = r.random_range(1..=8);
        let nc = r.random_range(1..=8);
        let density: f64 = r.random_range(0.2..1.0);
        let pic: Vec<Option<f64>> = (0..nt * nc)
            .map(|_| (r.random::<f64>() < density).then(|| r.random_range(-2.0..2.0)))
            .collect();
        let mut edges = Vec::new();
        for t in 0..nt {
            for c in 0..nc {
                if let Some(v) = pic[t * nc + c] {
                    edges.push(Edge { treated: t, control: nt + c, pic: v, sed: 0.0, verdict: Verdict::Eligible });
                }
            }
        }
        let g = EligibilityGraph {
            n: nt + nc,
            treated: (0..nt).collect(),
            control: (nt..nt + nc).collect(),
            edges,
            exclusions: ExclusionCounts::default(),
            evaluated: nt * nc,
            policy: open_policy(),
        };
        let m = matcher::pair_match(&g, Objective::TotalCost);
        let total: f64 = m.pairs.iter().map(|p| p.pic.abs()).sum();
        let abs: Vec<Option<f64>> = pic.iter().map(|v| v.map(f64::abs)).collect();
        let (card, cost) = brute_match(nt, nc, &abs);
        if m.pairs.len() != card || (total - cost).abs() > 1e-9 {
            mismatches += 1;
        }
    }
    ensure(mismatches == 0, format!("{mismatches} of 200 graphs disagree with enumeration"))
}

fn c11_enforcement() -> Outcome {
    let res = studies::caliper_enforcement(&studies::enforcement_configs(50, 400, 6), 1111)
        .map_err(|e| e.to_string())?;
    ensure(
        res.narrowed_violations == 0 && res.hard66_violations == 0 && res.failures == 0 && res.datasets == 50,
        format!(
            "{} datasets, {} pairs, violations narrowed {} hard66 {}, failed fits {}",
            res.datasets, res.pairs_checked, res.narrowed_violations, res.hard66_violations, res.failures
        ),
    )
}

fn rate_config() -> RateConfig {
    RateConfig {
        base: DgpConfig::new(500, 2),
        p_rule: PRule::Power(0.4),
        n_grid: vec![500, 1000, 2000, 4000],
        reps: 200,
        policy: PolicyKind::PicseNarrowed,
        method: MatchMethod::Nearest,
    }
}

fn c12_13_rate() -> (Outcome, Outcome) {
    let study = match studies::rate_study(&rate_config(), 1212) {
        Ok(s) => s,
        Err(e) => return (Err(e.to_string()), Err(e.to_string())),
    };
    let gaps: Vec<f64> = study.points.iter().map(|p| p.median_max_true_gap).collect();
    let taus: Vec<f64> = study.points.iter().map(|p| p.median_abs_tau_error).collect();
    let at = study.points.iter().find(|p| p.n == 2000);
    let cmp = at.is_some_and(|p| p.median_max_true_gap <= p.median_nn_max_true_gap);
    let failures: usize = study.points.iter().map(|p| p.failures).sum();
    let c12 = ensure(
        studies::strictly_decreasing(&gaps) && cmp && failures == 0,
        format!(
            "medians {:?}; at n=2000 {:.4} vs 1-NN {:.4}",
            round4(&gaps),
            at.map_or(f64::NAN, |p| p.median_max_true_gap),
            at.map_or(f64::NAN, |p| p.median_nn_max_true_gap)
        ),
    );
    let c13 = ensure(studies::strictly_decreasing(&taus), format!("medians {:?}", round4(&taus)));
    (c12, c13)
}

fn round4(v: &[f64]) -> Vec<f64> {
    v.iter().map(|x| (x * 1e4).round() / 1e4).collect()
}

fn c14_determinism() -> Outcome {
    let bin = env!("CARGO_BIN_EXE_picmatch");
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let run = |name: &str| -> Result<(), String> {
        let status = Command::new(bin)
            .args(["verify", "--quick", "--seed", "1414", "--out"])
            .arg(dir.path().join(name))
            .stdout(std::process::Stdio::null())
            .status()
            .map_err(|e| e.to_string())?;
        if status.success() {
            Ok(())
        } else {
            Err(format!("verify --quick exited with {status}"))
        }
    };
    run("a")?;
    run("b")?;
    let files = read_dir_sorted(&dir.path().join("a"))?;
    let mut differing = Vec::new();
    for name in &files {
        let a = std::fs::read(dir.path().join("a").join(name)).map_err(|e| e.to_string())?;
        let b = std::fs::read(dir.path().join("b").join(name)).map_err(|e| e.to_string())?;
        if a != b {
            differing.push(name.clone());
        }
    }
    let same_listing = files == read_dir_sorted(&dir.path().join("b"))?;
    ensure(
        differing.is_empty() && same_listing && !files.is_empty(),
        format!("{} files compared, differing {:?}", files.len(), differing),
    )
}

fn read_dir_sorted(p: &Path) -> Result<Vec<String>, String> {
    let mut v: Vec<String> = std::fs::read_dir(p)
        .map_err(|e| e.to_string())?
        .map(|e| e.map(|e| e.file_name().to_string_lossy().into_owned()))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    v.sort();
    Ok(v)
}

fn report(id: u32, title: &str, budget: Duration, elapsed: Duration, outcome: &Outcome) -> bool {
    let within = elapsed <= budget;
    let (ok, detail) = match outcome {
        Ok(d) => (within, d.as_str()),
        Err(d) => (false, d.as_str()),
    };
    println!(
        "criterion {id:>2} {}: {title}: {detail} [{:.1}s, budget {}s]",
        if ok { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs()
    );
    ok
}

fn timed(f: impl FnOnce() -> Outcome) -> (Outcome, Duration) {
    let t = Instant::now();
    let o = f();
    (o, t.elapsed())
}

fn main() {
    let secs = Duration::from_secs;
    let cases: Vec<(u32, &str, u64, fn() -> Outcome)> = vec![
        (1, "PIC SE equals the all-pairs U-statistic", 10, c1_u_statistic),
        (2, "closed-form S_perp equals residualization", 5, c2_s_perp),
        (3, "linear family: beta_hat equals its linearization", 5, c3_linear_self_linearization),
        (4, "A_hat matches finite differences of the mean score", 5, c4_jacobian),
        (5, "pair PIC errors: mean square and expected maximum", 60, c5_pair_errors),
        (6, "chaos bound on the largest index error distance", 120, c6_chaos),
        (7, "assignment probabilities match enumeration", 10, c7_assignment_probs),
        (8, "propensity error bounds on random fine strata", 10, c8_msps),
        (9, "effect estimate equals fixed-effects OLS; root and slope", 10, c9_effect),
        (10, "optimal matching agrees with enumeration", 30, c10_matcher),
        (11, "every emitted pair satisfies its caliper rule", 60, c11_enforcement),
    ];
    let mut all = true;
    for (id, title, budget, f) in cases {
        let (o, t) = timed(f);
        all &= report(id, title, secs(budget), t, &o);
    }
    let t = Instant::now();
    let (c12, c13) = c12_13_rate();
    let elapsed = t.elapsed();
    all &= report(12, "maximal true-index gap decreases in n", secs(900), elapsed, &c12);
    all &= report(13, "effect error decreases in n", secs(600), elapsed, &c13);
    let (o, t) = timed(c14_determinism);
    all &= report(14, "verify --quick is byte-identical across runs", secs(600), t, &o);
    if !all {
        std::process::exit(1);
    }
}

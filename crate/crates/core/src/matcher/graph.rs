use nalgebra::DMatrix;
use rayon::prelude::*;
use serde::Serialize;

use crate::caliper::{CaliperPolicy, Verdict};
use crate::dataset::Sample;
use crate::error::Result;
use crate::index_model::IndexFit;
use crate::linalg;

/// A treated-control pair that passed the active eligibility rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Edge {
    pub treated: usize,
    pub control: usize,
    /// PIC `(x_t - x_c) beta_hat`.
    pub pic: f64,
    /// Index error distance `|(x_t - x_c) C^{1/2}|_2`.
    pub sed: f64,
    pub verdict: Verdict,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct ExclusionCounts {
    pub pic: usize,
    pub sed: usize,
    pub distance: usize,
    /// Pairs in different pre-existing strata, never evaluated.
    pub cross_stratum: usize,
}

impl ExclusionCounts {
    fn record(&mut self, v: Verdict) {
        match v {
            Verdict::Eligible => {}
            Verdict::IneligiblePic => self.pic += 1,
            Verdict::IneligibleSed => self.sed += 1,
            Verdict::IneligibleDistance => self.distance += 1,
        }
    }

    fn merge(mut self, o: ExclusionCounts) -> Self {
        self.pic += o.pic;
        self.sed += o.sed;
        self.distance += o.distance;
        self.cross_stratum += o.cross_stratum;
        self
    }
}

/// Eligible cross-arm pairs under a caliper policy.
#[derive(Debug, Clone)]
pub struct EligibilityGraph {
    pub n: usize,
    /// Row indices of treated units, ascending.
    pub treated: Vec<usize>,
    /// Row indices of control units, ascending.
    pub control: Vec<usize>,
    /// Eligible edges, sorted by (treated, control).
    pub edges: Vec<Edge>,
    pub exclusions: ExclusionCounts,
    /// Number of cross-arm, within-stratum pairs evaluated.
    pub evaluated: usize,
    pub policy: CaliperPolicy,
}

impl EligibilityGraph {
    pub fn n_treated(&self) -> usize {
        self.treated.len()
    }

    pub fn n_control(&self) -> usize {
        self.control.len()
    }
}

/// Evaluates every cross-arm pair (within pre-existing strata) against the
/// policy. Index error distances come from per-unit products `x_i C^{1/2}`.
pub fn build_graph(
    s: &Sample,
    fit: &IndexFit,
    c_hat: &DMatrix<f64>,
    policy: &CaliperPolicy,
) -> Result<EligibilityGraph> {
    s.require_both_arms()?;
    let n = s.n();
    let p = s.p();
    let x = s.x();
    let index = x * &fit.beta;
    let factor = x * linalg::sym_sqrt(c_hat);
    let treated: Vec<usize> = (0..n).filter(|&i| s.z()[i]).collect();
    let control: Vec<usize> = (0..n).filter(|&i| !s.z()[i]).collect();
    let with_diff = policy.needs_difference();

    let per_treated: Vec<(Vec<Edge>, ExclusionCounts, usize)> = treated
        .par_iter()
        .map(|&t| {
            let mut edges = Vec::new();
            let mut counts = ExclusionCounts::default();
            let mut evaluated = 0;
            let mut diff = vec![0.0; p];
            for &c in &control {
                if s.stratum_of(t) != s.stratum_of(c) {
                    counts.cross_stratum += 1;
                    continue;
                }
                evaluated += 1;
                let pic = index[t] - index[c];
                let mut q = 0.0;
                for j in 0..p {
                    let d = factor[(t, j)] - factor[(c, j)];
                    q += d * d;
                }
                let sed = q.sqrt();
                let verdict = if with_diff {
                    for j in 0..p {
                        diff[j] = x[(t, j)] - x[(c, j)];
                    }
                    policy.verdict_with_difference(pic, sed, &diff)
                } else {
                    policy.verdict(pic, sed)
                };
                if verdict.is_eligible() {
                    edges.push(Edge {
                        treated: t,
                        control: c,
                        pic,
                        sed,
                        verdict,
                    });
                } else {
                    counts.record(verdict);
                }
            }
            (edges, counts, evaluated)
        })
        .collect();

    let mut edges = Vec::new();
    let mut exclusions = ExclusionCounts::default();
    let mut evaluated = 0;
    for (e, c, k) in per_treated {
        edges.extend(e);
        exclusions = exclusions.merge(c);
        evaluated += k;
    }
    Ok(EligibilityGraph {
        n,
        treated,
        control,
        edges,
        exclusions,
        evaluated,
        policy: policy.clone(),
    })
}

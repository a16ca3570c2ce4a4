//! Fine stratification by matching within the eligibility graph.
//!
//! Pair matching is optimal: maximum cardinality first, then minimum total
//! `|PIC|` (or, on request, minimum largest `|PIC|`). Nearest-neighbor
//! matching with replacement gives each treated unit its closest eligible
//! control and merges shared controls into m:1 sets. Matches never cross
//! pre-existing strata because the graph never contains such edges.

pub mod assignment;
mod graph;

use std::collections::BTreeMap;
use std::io::Write;

use nalgebra::DVector;
use serde::{Deserialize, Serialize};

pub use graph::{build_graph, EligibilityGraph, Edge, ExclusionCounts};

use crate::caliper;
use crate::dataset::Sample;
use crate::error::Result;
use crate::index_model::IndexFit;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchMethod {
    /// Optimal pair matching without replacement.
    Optimal,
    /// 1-nearest-neighbor matching of treated units, controls reusable.
    Nearest,
}

impl std::str::FromStr for MatchMethod {
    type Err = crate::Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "optimal" | "pair" => Ok(MatchMethod::Optimal),
            "nn" | "nearest" => Ok(MatchMethod::Nearest),
            other => Err(crate::Error::invalid(
                "matcher",
                format!("unknown matching method `{other}`"),
            )),
        }
    }
}

/// Objective for optimal pair matching, applied after maximizing cardinality.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Objective {
    /// Minimize the sum of `|PIC|`.
    #[default]
    TotalCost,
    /// Minimize the largest `|PIC|`, then the sum among those.
    MaxCost,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchedPair {
    pub treated: usize,
    pub control: usize,
    pub pic: f64,
    pub sed: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MatchSummary {
    pub cardinality: usize,
    pub max_abs_pic: f64,
    pub mean_abs_pic: f64,
    pub max_sed: f64,
}

/// A fine stratification: matched pairs (or m:1 sets) plus unmatched units.
#[derive(Debug, Clone)]
pub struct MatchResult {
    pub method: MatchMethod,
    pub n: usize,
    /// Matched pairs ordered by treated row. Under nearest-neighbor matching
    /// a control may appear in several pairs.
    pub pairs: Vec<MatchedPair>,
    /// Units in no pair, ascending.
    pub singletons: Vec<usize>,
    pub summary: MatchSummary,
    pub exclusions: ExclusionCounts,
    pub eligible_edges: usize,
}

impl MatchResult {
    fn new(method: MatchMethod, g: &EligibilityGraph, mut pairs: Vec<MatchedPair>) -> Self {
        pairs.sort_by_key(|p| (p.treated, p.control));
        for p in &pairs {
            // every emitted pair must still satisfy the active rule
            assert!(
                g.policy.verdict(p.pic, p.sed).is_eligible(),
                "matched pair ({}, {}) violates the {:?} caliper",
                p.treated,
                p.control,
                g.policy.kind
            );
        }
        let mut used = vec![false; g.n];
        for p in &pairs {
            used[p.treated] = true;
            used[p.control] = true;
        }
        let singletons = (0..g.n).filter(|&i| !used[i]).collect();
        let k = pairs.len();
        let summary = MatchSummary {
            cardinality: k,
            max_abs_pic: pairs.iter().map(|p| p.pic.abs()).fold(0.0, f64::max),
            mean_abs_pic: if k == 0 {
                0.0
            } else {
                pairs.iter().map(|p| p.pic.abs()).sum::<f64>() / k as f64
            },
            max_sed: pairs.iter().map(|p| p.sed).fold(0.0, f64::max),
        };
        MatchResult {
            method,
            n: g.n,
            pairs,
            singletons,
            summary,
            exclusions: g.exclusions,
            eligible_edges: g.edges.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Matched sets of the fine stratification, singletons excluded. Pairs
    /// sharing a control are merged; each set lists the control first and
    /// then its treated units in ascending order.
    pub fn matched_sets(&self) -> Vec<Vec<usize>> {
        let mut by_control: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for p in &self.pairs {
            by_control.entry(p.control).or_default().push(p.treated);
        }
        by_control
            .into_iter()
            .map(|(c, mut ts)| {
                ts.sort_unstable();
                let mut set = vec![c];
                set.extend(ts);
                set
            })
            .collect()
    }

    /// All strata of the fine stratification, singletons included.
    pub fn strata(&self) -> Vec<Vec<usize>> {
        let mut out = self.matched_sets();
        out.extend(self.singletons.iter().map(|&i| vec![i]));
        out
    }

    /// Writes `pair_id,treated_row,control_row,pic,sed`, rows 0-based.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["pair_id", "treated_row", "control_row", "pic", "sed"])?;
        for (k, p) in self.pairs.iter().enumerate() {
            wtr.write_record([
                k.to_string(),
                p.treated.to_string(),
                p.control.to_string(),
                p.pic.to_string(),
                p.sed.to_string(),
            ])?;
        }
        wtr.flush()
            .map_err(|e| crate::Error::Output(e.to_string()))?;
        Ok(())
    }
}

/// Reads pairs written by [`MatchResult::write_csv`] as `(treated, control)`.
pub fn read_pairs_csv<R: std::io::Read>(r: R) -> Result<Vec<(usize, usize)>> {
    let mut rdr = csv::Reader::from_reader(r);
    let headers = rdr.headers()?.clone();
    let find = |name: &str| {
        headers.iter().position(|h| h == name).ok_or_else(|| {
            crate::Error::Schema(format!("match CSV lacks column `{name}`"))
        })
    };
    let (t, c) = (find("treated_row")?, find("control_row")?);
    let mut out = Vec::new();
    for (k, rec) in rdr.records().enumerate() {
        let rec = rec?;
        let parse = |col: usize, name: &str| {
            rec.get(col)
                .unwrap_or("")
                .trim()
                .parse::<usize>()
                .map_err(|_| crate::Error::Parse {
                    row: k + 1,
                    column: name.to_string(),
                    message: "expected a row index".into(),
                })
        };
        out.push((parse(t, "treated_row")?, parse(c, "control_row")?));
    }
    Ok(out)
}

/// Fine stratification from `(treated, control)` pairs over `n` units.
/// Pairs sharing a control form one set; units in no pair are singletons.
/// Fails if a treated unit appears twice, which would not be fine.
pub fn strata_from_pairs(n: usize, pairs: &[(usize, usize)], z: &[bool]) -> Result<Vec<Vec<usize>>> {
    let mut seen = vec![false; n];
    let mut by_control: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for &(t, c) in pairs {
        if t >= n || c >= n {
            return Err(crate::Error::invalid("matcher", format!("pair ({t}, {c}) out of range for n = {n}")));
        }
        if !z[t] || z[c] {
            return Err(crate::Error::invalid("matcher", format!("pair ({t}, {c}) is not treated-control")));
        }
        if seen[t] {
            return Err(crate::Error::invalid("matcher", format!("treated unit {t} matched twice")));
        }
        seen[t] = true;
        seen[c] = true;
        by_control.entry(c).or_default().push(t);
    }
    let mut out: Vec<Vec<usize>> = by_control
        .into_iter()
        .map(|(c, mut ts)| {
            ts.sort_unstable();
            let mut set = vec![c];
            set.extend(ts);
            set
        })
        .collect();
    out.extend((0..n).filter(|&i| !seen[i]).map(|i| vec![i]));
    Ok(out)
}

/// Optimal pair matching minimizing total `|PIC|` among maximum-cardinality
/// matchings.
pub fn pair_match_optimal(g: &EligibilityGraph) -> MatchResult {
    pair_match(g, Objective::TotalCost)
}

/// Optimal pair matching with the chosen objective. The smaller arm is the
/// focal group (treated on ties).
pub fn pair_match(g: &EligibilityGraph, objective: Objective) -> MatchResult {
    let treated_focal = g.n_treated() <= g.n_control();
    let (rows, cols) = if treated_focal {
        (&g.treated, &g.control)
    } else {
        (&g.control, &g.treated)
    };
    let mut row_pos = vec![usize::MAX; g.n];
    for (k, &r) in rows.iter().enumerate() {
        row_pos[r] = k;
    }
    let mut col_pos = vec![usize::MAX; g.n];
    for (k, &c) in cols.iter().enumerate() {
        col_pos[c] = k;
    }
    let mut adj: Vec<Vec<(usize, f64, usize)>> = vec![Vec::new(); rows.len()];
    for (e_idx, e) in g.edges.iter().enumerate() {
        let (r, c) = if treated_focal {
            (e.treated, e.control)
        } else {
            (e.control, e.treated)
        };
        adj[row_pos[r]].push((col_pos[c], e.pic.abs(), e_idx));
    }
    for list in &mut adj {
        list.sort_by_key(|&(c, _, _)| c);
    }

    let cap = match objective {
        Objective::TotalCost => f64::INFINITY,
        Objective::MaxCost => bottleneck(cols.len(), &adj),
    };
    let weighted: Vec<Vec<(usize, f64)>> = adj
        .iter()
        .map(|l| l.iter().filter(|e| e.1 <= cap).map(|&(c, w, _)| (c, w)).collect())
        .collect();
    let solution = assignment::max_cardinality_min_cost(cols.len(), &weighted);

    let pairs = solution
        .iter()
        .enumerate()
        .filter_map(|(r, c)| {
            let c = (*c)?;
            let &(_, _, e_idx) = adj[r].iter().find(|e| e.0 == c)?;
            let e = &g.edges[e_idx];
            Some(MatchedPair {
                treated: e.treated,
                control: e.control,
                pic: e.pic,
                sed: e.sed,
            })
        })
        .collect();
    MatchResult::new(MatchMethod::Optimal, g, pairs)
}

/// Smallest edge cost `t` such that edges with cost `<= t` still admit a
/// maximum-cardinality matching.
fn bottleneck(n_cols: usize, adj: &[Vec<(usize, f64, usize)>]) -> f64 {
    let plain = |t: f64| -> Vec<Vec<usize>> {
        adj.iter()
            .map(|l| l.iter().filter(|e| e.1 <= t).map(|e| e.0).collect())
            .collect()
    };
    let target = assignment::max_cardinality(n_cols, &plain(f64::INFINITY));
    let mut costs: Vec<f64> = adj.iter().flatten().map(|e| e.1).collect();
    if costs.is_empty() {
        return f64::INFINITY;
    }
    costs.sort_by(f64::total_cmp);
    costs.dedup();
    let (mut lo, mut hi) = (0usize, costs.len() - 1);
    while lo < hi {
        let mid = (lo + hi) / 2;
        if assignment::max_cardinality(n_cols, &plain(costs[mid])) == target {
            hi = mid;
        } else {
            lo = mid + 1;
        }
    }
    costs[lo]
}

/// Nearest-neighbor matching with replacement: each treated unit takes the
/// eligible control with smallest `|PIC|` (lowest control row on ties).
pub fn nn_match_replacement(g: &EligibilityGraph) -> MatchResult {
    let mut best: BTreeMap<usize, &Edge> = BTreeMap::new();
    for e in &g.edges {
        best.entry(e.treated)
            .and_modify(|b| {
                if e.pic.abs() < b.pic.abs() {
                    *b = e;
                }
            })
            .or_insert(e);
    }
    let pairs = best
        .values()
        .map(|e| MatchedPair {
            treated: e.treated,
            control: e.control,
            pic: e.pic,
            sed: e.sed,
        })
        .collect();
    MatchResult::new(MatchMethod::Nearest, g, pairs)
}

/// Runs the chosen matching method.
pub fn run_match(g: &EligibilityGraph, method: MatchMethod, objective: Objective) -> MatchResult {
    match method {
        MatchMethod::Optimal => pair_match(g, objective),
        MatchMethod::Nearest => nn_match_replacement(g),
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct MatchDiagnostics {
    pub empty: bool,
    pub method: MatchMethod,
    pub cardinality: usize,
    pub matched_sets: usize,
    pub singletons: usize,
    pub max_abs_pic: f64,
    pub mean_abs_pic: f64,
    pub max_sed: f64,
    pub exclusions: ExclusionCounts,
    pub eligible_edges: usize,
    /// `z*` evaluated at the number of eligible edges, for comparison with
    /// the `min(n0, n1)` multiplier.
    pub z_star_eligible: Option<f64>,
    /// Largest matched `|(x_i - x_j) beta_true|` (simulation only).
    pub max_true_gap: Option<f64>,
    /// Largest matched `|(x_i - x_j)(beta_hat - beta_true)|` (simulation only).
    pub max_pic_error: Option<f64>,
}

/// Summarizes a match; with `beta_true` also the true-index gaps and PIC
/// errors.
pub fn match_diagnostics(
    m: &MatchResult,
    s: &Sample,
    fit: &IndexFit,
    beta_true: Option<&DVector<f64>>,
) -> MatchDiagnostics {
    let (max_true_gap, max_pic_error) = match beta_true {
        Some(bt) => {
            let true_index = s.x() * bt;
            let err = &fit.beta - bt;
            let err_index = s.x() * err;
            let gap = m
                .pairs
                .iter()
                .map(|p| (true_index[p.treated] - true_index[p.control]).abs())
                .fold(0.0, f64::max);
            let pe = m
                .pairs
                .iter()
                .map(|p| (err_index[p.treated] - err_index[p.control]).abs())
                .fold(0.0, f64::max);
            (Some(gap), Some(pe))
        }
        None => (None, None),
    };
    MatchDiagnostics {
        empty: m.is_empty(),
        method: m.method,
        cardinality: m.summary.cardinality,
        matched_sets: m.matched_sets().len(),
        singletons: m.singletons.len(),
        max_abs_pic: m.summary.max_abs_pic,
        mean_abs_pic: m.summary.mean_abs_pic,
        max_sed: m.summary.max_sed,
        exclusions: m.exclusions,
        eligible_edges: m.eligible_edges,
        z_star_eligible: caliper::z_star(m.eligible_edges).ok(),
        max_true_gap,
        max_pic_error,
    }
}

#[cfg(test)]
mod tests;

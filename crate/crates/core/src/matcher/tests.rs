use super::*;
use crate::caliper::{CaliperPolicy, EuclideanCalipers, PolicyKind, Verdict};
use proptest::prelude::*;

fn open_policy(kind: PolicyKind, width: f64) -> CaliperPolicy {
    CaliperPolicy {
        kind,
        n0: 0,
        n1: 0,
        p: 2,
        m: 1,
        z_star: 1.0,
        multiplier: 1.0,
        picse: width,
        divisor: 1.0,
        nominal_sup: f64::INFINITY,
        hard_limit: f64::INFINITY,
        pic_width: width,
        rr_width: width,
        euclidean: EuclideanCalipers {
            global: f64::INFINITY,
            per_dim: vec![f64::INFINITY; 2],
        },
        degenerate_index: false,
        s_rank_ratio: 1.0,
    }
}

/// Graph over treated rows `0..nt` and control rows `nt..nt+nc` with the
/// given PIC values; `None` means no edge.
fn graph(nt: usize, nc: usize, pic: &[Option<f64>]) -> EligibilityGraph {
    let mut edges = Vec::new();
    for t in 0..nt {
        for c in 0..nc {
            if let Some(v) = pic[t * nc + c] {
                edges.push(Edge {
                    treated: t,
                    control: nt + c,
                    pic: v,
                    sed: 0.0,
                    verdict: Verdict::Eligible,
                });
            }
        }
    }
    EligibilityGraph {
        n: nt + nc,
        treated: (0..nt).collect(),
        control: (nt..nt + nc).collect(),
        edges,
        exclusions: ExclusionCounts::default(),
        evaluated: nt * nc,
        policy: open_policy(PolicyKind::None, f64::INFINITY),
    }
}

/// Exhaustive search over injective partial assignments: best
/// (cardinality, -cost) and best (cardinality, -max, -cost).
fn brute(nt: usize, nc: usize, pic: &[Option<f64>]) -> (usize, f64, f64) {
    fn rec(
        t: usize,
        nt: usize,
        nc: usize,
        pic: &[Option<f64>],
        used: &mut Vec<bool>,
        card: usize,
        cost: f64,
        mx: f64,
        best: &mut (usize, f64, usize, f64),
    ) {
        if t == nt {
            if card > best.0 || (card == best.0 && cost < best.1 - 1e-12) {
                best.0 = card;
                best.1 = cost;
            }
            if card > best.2 || (card == best.2 && mx < best.3) {
                best.2 = card;
                best.3 = mx;
            }
            return;
        }
        rec(t + 1, nt, nc, pic, used, card, cost, mx, best);
        for c in 0..nc {
            if let (false, Some(v)) = (used[c], pic[t * nc + c]) {
                used[c] = true;
                rec(t + 1, nt, nc, pic, used, card + 1, cost + v.abs(), mx.max(v.abs()), best);
                used[c] = false;
            }
        }
    }
    let mut best = (0, f64::INFINITY, 0, f64::INFINITY);
    rec(0, nt, nc, pic, &mut vec![false; nc], 0, 0.0, 0.0, &mut best);
    if best.0 == 0 {
        return (0, 0.0, 0.0);
    }
    (best.0, best.1, best.3)
}

fn cost(m: &MatchResult) -> f64 {
    m.pairs.iter().map(|p| p.pic.abs()).sum()
}

#[test]
fn pair_match_prefers_cheaper_total() {
    let g = graph(2, 2, &[Some(0.1), Some(0.2), Some(0.15), Some(0.9)]);
    let m = pair_match_optimal(&g);
    let got: Vec<_> = m.pairs.iter().map(|p| (p.treated, p.control)).collect();
    assert_eq!(got, vec![(0, 3), (1, 2)]);
    assert!((cost(&m) - 0.35).abs() < 1e-12);
    assert!(m.singletons.is_empty());
}

#[test]
fn larger_treated_arm_is_handled() {
    let g = graph(3, 1, &[Some(0.3), Some(-0.1), Some(0.2)]);
    let m = pair_match_optimal(&g);
    assert_eq!(m.pairs.len(), 1);
    assert_eq!((m.pairs[0].treated, m.pairs[0].control), (1, 3));
    assert_eq!(m.singletons, vec![0, 2]);
}

#[test]
fn max_objective_trades_total_for_bottleneck() {
    // total optimum {0.0, 1.0}; bottleneck optimum {0.6, 0.6}
    let g = graph(2, 2, &[Some(0.0), Some(0.6), Some(0.6), Some(1.0)]);
    assert!((cost(&pair_match(&g, Objective::TotalCost)) - 1.0).abs() < 1e-12);
    let m = pair_match(&g, Objective::MaxCost);
    assert!((m.summary.max_abs_pic - 0.6).abs() < 1e-12);
}

#[test]
fn nearest_neighbor_shares_controls() {
    let g = graph(3, 2, &[Some(0.1), Some(0.5), Some(-0.05), Some(0.4), None, Some(0.3)]);
    let m = nn_match_replacement(&g);
    let got: Vec<_> = m.pairs.iter().map(|p| (p.treated, p.control)).collect();
    assert_eq!(got, vec![(0, 3), (1, 3), (2, 4)]);
    assert_eq!(m.matched_sets(), vec![vec![3, 0, 1], vec![4, 2]]);
    assert!(m.singletons.is_empty());
}

#[test]
fn empty_graph_gives_empty_match() {
    let g = graph(2, 2, &[None; 4]);
    let m = pair_match_optimal(&g);
    assert!(m.is_empty());
    assert_eq!(m.strata().len(), 4);
}

#[test]
#[should_panic(expected = "violates")]
fn post_hoc_check_catches_bad_pair() {
    let mut g = graph(1, 1, &[Some(0.5)]);
    g.policy = open_policy(PolicyKind::PicseFixed, 0.1);
    pair_match_optimal(&g);
}

#[test]
fn csv_round_trip() {
    let g = graph(2, 2, &[Some(0.1), None, None, Some(0.2)]);
    let m = pair_match_optimal(&g);
    let mut buf = Vec::new();
    m.write_csv(&mut buf).unwrap();
    let text = String::from_utf8(buf.clone()).unwrap();
    assert!(text.starts_with("pair_id,treated_row,control_row,pic,sed\n"));
    assert_eq!(read_pairs_csv(&buf[..]).unwrap(), vec![(0, 2), (1, 3)]);
}

fn graph_strategy() -> impl Strategy<Value = (usize, usize, Vec<Option<f64>>)> {
    (1usize..=6, 1usize..=6).prop_flat_map(|(nt, nc)| {
        let cell = prop_oneof![
            1 => Just(None),
            2 => (-50i32..=50).prop_map(|k| Some(k as f64 / 10.0)),
        ];
        (Just(nt), Just(nc), proptest::collection::vec(cell, nt * nc))
    })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(300))]

    #[test]
    fn optimal_matches_brute_force((nt, nc, pic) in graph_strategy()) {
        let g = graph(nt, nc, &pic);
        let (card, total, bottleneck) = brute(nt, nc, &pic);
        let m = pair_match(&g, Objective::TotalCost);
        prop_assert_eq!(m.pairs.len(), card);
        prop_assert!((cost(&m) - total).abs() < 1e-9, "{} vs {}", cost(&m), total);
        let mm = pair_match(&g, Objective::MaxCost);
        prop_assert_eq!(mm.pairs.len(), card);
        prop_assert!((mm.summary.max_abs_pic - bottleneck).abs() < 1e-12);
        // no unit used twice
        let mut seen = vec![false; g.n];
        for p in &m.pairs {
            prop_assert!(!seen[p.treated] && !seen[p.control]);
            seen[p.treated] = true;
            seen[p.control] = true;
        }
    }
}

#[test]
fn strata_from_pairs_groups_by_control() {
    let z = [true, true, false, false, true];
    let s = strata_from_pairs(5, &[(0, 2), (1, 2)], &z).unwrap();
    assert_eq!(s, vec![vec![2, 0, 1], vec![3], vec![4]]);
    assert!(strata_from_pairs(5, &[(0, 2), (0, 3)], &z).is_err());
    assert!(strata_from_pairs(5, &[(2, 0)], &z).is_err());
}

//! Sparse rectangular assignment: maximum cardinality first, then minimum
//! total cost.
//!
//! Every row gets a private dummy column whose cost is one "unmatched" unit.
//! Costs are compared lexicographically as `(unmatched, length)`, which is
//! the large-offset formulation with the offset kept exact. Rows are
//! augmented one at a time by Dijkstra over reduced costs with early
//! termination (the sparse Hungarian scheme), so after each row the partial
//! assignment is optimal for the rows seen so far.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::ops::{Add, Sub};

#[derive(Debug, Clone, Copy, PartialEq)]
struct Cost {
    unmatched: i64,
    length: f64,
}

impl Cost {
    const ZERO: Cost = Cost {
        unmatched: 0,
        length: 0.0,
    };
    const INF: Cost = Cost {
        unmatched: i64::MAX / 4,
        length: f64::INFINITY,
    };
}

impl Add for Cost {
    type Output = Cost;
    fn add(self, o: Cost) -> Cost {
        Cost {
            unmatched: self.unmatched + o.unmatched,
            length: self.length + o.length,
        }
    }
}

impl Sub for Cost {
    type Output = Cost;
    fn sub(self, o: Cost) -> Cost {
        Cost {
            unmatched: self.unmatched - o.unmatched,
            length: self.length - o.length,
        }
    }
}

impl Eq for Cost {}

impl Ord for Cost {
    fn cmp(&self, o: &Self) -> Ordering {
        self.unmatched
            .cmp(&o.unmatched)
            .then_with(|| self.length.total_cmp(&o.length))
    }
}

impl PartialOrd for Cost {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}

const NONE: usize = usize::MAX;

/// Solves the assignment for `adj[r] = [(column, cost), ...]` with
/// nonnegative costs. Returns the column matched to each row, if any.
///
/// Among all matchings of maximum cardinality the result has minimum total
/// cost. Ties are resolved deterministically by row order and then by the
/// lowest column index.
pub fn max_cardinality_min_cost(n_cols: usize, adj: &[Vec<(usize, f64)>]) -> Vec<Option<usize>> {
    let n_rows = adj.len();
    let total_cols = n_cols + n_rows;
    let dummy_cost = Cost {
        unmatched: 1,
        length: 0.0,
    };
    let edges = |r: usize| {
        adj[r]
            .iter()
            .map(|&(c, w)| {
                debug_assert!(c < n_cols && w >= 0.0);
                (
                    c,
                    Cost {
                        unmatched: 0,
                        length: w,
                    },
                )
            })
            .chain(std::iter::once((n_cols + r, dummy_cost)))
    };

    let mut u = vec![Cost::ZERO; n_rows];
    let mut v = vec![Cost::ZERO; total_cols];
    let mut row_match = vec![NONE; n_rows];
    let mut col_match = vec![NONE; total_cols];

    let mut dist = vec![Cost::INF; total_cols];
    let mut prev = vec![NONE; total_cols];
    let mut done = vec![false; total_cols];
    let mut touched: Vec<usize> = Vec::new();
    let mut finalized: Vec<usize> = Vec::new();
    let mut heap: BinaryHeap<Reverse<(Cost, usize)>> = BinaryHeap::new();

    for s in 0..n_rows {
        for &c in &touched {
            dist[c] = Cost::INF;
            prev[c] = NONE;
            done[c] = false;
        }
        touched.clear();
        finalized.clear();
        heap.clear();

        for (c, w) in edges(s) {
            let d = w - u[s] - v[c];
            if d < dist[c] {
                if dist[c] == Cost::INF {
                    touched.push(c);
                }
                dist[c] = d;
                prev[c] = s;
                heap.push(Reverse((d, c)));
            }
        }

        let target = loop {
            let Reverse((d, c)) = heap
                .pop()
                .expect("dummy column keeps every row augmentable");
            if done[c] || d > dist[c] {
                continue;
            }
            done[c] = true;
            if col_match[c] == NONE {
                break c;
            }
            finalized.push(c);
            let r = col_match[c];
            for (c2, w) in edges(r) {
                if done[c2] {
                    continue;
                }
                let nd = d + (w - u[r] - v[c2]);
                if nd < dist[c2] {
                    if dist[c2] == Cost::INF {
                        touched.push(c2);
                    }
                    dist[c2] = nd;
                    prev[c2] = r;
                    heap.push(Reverse((nd, c2)));
                }
            }
        };

        let big_d = dist[target];
        u[s] = u[s] + big_d;
        for &c in &finalized {
            let delta = big_d - dist[c];
            v[c] = v[c] - delta;
            let r = col_match[c];
            u[r] = u[r] + delta;
        }

        let mut c = target;
        loop {
            let r = prev[c];
            let next = row_match[r];
            row_match[r] = c;
            col_match[c] = r;
            if r == s {
                break;
            }
            c = next;
        }
    }

    row_match
        .into_iter()
        .map(|c| (c < n_cols).then_some(c))
        .collect()
}

/// Maximum bipartite matching size (Hopcroft-Karp).
pub fn max_cardinality(n_cols: usize, adj: &[Vec<usize>]) -> usize {
    let n_rows = adj.len();
    let mut row_match = vec![NONE; n_rows];
    let mut col_match = vec![NONE; n_cols];
    let mut layer = vec![0usize; n_rows];
    let mut size = 0;
    loop {
        // BFS from free rows
        let mut queue = std::collections::VecDeque::new();
        let mut found = false;
        for r in 0..n_rows {
            if row_match[r] == NONE {
                layer[r] = 0;
                queue.push_back(r);
            } else {
                layer[r] = usize::MAX;
            }
        }
        while let Some(r) = queue.pop_front() {
            for &c in &adj[r] {
                let r2 = col_match[c];
                if r2 == NONE {
                    found = true;
                } else if layer[r2] == usize::MAX {
                    layer[r2] = layer[r] + 1;
                    queue.push_back(r2);
                }
            }
        }
        if !found {
            return size;
        }
        let mut iter = vec![0usize; n_rows];
        for r in 0..n_rows {
            if row_match[r] == NONE
                && augment(r, adj, &mut row_match, &mut col_match, &mut layer, &mut iter)
            {
                size += 1;
            }
        }
    }
}

fn augment(
    r: usize,
    adj: &[Vec<usize>],
    row_match: &mut [usize],
    col_match: &mut [usize],
    layer: &mut [usize],
    iter: &mut [usize],
) -> bool {
    // iterative DFS along the BFS layering
    let mut stack = vec![r];
    let mut path_cols: Vec<usize> = Vec::new();
    while let Some(&top) = stack.last() {
        if iter[top] < adj[top].len() {
            let c = adj[top][iter[top]];
            iter[top] += 1;
            let r2 = col_match[c];
            if r2 == NONE {
                path_cols.push(c);
                // flip the alternating path
                for (row, col) in stack.iter().zip(path_cols.iter()) {
                    row_match[*row] = *col;
                    col_match[*col] = *row;
                }
                return true;
            }
            if layer[r2] == layer[top] + 1 {
                stack.push(r2);
                path_cols.push(c);
            }
        } else {
            layer[top] = usize::MAX;
            stack.pop();
            path_cols.pop();
        }
    }
    false
}

//! Minimum-cost bipartite assignment with a deterministic tie-break.
//!
//! Rows are predictions, columns are ground truths. Rectangular problems are
//! padded to square with zero-cost dummy entries; every completion uses the
//! same number of dummy pairs, so real-pair cost is still minimized. Among
//! all minimum-cost assignments the result is canonicalized so the column
//! sequence read off in row order is lexicographically smallest (an
//! unmatched row sorts after every real column).

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A minimum-cost matching: `pairs` holds (row, column) sorted by row,
/// `unmatched_rows` the rows left unpaired when rows outnumber columns.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Assignment {
    pub pairs: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
}

impl Assignment {
    /// Total cost of the matched pairs under `cost`.
    pub fn total_cost(&self, cost: &Tensor) -> f64 {
        self.pairs.iter().map(|&(r, c)| cost.at2(r, c)).sum()
    }
}

/// Solve a square problem given as a closure over (row, col); returns the
/// column assigned to each row. Standard shortest-augmenting-path method
/// with dual potentials, O(n^3).
fn solve_square(n: usize, cost: impl Fn(usize, usize) -> f64) -> Vec<usize> {
    // 1-indexed internals; p[j] = row matched to column j, 0 = free
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut p = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost(i0 - 1, j - 1) - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[p[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if p[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            p[j0] = p[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if p[j] != 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

/// Minimum total cost of a square problem over the given live rows/columns.
fn min_cost(rows: &[usize], cols: &[usize], cost: &impl Fn(usize, usize) -> f64) -> f64 {
    let n = rows.len();
    assert_eq!(n, cols.len());
    if n == 0 {
        return 0.0;
    }
    let assign = solve_square(n, |r, c| cost(rows[r], cols[c]));
    (0..n).map(|r| cost(rows[r], cols[assign[r]])).sum::<f64>()
}

/// Minimum-cost assignment of rows (predictions) to columns (ground truths).
/// Deterministic: among optimal assignments, each row in order takes the
/// lowest-index column that still permits an optimal completion.
pub fn hungarian_match(cost: &Tensor) -> Result<Assignment> {
    if cost.shape.len() != 2 {
        return Err(Error::dim_mismatch(
            "hungarian_match",
            "2-D cost matrix",
            format!("{:?}", cost.shape),
        ));
    }
    if !cost.all_finite() {
        return Err(Error::NonFinite("hungarian_match cost"));
    }
    let (r, c) = (cost.shape[0], cost.shape[1]);
    if r == 0 || c == 0 {
        return Ok(Assignment {
            pairs: Vec::new(),
            unmatched_rows: (0..r).collect(),
        });
    }
    let n = r.max(c);
    // padded cost: dummy rows/columns are zero for every partner
    let padded = |i: usize, j: usize| -> f64 {
        if i < r && j < c {
            cost.at2(i, j)
        } else {
            0.0
        }
    };

    let all: Vec<usize> = (0..n).collect();
    let optimum = min_cost(&all, &all, &padded);
    let tol = 1e-9 * optimum.abs().max(1.0);

    // lexicographic refinement: fix rows in order to the smallest column
    // that keeps the total at the optimum. All dummy columns are
    // interchangeable, so only the first remaining one is ever tried.
    let mut free_cols: Vec<usize> = (0..n).collect();
    let mut remaining_rows: Vec<usize> = (1..n).collect();
    let mut fixed_cost = 0.0;
    let mut pairs = Vec::new();
    let mut unmatched_rows = Vec::new();
    for i in 0..n {
        let mut chosen = None;
        let mut dummy_tried = false;
        for (slot, &j) in free_cols.iter().enumerate() {
            if j >= c {
                if dummy_tried {
                    continue;
                }
                dummy_tried = true;
            }
            let rest_cols: Vec<usize> = free_cols
                .iter()
                .enumerate()
                .filter(|&(s, _)| s != slot)
                .map(|(_, &cc)| cc)
                .collect();
            let total = fixed_cost + padded(i, j) + min_cost(&remaining_rows, &rest_cols, &padded);
            if (total - optimum).abs() <= tol {
                chosen = Some((slot, j));
                break;
            }
        }
        let (slot, j) = chosen.expect("padded problem always admits an optimal completion");
        fixed_cost += padded(i, j);
        free_cols.remove(slot);
        remaining_rows.retain(|&x| x != i + 1);
        if i < r {
            if j < c {
                pairs.push((i, j));
            } else {
                unmatched_rows.push(i);
            }
        }
    }
    Ok(Assignment {
        pairs,
        unmatched_rows,
    })
}

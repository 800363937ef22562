//! Exact square linear assignment.
//!
//! [`solve_lap`] is a shortest-augmenting-path solver with row/column
//! potentials (the Jonker-Volgenant family, O(n³) worst case). Rows are added
//! one at a time; each addition runs a Dijkstra-style search over reduced
//! costs until it reaches a free column, then augments along the path.
//!
//! [`brute_force_lap`] enumerates all permutations and exists to check the
//! solver on small instances.

use std::cell::Cell;

use ndarray::{Array2, ArrayView2};

use crate::{Error, Result};

/// Largest instance [`brute_force_lap`] accepts (10! permutations).
pub const BRUTE_FORCE_LIMIT: usize = 10;

const NONE: usize = usize::MAX;

thread_local! {
    static SOLVE_CALLS: Cell<u64> = const { Cell::new(0) };
}

/// Number of [`solve_lap`] calls made so far on the current thread.
pub fn solve_calls() -> u64 {
    SOLVE_CALLS.with(Cell::get)
}

/// Square matrix of finite, nonnegative costs.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    costs: Array2<f64>,
}

impl CostMatrix {
    pub fn new(costs: Array2<f64>) -> Result<Self> {
        let (rows, cols) = costs.dim();
        if rows != cols {
            return Err(Error::dim(format!("cost matrix is {rows}x{cols}, not square")));
        }
        if rows == 0 {
            return Err(Error::dim("cost matrix is empty"));
        }
        if let Some(((row, col), &value)) = costs
            .indexed_iter()
            .find(|(_, v)| !v.is_finite() || **v < 0.0)
        {
            return Err(Error::InvalidCost { row, col, value });
        }
        let costs = if costs.is_standard_layout() {
            costs
        } else {
            costs.as_standard_layout().into_owned()
        };
        Ok(Self { costs })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if let Some((i, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != n) {
            return Err(Error::dim(format!(
                "row {i} has {} entries in a {n}-row cost matrix",
                r.len()
            )));
        }
        let flat = rows.iter().flatten().copied().collect();
        Self::new(Array2::from_shape_vec((n, n), flat).map_err(|e| Error::dim(e.to_string()))?)
    }

    pub fn n(&self) -> usize {
        self.costs.nrows()
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.costs[[row, col]]
    }

    pub fn view(&self) -> ArrayView2<'_, f64> {
        self.costs.view()
    }

    pub fn into_inner(self) -> Array2<f64> {
        self.costs
    }

    fn as_slice(&self) -> &[f64] {
        self.costs.as_slice().expect("standard layout")
    }

    /// Sum of `costs[i][perm[i]]`, accumulated in row order.
    pub fn total(&self, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .fold(0.0, |acc, (i, &j)| acc + self.costs[[i, j]])
    }
}

/// `perm[i]` is the column assigned to row `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub perm: Vec<usize>,
    pub total_cost: f64,
}

impl Assignment {
    pub fn identity(cost: &CostMatrix) -> Self {
        let perm: Vec<usize> = (0..cost.n()).collect();
        let total_cost = cost.total(&perm);
        Self { perm, total_cost }
    }

    pub fn is_bijection(&self) -> bool {
        is_permutation(&self.perm)
    }
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    perm.iter().all(|&p| p < seen.len() && !std::mem::replace(&mut seen[p], true))
}

/// Minimum-cost bijection between rows and columns.
///
/// Ties in the shortest-path search go to the lowest column index, so the
/// output is a deterministic function of the input.
pub fn solve_lap(cost: &CostMatrix) -> Assignment {
    SOLVE_CALLS.with(|c| c.set(c.get() + 1));

    let n = cost.n();
    let c = cost.as_slice();

    let mut u = vec![0.0f64; n];
    let mut v = vec![0.0f64; n];
    let mut col_for_row = vec![NONE; n];
    let mut row_for_col = vec![NONE; n];

    let mut path = vec![NONE; n];
    let mut shortest = vec![f64::INFINITY; n];
    // Unvisited columns in increasing order, so the scan order (and with it
    // every tie) is the same as a plain 0..n sweep.
    let mut remaining: Vec<usize> = Vec::with_capacity(n);
    let mut seen_rows: Vec<usize> = Vec::with_capacity(n);
    let mut seen_cols: Vec<usize> = Vec::with_capacity(n);

    for start in 0..n {
        shortest.fill(f64::INFINITY);
        remaining.clear();
        remaining.extend(0..n);
        seen_rows.clear();
        seen_cols.clear();

        let mut min_val = 0.0f64;
        let mut row = start;
        let sink = loop {
            seen_rows.push(row);

            let base = min_val - u[row];
            let cost_row = &c[row * n..(row + 1) * n];
            let mut lowest = f64::INFINITY;
            let mut at = NONE;
            for (k, &col) in remaining.iter().enumerate() {
                let reduced = base + cost_row[col] - v[col];
                let mut s = shortest[col];
                if reduced < s {
                    path[col] = row;
                    s = reduced;
                    shortest[col] = s;
                }
                if s < lowest {
                    lowest = s;
                    at = k;
                }
            }
            // Costs are finite and every row has an unseen column left.
            debug_assert!(at != NONE);
            let next = remaining.remove(at);

            min_val = lowest;
            seen_cols.push(next);
            if row_for_col[next] == NONE {
                break next;
            }
            row = row_for_col[next];
        };

        u[start] += min_val;
        for &r in &seen_rows {
            if r != start {
                u[r] += min_val - shortest[col_for_row[r]];
            }
        }
        for &col in &seen_cols {
            v[col] -= min_val - shortest[col];
        }

        let mut col = sink;
        loop {
            let r = path[col];
            row_for_col[col] = r;
            let prev = std::mem::replace(&mut col_for_row[r], col);
            if r == start {
                break;
            }
            col = prev;
        }
    }

    let total_cost = cost.total(&col_for_row);
    Assignment {
        perm: col_for_row,
        total_cost,
    }
}

/// Exhaustive minimizer over all `n!` permutations, `n ≤ 10`.
///
/// Permutations are visited in lexicographic order and only strict
/// improvements replace the incumbent, so among tied optima the
/// lexicographically smallest permutation wins. Partial sums are built in
/// row order, matching [`CostMatrix::total`] bit for bit.
pub fn brute_force_lap(cost: &CostMatrix) -> Result<Assignment> {
    let n = cost.n();
    if n > BRUTE_FORCE_LIMIT {
        return Err(Error::SizeLimit {
            size: n,
            limit: BRUTE_FORCE_LIMIT,
        });
    }

    struct Search<'a> {
        c: &'a [f64],
        n: usize,
        used: Vec<bool>,
        current: Vec<usize>,
        best: Vec<usize>,
        best_cost: f64,
    }

    impl Search<'_> {
        fn descend(&mut self, row: usize, partial: f64) {
            if row == self.n {
                if partial < self.best_cost {
                    self.best_cost = partial;
                    self.best.clone_from(&self.current);
                }
                return;
            }
            for col in 0..self.n {
                if self.used[col] {
                    continue;
                }
                self.used[col] = true;
                self.current[row] = col;
                self.descend(row + 1, partial + self.c[row * self.n + col]);
                self.used[col] = false;
            }
        }
    }

    let mut search = Search {
        c: cost.as_slice(),
        n,
        used: vec![false; n],
        current: vec![0; n],
        best: (0..n).collect(),
        best_cost: f64::INFINITY,
    };
    search.descend(0, 0.0);
    Ok(Assignment {
        total_cost: search.best_cost,
        perm: search.best,
    })
}

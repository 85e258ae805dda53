//! Gated minimum-cost bipartite assignment.
//!
//! Entries above the gate (or marked [`INFEASIBLE`]) can never be matched. Among
//! the remaining entries the solver minimizes `sum(cost - gate)` over the
//! chosen pairs, i.e. every match must pay for itself against leaving both
//! sides unmatched at the gate value. Internally the problem is embedded in a
//! square `(rows + cols)` matrix with zero-cost "unmatched" slots and solved
//! with the shortest-augmenting-path Hungarian method.

use thiserror::Error;

/// Marker for entries that may never be matched.
pub const INFEASIBLE: f64 = f64::INFINITY;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AssignmentError {
    #[error("cost matrix expects {expected} values, got {got}")]
    Shape { expected: usize, got: usize },
    #[error("cost ({row}, {col}) is {value}; only finite values or INFEASIBLE are allowed")]
    BadValue { row: usize, col: usize, value: f64 },
}

/// Row-major `rows x cols` cost matrix (tracks x detections).
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    values: Vec<f64>,
}

impl CostMatrix {
    pub fn new(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self, AssignmentError> {
        if values.len() != rows * cols {
            return Err(AssignmentError::Shape {
                expected: rows * cols,
                got: values.len(),
            });
        }
        for (k, &value) in values.iter().enumerate() {
            if value.is_nan() || value == f64::NEG_INFINITY {
                return Err(AssignmentError::BadValue {
                    row: k / cols.max(1),
                    col: k % cols.max(1),
                    value,
                });
            }
        }
        Ok(Self { rows, cols, values })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut values = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                values.push(if v.is_nan() { INFEASIBLE } else { v });
            }
        }
        Self { rows, cols, values }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.values[row * self.cols + col]
    }

    pub fn set(&mut self, row: usize, col: usize, value: f64) {
        self.values[row * self.cols + col] = value;
    }

    pub fn is_feasible(&self, row: usize, col: usize, gate: f64) -> bool {
        let v = self.get(row, col);
        v.is_finite() && v <= gate
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Assignment {
    /// `(row, col)` pairs sorted by row.
    pub matches: Vec<(usize, usize)>,
    pub unmatched_rows: Vec<usize>,
    pub unmatched_cols: Vec<usize>,
}

impl Assignment {
    pub fn total_cost(&self, m: &CostMatrix) -> f64 {
        self.matches.iter().map(|&(i, j)| m.get(i, j)).sum()
    }

    fn from_matches(rows: usize, cols: usize, mut matches: Vec<(usize, usize)>) -> Self {
        matches.sort_unstable();
        let mut row_used = vec![false; rows];
        let mut col_used = vec![false; cols];
        for &(i, j) in &matches {
            row_used[i] = true;
            col_used[j] = true;
        }
        Self {
            matches,
            unmatched_rows: (0..rows).filter(|&i| !row_used[i]).collect(),
            unmatched_cols: (0..cols).filter(|&j| !col_used[j]).collect(),
        }
    }
}

/// Solves the gated assignment. An empty matrix yields an all-unmatched result.
pub fn solve(m: &CostMatrix, gate: f64) -> Assignment {
    let (rows, cols) = (m.rows, m.cols);
    let mut slack_total = 0.0;
    let mut any_feasible = false;
    for i in 0..rows {
        for j in 0..cols {
            if m.is_feasible(i, j, gate) {
                any_feasible = true;
                slack_total += (m.get(i, j) - gate).abs();
            }
        }
    }
    if !any_feasible {
        return Assignment::from_matches(rows, cols, Vec::new());
    }

    // Any assignment using a blocked cell costs more than the all-unmatched one.
    let blocked = 1.0 + slack_total;
    let n = rows + cols;
    let mut ext = vec![0.0; n * n];
    for i in 0..rows {
        for j in 0..cols {
            ext[i * n + j] = if m.is_feasible(i, j, gate) {
                m.get(i, j) - gate
            } else {
                blocked
            };
        }
    }

    let row_to_col = hungarian(n, &ext);
    let matches = row_to_col
        .iter()
        .enumerate()
        .take(rows)
        .filter(|&(i, &j)| j < cols && m.is_feasible(i, j, gate))
        .map(|(i, &j)| (i, j))
        .collect();
    Assignment::from_matches(rows, cols, matches)
}

/// Square Hungarian method with potentials, O(n^3). Returns the column
/// assigned to each row. Rows are inserted in index order and columns scanned
/// in index order with strict comparisons, so ties resolve deterministically.
fn hungarian(n: usize, cost: &[f64]) -> Vec<usize> {
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    // p[j]: row (1-based) assigned to column j; way[j]: previous column on the path.
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
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[(i0 - 1) * n + (j - 1)] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
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
        if p[j] > 0 {
            row_to_col[p[j] - 1] = j - 1;
        }
    }
    row_to_col
}

//! Rectangular linear assignment (Hungarian algorithm with potentials).
//!
//! Rows are assigned injectively to columns (`rows <= cols`) at minimum
//! total cost. Among optimal assignments the lexicographically smallest
//! row-to-column vector is returned, so equal-cost ties resolve the same way
//! on every platform.

use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum AssignmentError {
    #[error("cost matrix is empty")]
    Empty,
    #[error("cost matrix has {rows} rows but only {cols} columns")]
    TooManyRows { rows: usize, cols: usize },
    #[error("cost matrix rows have different lengths")]
    Ragged,
    #[error("cost matrix entry ({row}, {col}) is not finite")]
    NonFinite { row: usize, col: usize },
}

/// Dense row-major cost matrix with finite entries.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, AssignmentError> {
        let cols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != cols) {
            return Err(AssignmentError::Ragged);
        }
        Self::from_fn(rows.len(), cols, |i, j| rows[i][j])
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Result<Self, AssignmentError> {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                let v = f(i, j);
                if !v.is_finite() {
                    return Err(AssignmentError::NonFinite { row: i, col: j });
                }
                data.push(v);
            }
        }
        Ok(Self { rows, cols, data })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn get(&self, row: usize, col: usize) -> f64 {
        self.data[row * self.cols + col]
    }

    pub fn transpose(&self) -> CostMatrix {
        CostMatrix {
            rows: self.cols,
            cols: self.rows,
            data: (0..self.cols)
                .flat_map(|j| (0..self.rows).map(move |i| (i, j)))
                .map(|(i, j)| self.get(i, j))
                .collect(),
        }
    }

    /// Total cost of `row_to_col`, summed in row order.
    pub fn cost_of(&self, row_to_col: &[usize]) -> f64 {
        row_to_col.iter().enumerate().map(|(i, &j)| self.get(i, j)).sum()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assignment {
    pub row_to_col: Vec<usize>,
    pub cost: f64,
}

pub fn hungarian(costs: &CostMatrix) -> Result<Assignment, AssignmentError> {
    let (n, m) = (costs.rows, costs.cols);
    if n == 0 || m == 0 {
        return Err(AssignmentError::Empty);
    }
    if n > m {
        return Err(AssignmentError::TooManyRows { rows: n, cols: m });
    }
    // Square problem: rows n..m are zero-cost dummies.
    let cost = |i: usize, j: usize| if i < n { costs.get(i, j) } else { 0.0 };
    let (u, v, mut row_of_col) = solve_square(m, cost);

    let scale = costs.data.iter().fold(1.0f64, |a, &c| a.max(c.abs()));
    let eps = 1e-10 * scale;
    let tight = |i: usize, j: usize| cost(i, j) - u[i] - v[j] <= eps;

    let mut col_of_row = vec![0usize; m];
    for (j, &i) in row_of_col.iter().enumerate() {
        col_of_row[i] = j;
    }
    lexicographic_refine(n, m, &tight, &mut row_of_col, &mut col_of_row);

    let row_to_col = col_of_row[..n].to_vec();
    let total = costs.cost_of(&row_to_col);
    Ok(Assignment {
        row_to_col,
        cost: total,
    })
}

/// Shortest augmenting path Hungarian on an `m x m` matrix. Returns row
/// potentials, column potentials and the row matched to each column.
fn solve_square(m: usize, cost: impl Fn(usize, usize) -> f64) -> (Vec<f64>, Vec<f64>, Vec<usize>) {
    // 1-based with a virtual column 0, following the classic formulation
    let mut u = vec![0.0f64; m + 1];
    let mut v = vec![0.0f64; m + 1];
    let mut p = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=m {
        p[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = p[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
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
            for j in 0..=m {
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
    let row_of_col = (1..=m).map(|j| p[j] - 1).collect();
    (u[1..].to_vec(), v[1..].to_vec(), row_of_col)
}

/// Rewrites a perfect matching on the tight-edge graph into the one whose
/// first `n` rows take the lexicographically smallest columns. Every
/// optimal assignment uses only tight edges, so the result stays optimal.
fn lexicographic_refine(
    n: usize,
    m: usize,
    tight: &impl Fn(usize, usize) -> bool,
    row_of_col: &mut [usize],
    col_of_row: &mut [usize],
) {
    let mut fixed_col = vec![false; m];
    for i in 0..n {
        for j in 0..m {
            if fixed_col[j] || !tight(i, j) {
                continue;
            }
            if col_of_row[i] == j {
                fixed_col[j] = true;
                break;
            }
            // Row i takes column j; the current owner of j must reach the
            // column i releases through an alternating path of tight edges.
            let search = PathSearch {
                target: col_of_row[i],
                tight,
                fixed_col: &fixed_col,
                row_of_col,
            };
            let mut visited = vec![false; m];
            visited[j] = true;
            let mut path = Vec::new();
            if search.run(row_of_col[j], &mut visited, &mut path) {
                // path holds (row, new column) pairs
                for &(r, c) in &path {
                    col_of_row[r] = c;
                    row_of_col[c] = r;
                }
                col_of_row[i] = j;
                row_of_col[j] = i;
                fixed_col[j] = true;
                break;
            }
        }
    }
}

struct PathSearch<'a, F> {
    target: usize,
    tight: &'a F,
    fixed_col: &'a [bool],
    row_of_col: &'a [usize],
}

impl<F: Fn(usize, usize) -> bool> PathSearch<'_, F> {
    fn run(&self, row: usize, visited: &mut [bool], path: &mut Vec<(usize, usize)>) -> bool {
        for c in 0..visited.len() {
            if visited[c] || self.fixed_col[c] || !(self.tight)(row, c) {
                continue;
            }
            visited[c] = true;
            if c == self.target || self.run(self.row_of_col[c], visited, path) {
                path.push((row, c));
                return true;
            }
        }
        false
    }
}

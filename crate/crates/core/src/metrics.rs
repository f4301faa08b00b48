//! GOSPA scoring and Monte Carlo aggregation.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GospaConfig {
    pub p: f64,
    pub c: f64,
    pub alpha: f64,
}

impl Default for GospaConfig {
    fn default() -> Self {
        Self {
            p: 1.0,
            c: 50.0,
            alpha: 2.0,
        }
    }
}

impl GospaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.p >= 1.0 && self.p.is_finite()) {
            return Err(Error::config("gospa.p", "must be a finite value >= 1"));
        }
        if !(self.c > 0.0 && self.c.is_finite()) {
            return Err(Error::config("gospa.c", "must be positive and finite"));
        }
        if !(self.alpha > 0.0 && self.alpha <= 2.0) {
            return Err(Error::config("gospa.alpha", "must lie in (0, 2]"));
        }
        Ok(())
    }

    /// Cost charged for each unassigned point, `c^p / alpha`.
    pub fn unassigned_cost(&self) -> f64 {
        self.c.powf(self.p) / self.alpha
    }
}

/// GOSPA value with its decomposition. The three terms are in `value^p` units.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Gospa {
    pub value: f64,
    pub localisation: f64,
    pub missed: f64,
    pub false_targets: f64,
}

/// Optimal partial matching between rows and columns.
#[derive(Debug, Clone, PartialEq)]
pub struct Pairing {
    /// Matched `(row, col)` pairs in ascending row order.
    pub pairs: Vec<(usize, usize)>,
    pub unassigned_rows: Vec<usize>,
    pub unassigned_cols: Vec<usize>,
    pub cost: f64,
}

/// Minimum-cost square assignment (shortest augmenting paths with potentials).
/// Returns the column assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-based arrays with a virtual column 0, as in the classic formulation.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut row_of = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        row_of[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = row_of[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
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
                    u[row_of[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of[j0] = row_of[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of = vec![0; n];
    for j in 1..=n {
        if row_of[j] > 0 {
            col_of[row_of[j] - 1] = j - 1;
        }
    }
    col_of
}

/// Matches rows to columns or leaves them unassigned at the given per-row and
/// per-column prices. A pair is only used when strictly cheaper than leaving
/// both ends unassigned.
pub fn assignment_solve(costs: &[Vec<f64>], unassign_row: &[f64], unassign_col: &[f64]) -> Pairing {
    let n = unassign_row.len();
    let m = unassign_col.len();
    debug_assert_eq!(costs.len(), n);
    debug_assert!(costs.iter().all(|r| r.len() == m));

    let allowed = |i: usize, j: usize| costs[i][j] < unassign_row[i] + unassign_col[j];
    // Leaving everything unassigned is feasible, so no optimum touches this value.
    let forbidden = 4.0 * (unassign_row.iter().sum::<f64>() + unassign_col.iter().sum::<f64>() + 1.0);
    let size = n + m;
    let mut square = vec![vec![forbidden; size]; size];
    for i in 0..n {
        for j in 0..m {
            if allowed(i, j) {
                square[i][j] = costs[i][j];
            }
        }
        square[i][m + i] = unassign_row[i];
    }
    for j in 0..m {
        square[n + j][j] = unassign_col[j];
        for i in 0..n {
            square[n + j][m + i] = 0.0;
        }
    }

    let col_of = if size == 0 { Vec::new() } else { hungarian(&square) };
    let mut pairs = Vec::new();
    let mut unassigned_rows = Vec::new();
    let mut col_taken = vec![false; m];
    for (i, &j) in col_of.iter().enumerate().take(n) {
        if j < m && allowed(i, j) {
            pairs.push((i, j));
            col_taken[j] = true;
        } else {
            unassigned_rows.push(i);
        }
    }
    let unassigned_cols: Vec<usize> = (0..m).filter(|&j| !col_taken[j]).collect();
    let cost = pairing_cost(costs, unassign_row, unassign_col, &pairs, &unassigned_rows, &unassigned_cols);
    Pairing {
        pairs,
        unassigned_rows,
        unassigned_cols,
        cost,
    }
}

/// Cost of a pairing: the pairs by row, plus the unassigned rows and columns summed separately.
pub fn pairing_cost(
    costs: &[Vec<f64>],
    unassign_row: &[f64],
    unassign_col: &[f64],
    pairs: &[(usize, usize)],
    unassigned_rows: &[usize],
    unassigned_cols: &[usize],
) -> f64 {
    let unassigned = unassigned_rows.iter().map(|&i| unassign_row[i]).sum::<f64>()
        + unassigned_cols.iter().map(|&j| unassign_col[j]).sum::<f64>();
    pairs.iter().map(|&(i, j)| costs[i][j]).sum::<f64>() + unassigned
}

fn distance(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

pub fn gospa(estimates: &[[f64; 2]], truths: &[[f64; 2]], cfg: &GospaConfig) -> Gospa {
    let costs: Vec<Vec<f64>> = estimates
        .iter()
        .map(|&e| truths.iter().map(|&t| distance(e, t).powf(cfg.p)).collect())
        .collect();
    let unit = cfg.unassigned_cost();
    let pairing = assignment_solve(&costs, &vec![unit; estimates.len()], &vec![unit; truths.len()]);
    let localisation: f64 = pairing.pairs.iter().map(|&(i, j)| costs[i][j]).sum();
    let false_targets = unit * pairing.unassigned_rows.len() as f64;
    let missed = unit * pairing.unassigned_cols.len() as f64;
    Gospa {
        value: pairing.cost.powf(1.0 / cfg.p),
        localisation,
        missed,
        false_targets,
    }
}

/// Per-run inputs to the aggregate: every (step, sensor) GOSPA value and per-step CI.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct RunMetrics {
    pub gospa: Vec<f64>,
    pub ci: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_gospa: f64,
    /// Sample standard deviation of the per-run means.
    pub std_gospa: f64,
    pub mean_ci: f64,
    pub runs: usize,
}

fn mean(values: impl ExactSizeIterator<Item = f64>) -> f64 {
    let n = values.len() as f64;
    values.sum::<f64>() / n
}

pub fn aggregate(runs: &[RunMetrics]) -> Result<Aggregate> {
    if runs.is_empty() {
        return Err(Error::EmptyInput("runs"));
    }
    if runs.iter().any(|r| r.gospa.is_empty()) {
        return Err(Error::EmptyInput("gospa values"));
    }
    let run_means: Vec<f64> = runs.iter().map(|r| mean(r.gospa.iter().copied())).collect();
    let mean_gospa = mean(run_means.iter().copied());
    let std_gospa = if runs.len() > 1 {
        let ss: f64 = run_means.iter().map(|m| (m - mean_gospa).powi(2)).sum();
        (ss / (runs.len() - 1) as f64).sqrt()
    } else {
        0.0
    };
    let ci_means: Vec<f64> = runs
        .iter()
        .filter(|r| !r.ci.is_empty())
        .map(|r| mean(r.ci.iter().map(|&c| c as f64)))
        .collect();
    let mean_ci = if ci_means.is_empty() {
        0.0
    } else {
        mean(ci_means.iter().copied())
    };
    Ok(Aggregate {
        mean_gospa,
        std_gospa,
        mean_ci,
        runs: runs.len(),
    })
}

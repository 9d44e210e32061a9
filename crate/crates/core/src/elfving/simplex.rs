//! Dense two-phase simplex for `max c'x  s.t.  A x = b, x >= 0` with `b >= 0`.
//!
//! Pivoting uses the largest reduced cost and switches to Bland's rule after a run
//! of degenerate pivots, which rules out cycling. Primal values and duals are
//! recomputed from the final basis with an LU solve.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

const PIVOT_TOL: f64 = 1e-11;
const COST_TOL: f64 = 1e-10;
const DEGENERATE_STREAK: usize = 32;
const MAX_PIVOTS: usize = 200_000;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum LpError {
    #[error("linear program is infeasible")]
    Infeasible,
    #[error("linear program is unbounded")]
    Unbounded,
    #[error("simplex pivot limit reached")]
    PivotLimit,
    #[error("singular basis")]
    SingularBasis,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LpSolution {
    pub x: Vec<f64>,
    pub objective: f64,
    /// Dual prices of the equality rows: `y = B^{-T} c_B`.
    pub duals: Vec<f64>,
    pub pivots: usize,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    /// reduced costs `c_j - c_B' B^{-1} A_j`, last entry is minus the objective
    cost: Vec<f64>,
    basis: Vec<usize>,
    width: usize,
    pivots: usize,
}

impl Tableau {
    fn rhs(&self, i: usize) -> f64 {
        self.rows[i][self.width]
    }

    fn pivot(&mut self, r: usize, col: usize) {
        let piv = self.rows[r][col];
        for v in self.rows[r].iter_mut() {
            *v /= piv;
        }
        let pivot_row = self.rows[r].clone();
        for (i, row) in self.rows.iter_mut().enumerate() {
            if i == r {
                continue;
            }
            let f = row[col];
            if f != 0.0 {
                for (v, p) in row.iter_mut().zip(&pivot_row) {
                    *v -= f * p;
                }
                row[col] = 0.0;
            }
        }
        let f = self.cost[col];
        if f != 0.0 {
            for (v, p) in self.cost.iter_mut().zip(&pivot_row) {
                *v -= f * p;
            }
            self.cost[col] = 0.0;
        }
        self.basis[r] = col;
        self.pivots += 1;
    }

    fn reset_costs(&mut self, c: &[f64]) {
        let m = self.rows.len();
        let mut cost: Vec<f64> = c.iter().copied().chain(std::iter::once(0.0)).collect();
        for i in 0..m {
            let cb = c[self.basis[i]];
            if cb != 0.0 {
                for (v, t) in cost.iter_mut().zip(&self.rows[i]) {
                    *v -= cb * t;
                }
            }
        }
        self.cost = cost;
    }

    /// Runs simplex iterations over the allowed columns until optimal.
    fn optimize(&mut self, allowed: usize) -> Result<(), LpError> {
        let m = self.rows.len();
        let mut streak = 0usize;
        loop {
            if self.pivots > MAX_PIVOTS {
                return Err(LpError::PivotLimit);
            }
            let bland = streak >= DEGENERATE_STREAK;
            let entering = if bland {
                (0..allowed).find(|&j| self.cost[j] > COST_TOL)
            } else {
                let mut best = None;
                let mut best_val = COST_TOL;
                for j in 0..allowed {
                    if self.cost[j] > best_val {
                        best_val = self.cost[j];
                        best = Some(j);
                    }
                }
                best
            };
            let Some(col) = entering else {
                return Ok(());
            };
            let mut leave: Option<(usize, f64)> = None;
            for i in 0..m {
                let a = self.rows[i][col];
                if a > PIVOT_TOL {
                    let ratio = self.rhs(i).max(0.0) / a;
                    leave = match leave {
                        None => Some((i, ratio)),
                        Some((li, lr)) => {
                            if ratio < lr - 1e-14
                                || (ratio <= lr + 1e-14 && self.basis[i] < self.basis[li])
                            {
                                Some((i, ratio))
                            } else {
                                Some((li, lr))
                            }
                        }
                    };
                }
            }
            let Some((r, ratio)) = leave else {
                return Err(LpError::Unbounded);
            };
            if ratio <= 1e-14 {
                streak += 1;
            } else {
                streak = 0;
            }
            self.pivot(r, col);
        }
    }
}

/// Solves `max obj'x` subject to `a x = b`, `x >= 0`. Rows with negative `b` are flipped.
pub fn solve(a: &DMatrix<f64>, b: &[f64], obj: &[f64]) -> Result<LpSolution, LpError> {
    let (m, n) = a.shape();
    assert_eq!(b.len(), m);
    assert_eq!(obj.len(), n);
    let width = n + m;
    let mut rows = Vec::with_capacity(m);
    let mut signs = vec![1.0; m];
    for i in 0..m {
        let s = if b[i] < 0.0 { -1.0 } else { 1.0 };
        signs[i] = s;
        let mut row = vec![0.0; width + 1];
        for j in 0..n {
            row[j] = s * a[(i, j)];
        }
        row[n + i] = 1.0;
        row[width] = s * b[i];
        rows.push(row);
    }
    let mut t = Tableau {
        rows,
        cost: Vec::new(),
        basis: (n..n + m).collect(),
        width,
        pivots: 0,
    };

    // phase 1: maximise minus the sum of artificials
    let phase1: Vec<f64> = (0..width).map(|j| if j >= n { -1.0 } else { 0.0 }).collect();
    t.reset_costs(&phase1);
    t.optimize(width)?;
    let bscale = 1.0 + b.iter().fold(0.0f64, |s, v| s.max(v.abs()));
    let infeasibility: f64 = (0..m)
        .filter(|&i| t.basis[i] >= n)
        .map(|i| t.rhs(i))
        .sum();
    if infeasibility > 1e-9 * bscale {
        return Err(LpError::Infeasible);
    }
    // drive remaining artificials out of the basis where possible
    for i in 0..m {
        if t.basis[i] >= n {
            let col = (0..n)
                .filter(|&j| t.rows[i][j].abs() > 1e-9)
                .max_by(|&p, &q| t.rows[i][p].abs().total_cmp(&t.rows[i][q].abs()));
            if let Some(col) = col {
                t.pivot(i, col);
            }
        }
    }

    // phase 2 over the original columns only
    let phase2: Vec<f64> = (0..width).map(|j| if j < n { obj[j] } else { 0.0 }).collect();
    t.reset_costs(&phase2);
    t.optimize(n)?;

    // clean primal and dual values from the final basis
    let basis_matrix = DMatrix::from_fn(m, m, |i, k| {
        let j = t.basis[k];
        if j < n {
            signs[i] * a[(i, j)]
        } else if j - n == i {
            1.0
        } else {
            0.0
        }
    });
    let rhs = DVector::from_fn(m, |i, _| signs[i] * b[i]);
    let lu = basis_matrix.clone().lu();
    let xb = lu.solve(&rhs).ok_or(LpError::SingularBasis)?;
    let cb = DVector::from_fn(m, |k, _| {
        let j = t.basis[k];
        if j < n {
            obj[j]
        } else {
            0.0
        }
    });
    let y_signed = basis_matrix
        .transpose()
        .lu()
        .solve(&cb)
        .ok_or(LpError::SingularBasis)?;
    let mut x = vec![0.0; n];
    for (k, &j) in t.basis.iter().enumerate() {
        if j < n {
            x[j] = xb[k].max(0.0);
        }
    }
    let objective = obj.iter().zip(&x).map(|(c, v)| c * v).sum();
    let duals = (0..m).map(|i| signs[i] * y_signed[i]).collect();
    Ok(LpSolution {
        x,
        objective,
        duals,
        pivots: t.pivots,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_textbook_problem() {
        // max 3x + 5y  s.t. x + s1 = 4, 2y + s2 = 12, 3x + 2y + s3 = 18
        let a = DMatrix::from_row_slice(
            3,
            5,
            &[
                1.0, 0.0, 1.0, 0.0, 0.0, //
                0.0, 2.0, 0.0, 1.0, 0.0, //
                3.0, 2.0, 0.0, 0.0, 1.0,
            ],
        );
        let sol = solve(&a, &[4.0, 12.0, 18.0], &[3.0, 5.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((sol.objective - 36.0).abs() < 1e-12);
        assert!((sol.x[0] - 2.0).abs() < 1e-12);
        assert!((sol.x[1] - 6.0).abs() < 1e-12);
        // strong duality
        let dual_obj: f64 = sol.duals.iter().zip([4.0, 12.0, 18.0]).map(|(y, b)| y * b).sum();
        assert!((dual_obj - 36.0).abs() < 1e-12);
    }

    #[test]
    fn infeasible_and_unbounded() {
        // x1 + x2 = -1 has no nonnegative solution
        let a = DMatrix::from_row_slice(1, 2, &[1.0, 1.0]);
        assert_eq!(solve(&a, &[-1.0], &[1.0, 0.0]), Err(LpError::Infeasible));
        // x1 - x2 = 0, maximise x1
        let a = DMatrix::from_row_slice(1, 2, &[1.0, -1.0]);
        assert_eq!(solve(&a, &[0.0], &[1.0, 0.0]), Err(LpError::Unbounded));
    }

    #[test]
    fn redundant_rows_are_tolerated() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 2.0, 2.0]);
        let sol = solve(&a, &[1.0, 2.0], &[1.0, 2.0]).unwrap();
        assert!((sol.objective - 2.0).abs() < 1e-12);
    }

    #[test]
    fn degenerate_problem_terminates() {
        // Beale's cycling example in equality form with slacks
        let a = DMatrix::from_row_slice(
            3,
            7,
            &[
                0.25, -8.0, -1.0, 9.0, 1.0, 0.0, 0.0, //
                0.5, -12.0, -0.5, 3.0, 0.0, 1.0, 0.0, //
                0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0,
            ],
        );
        let sol = solve(&a, &[0.0, 0.0, 1.0], &[0.75, -20.0, 0.5, -6.0, 0.0, 0.0, 0.0]).unwrap();
        assert!((sol.objective - 1.25).abs() < 1e-10);
    }
}

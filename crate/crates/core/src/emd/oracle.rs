//! Dense two-phase tableau simplex over every `side⁴` flow variable.
//!
//! Slow and simple on purpose: it shares no code with the network simplex and
//! is only meant for cross-checking [`super::emd`] on grids of side ≤ 4.

use super::{check_pair, ground_cost, GridDistribution};
use crate::error::{Error, Result};

pub const MAX_ORACLE_SIDE: usize = 4;

const PIVOT_EPS: f64 = 1e-12;

struct Tableau {
    rows: Vec<Vec<f64>>,
    /// reduced costs, last entry holds −objective
    obj: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let width = self.obj.len();
        let p = self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v /= p;
        }
        let pivot_row = self.rows[row].clone();
        for (r, other) in self.rows.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let f = other[col];
            if f != 0.0 {
                for c in 0..width {
                    other[c] -= f * pivot_row[c];
                }
            }
        }
        let f = self.obj[col];
        if f != 0.0 {
            for c in 0..width {
                self.obj[c] -= f * pivot_row[c];
            }
        }
        self.basis[row] = col;
    }

    /// Bland's rule: lowest-index improving column, lowest-index leaving variable on ties.
    fn run(&mut self, allowed: usize) {
        let rhs = self.obj.len() - 1;
        loop {
            let Some(col) = (0..allowed).find(|&c| self.obj[c] < -PIVOT_EPS) else {
                return;
            };
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][col];
                if a > PIVOT_EPS {
                    let ratio = self.rows[r][rhs] / a;
                    let better = match leave {
                        None => true,
                        Some((lr, lratio)) => {
                            ratio < lratio - PIVOT_EPS
                                || (ratio <= lratio + PIVOT_EPS && self.basis[r] < self.basis[lr])
                        }
                    };
                    if better {
                        leave = Some((r, ratio));
                    }
                }
            }
            match leave {
                Some((r, _)) => self.pivot(r, col),
                // transportation LPs are bounded; an unbounded ray means numerical trouble
                None => return,
            }
        }
    }
}

/// Solves min cᵀx s.t. Ax = b, x ≥ 0 (b ≥ 0) and returns the optimal value.
fn dense_lp(a: &[Vec<f64>], b: &[f64], c: &[f64]) -> f64 {
    let n_cons = a.len();
    let n_vars = c.len();
    let width = n_vars + n_cons + 1;
    let rhs = width - 1;
    let mut rows = Vec::with_capacity(n_cons);
    for (r, coeffs) in a.iter().enumerate() {
        let mut row = vec![0.0; width];
        row[..n_vars].copy_from_slice(coeffs);
        row[n_vars + r] = 1.0;
        row[rhs] = b[r];
        rows.push(row);
    }
    // phase I: minimise the sum of artificials
    let mut obj = vec![0.0; width];
    for row in &rows {
        for col in 0..n_vars {
            obj[col] -= row[col];
        }
        obj[rhs] -= row[rhs];
    }
    let mut t = Tableau {
        rows,
        obj,
        basis: (n_vars..n_vars + n_cons).collect(),
    };
    t.run(n_vars + n_cons);

    // drive zero-level artificials out of the basis; rows with no pivot are redundant
    for r in 0..n_cons {
        if t.basis[r] >= n_vars {
            if let Some(col) = (0..n_vars).find(|&col| t.rows[r][col].abs() > 1e-9) {
                t.pivot(r, col);
            }
        }
    }

    // phase II
    let mut obj = vec![0.0; width];
    obj[..n_vars].copy_from_slice(c);
    for r in 0..n_cons {
        let cb = if t.basis[r] < n_vars { c[t.basis[r]] } else { 0.0 };
        if cb != 0.0 {
            for col in 0..width {
                obj[col] -= cb * t.rows[r][col];
            }
        }
    }
    t.obj = obj;
    t.run(n_vars);
    -t.obj[rhs]
}

/// EMD by dense linear programming. Test oracle; refuses grids larger than 4×4.
pub fn emd_oracle(a: &GridDistribution, b: &GridDistribution) -> Result<f64> {
    check_pair(a, b)?;
    let side = a.side();
    if side > MAX_ORACLE_SIDE {
        return Err(Error::InvalidArgument(format!(
            "oracle limited to side <= {MAX_ORACLE_SIDE}, got {side}"
        )));
    }
    let cells = side * side;
    let n_vars = cells * cells;
    let mut cons = Vec::with_capacity(2 * cells);
    let mut rhs = Vec::with_capacity(2 * cells);
    for i in 0..cells {
        let mut row = vec![0.0; n_vars];
        for j in 0..cells {
            row[i * cells + j] = 1.0;
        }
        cons.push(row);
        rhs.push(a.mass()[i]);
    }
    for j in 0..cells {
        let mut row = vec![0.0; n_vars];
        for i in 0..cells {
            row[i * cells + j] = 1.0;
        }
        cons.push(row);
        rhs.push(b.mass()[j]);
    }
    let cost: Vec<f64> = (0..n_vars).map(|v| ground_cost(side, v / cells, v % cells)).collect();
    Ok(dense_lp(&cons, &rhs, &cost).max(0.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn identical_and_points() {
        let a = GridDistribution::new(2, vec![0.25, 0.25, 0.25, 0.25]).unwrap();
        assert!(emd_oracle(&a, &a).unwrap().abs() < 1e-12);
        let p = GridDistribution::point(4, 0, 0);
        let q = GridDistribution::point(4, 3, 3);
        assert!((emd_oracle(&p, &q).unwrap() - 18f64.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn refuses_large_grids() {
        let p = GridDistribution::point(5, 0, 0);
        assert!(emd_oracle(&p, &p).is_err());
    }

    #[test]
    fn hand_computed_split() {
        // half the mass moves one cell right, half stays: cost 0.5
        let a = GridDistribution::new(2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let b = GridDistribution::new(2, vec![0.5, 0.5, 0.0, 0.0]).unwrap();
        assert!((emd_oracle(&a, &b).unwrap() - 0.5).abs() < 1e-12);
    }
}

//! Dense LP reference for small transport problems.
//!
//! Builds the full equality-constrained LP over every cell (one demand
//! constraint dropped as redundant) and walks polytope vertices with a
//! two-phase tableau simplex under Bland's rule. Quadratic memory in the cell
//! count, so it is capped at [`ORACLE_CELL_LIMIT`] cells.

use super::{TransportError, TransportProblem};

pub const ORACLE_CELL_LIMIT: usize = 64;

const EPS: f64 = 1e-12;

struct Tableau {
    /// `rows x (vars + 1)`; last column is the right-hand side.
    a: Vec<Vec<f64>>,
    basis: Vec<usize>,
    vars: usize,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let p = self.a[row][col];
        self.a[row].iter_mut().for_each(|v| *v /= p);
        let pivot_row = self.a[row].clone();
        for (r, line) in self.a.iter_mut().enumerate() {
            if r == row {
                continue;
            }
            let f = line[col];
            if f != 0.0 {
                for (v, &pv) in line.iter_mut().zip(&pivot_row) {
                    *v -= f * pv;
                }
            }
        }
        self.basis[row] = col;
    }

    fn reduced_cost(&self, cost: &[f64], col: usize) -> f64 {
        let mut rc = cost[col];
        for (r, &b) in self.basis.iter().enumerate() {
            rc -= cost[b] * self.a[r][col];
        }
        rc
    }

    /// Bland's rule simplex over columns `< allowed`.
    fn minimize(&mut self, cost: &[f64], allowed: usize) {
        loop {
            let Some(col) = (0..allowed)
                .filter(|c| !self.basis.contains(c))
                .find(|&c| self.reduced_cost(cost, c) < -EPS)
            else {
                return;
            };
            let rhs = self.vars;
            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.a.len() {
                let coef = self.a[r][col];
                if coef > EPS {
                    let ratio = self.a[r][rhs] / coef;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - EPS
                                || (ratio <= lratio + EPS && self.basis[r] < self.basis[lr])
                            {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            // Transport LPs are bounded; an unbounded direction cannot occur.
            let (row, _) = leave.expect("bounded LP");
            self.pivot(row, col);
        }
    }
}

/// Minimal transport cost by dense two-phase simplex. Test-only reference.
pub fn emd_oracle(p: &TransportProblem) -> Result<f64, TransportError> {
    let (n, m) = (p.rows(), p.cols());
    let cells = n * m;
    if cells > ORACLE_CELL_LIMIT {
        return Err(TransportError::TooLarge {
            cells,
            limit: ORACLE_CELL_LIMIT,
        });
    }
    let constraints = n + m - 1;
    let vars = cells + constraints;
    let mut a = vec![vec![0.0; vars + 1]; constraints];
    for i in 0..n {
        for j in 0..m {
            a[i][i * m + j] = 1.0;
        }
        a[i][vars] = p.supply()[i];
    }
    for j in 0..m - 1 {
        for i in 0..n {
            a[n + j][i * m + j] = 1.0;
        }
        a[n + j][vars] = p.demand()[j];
    }
    for (r, row) in a.iter_mut().enumerate() {
        row[cells + r] = 1.0;
    }
    let mut t = Tableau {
        a,
        basis: (cells..vars).collect(),
        vars,
    };

    let mut phase1 = vec![0.0; vars];
    phase1[cells..].iter_mut().for_each(|c| *c = 1.0);
    t.minimize(&phase1, vars);

    // Push zero-level artificials out of the basis where a structural column allows.
    for r in 0..constraints {
        if t.basis[r] >= cells {
            if let Some(col) = (0..cells).find(|&c| !t.basis.contains(&c) && t.a[r][c].abs() > 1e-9)
            {
                t.pivot(r, col);
            }
        }
    }

    let mut phase2 = vec![0.0; vars];
    phase2[..cells].copy_from_slice(p.costs());
    t.minimize(&phase2, cells);

    let mut x = vec![0.0; cells];
    for (r, &b) in t.basis.iter().enumerate() {
        if b < cells {
            x[b] = t.a[r][vars].max(0.0);
        }
    }
    Ok(p.plan_cost(&x))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn too_large() {
        let p = TransportProblem::new(vec![0.5; 72], vec![1.0 / 9.0; 9], vec![0.125; 8]).unwrap();
        assert_eq!(
            emd_oracle(&p),
            Err(TransportError::TooLarge {
                cells: 72,
                limit: 64
            })
        );
    }

    #[test]
    fn one_by_m_is_weighted_row() {
        let p = TransportProblem::new(
            vec![0.9, 0.1, 0.5, 0.3],
            vec![1.0],
            vec![0.1, 0.2, 0.3, 0.4],
        )
        .unwrap();
        let expected = 0.1 * 0.9 + 0.2 * 0.1 + 0.3 * 0.5 + 0.4 * 0.3;
        assert!((emd_oracle(&p).unwrap() - expected).abs() < 1e-12);
    }

    #[test]
    fn hand_solved_three_by_three() {
        // Assignment problem on uniform weights: optimum picks the permutation
        // (0->1, 1->2, 2->0) with costs 0.1 + 0.2 + 0.3.
        let cost = vec![0.9, 0.1, 0.8, 0.7, 0.9, 0.2, 0.3, 0.6, 0.9];
        let w = vec![1.0 / 3.0; 3];
        let p = TransportProblem::new(cost, w.clone(), w).unwrap();
        assert!((emd_oracle(&p).unwrap() - 0.2).abs() < 1e-12);
    }
}

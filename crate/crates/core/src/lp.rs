//! Linear programs over the martingale-measure polytope of a single node.
//!
//! At a node with child increments `ΔX_1, …, ΔX_m` the polytope is
//! `{q ≥ 0 : Σ q_j = 1, Σ q_j ΔX_j = 0}`. The problems are tiny (`m ≤ 16`,
//! `d + 1` equality rows), so a dense two-phase simplex with Bland's rule is
//! used, followed by a direct re-solve of the optimal basis.

use nalgebra::{DMatrix, DVector};

const PIVOT_TOL: f64 = 1e-11;
const FEAS_TOL: f64 = 1e-10;

/// Result of `max cᵀx` subject to `A x = b, x ≥ 0`.
#[derive(Debug, Clone, PartialEq)]
pub enum LpOutcome {
    Optimal { x: Vec<f64>, value: f64 },
    Infeasible,
    Unbounded,
}

struct Tableau {
    rows: Vec<Vec<f64>>,
    rhs: Vec<f64>,
    basis: Vec<usize>,
}

impl Tableau {
    fn pivot(&mut self, row: usize, col: usize) {
        let piv = self.rows[row][col];
        for v in self.rows[row].iter_mut() {
            *v /= piv;
        }
        self.rhs[row] /= piv;
        for r in 0..self.rows.len() {
            if r == row {
                continue;
            }
            let factor = self.rows[r][col];
            if factor != 0.0 {
                for c in 0..self.rows[r].len() {
                    let delta = factor * self.rows[row][c];
                    self.rows[r][c] -= delta;
                }
                self.rhs[r] -= factor * self.rhs[row];
            }
        }
        self.basis[row] = col;
    }

    /// Runs primal simplex for `max costᵀx` over columns flagged in `allowed`.
    /// Returns false when the objective is unbounded.
    fn optimize(&mut self, cost: &[f64], allowed: &[bool]) -> bool {
        let ncols = cost.len();
        for _ in 0..10_000 {
            let mut entering = None;
            for j in 0..ncols {
                if !allowed[j] || self.basis.contains(&j) {
                    continue;
                }
                let mut reduced = cost[j];
                for (r, &b) in self.basis.iter().enumerate() {
                    reduced -= cost[b] * self.rows[r][j];
                }
                if reduced > PIVOT_TOL {
                    entering = Some(j);
                    break;
                }
            }
            let Some(col) = entering else { return true };

            let mut leave: Option<(usize, f64)> = None;
            for r in 0..self.rows.len() {
                let a = self.rows[r][col];
                if a > PIVOT_TOL {
                    let ratio = self.rhs[r] / a;
                    leave = match leave {
                        None => Some((r, ratio)),
                        Some((lr, lratio)) => {
                            if ratio < lratio - 1e-15 || (ratio <= lratio + 1e-15 && self.basis[r] < self.basis[lr]) {
                                Some((r, ratio))
                            } else {
                                Some((lr, lratio))
                            }
                        }
                    };
                }
            }
            let Some((row, _)) = leave else { return false };
            self.pivot(row, col);
        }
        true
    }
}

/// Solves `max cᵀx` subject to `A x = b, x ≥ 0`.
pub fn maximize(c: &[f64], a: &DMatrix<f64>, b: &[f64]) -> LpOutcome {
    let (k, n) = a.shape();
    assert_eq!(c.len(), n);
    assert_eq!(b.len(), k);

    // Normalize rows and make the right-hand side nonnegative.
    let mut rows = Vec::with_capacity(k);
    let mut rhs = Vec::with_capacity(k);
    for (i, &b_i) in b.iter().enumerate() {
        let mut row: Vec<f64> = a.row(i).iter().cloned().collect();
        let mut bi = b_i;
        let scale = row.iter().fold(bi.abs(), |m, v| m.max(v.abs()));
        if scale == 0.0 {
            continue;
        }
        for v in row.iter_mut() {
            *v /= scale;
        }
        bi /= scale;
        if bi < 0.0 {
            for v in row.iter_mut() {
                *v = -*v;
            }
            bi = -bi;
        }
        rows.push(row);
        rhs.push(bi);
    }
    if rows.is_empty() {
        // Only x ≥ 0 remains: bounded iff no positive cost.
        if c.iter().any(|&v| v > 0.0) {
            return LpOutcome::Unbounded;
        }
        return LpOutcome::Optimal {
            x: vec![0.0; n],
            value: 0.0,
        };
    }
    let k = rows.len();
    let total = n + k;
    for (i, row) in rows.iter_mut().enumerate() {
        row.extend((0..k).map(|j| if i == j { 1.0 } else { 0.0 }));
    }
    let mut tab = Tableau {
        rows,
        rhs,
        basis: (n..total).collect(),
    };

    // Phase 1: maximize -Σ artificials.
    let phase1: Vec<f64> = (0..total).map(|j| if j >= n { -1.0 } else { 0.0 }).collect();
    tab.optimize(&phase1, &vec![true; total]);
    let infeas: f64 = tab
        .basis
        .iter()
        .enumerate()
        .filter(|(_, &b)| b >= n)
        .map(|(r, _)| tab.rhs[r])
        .sum();
    if infeas > FEAS_TOL {
        return LpOutcome::Infeasible;
    }

    // Drive remaining artificials out of the basis; drop redundant rows.
    let mut r = 0;
    while r < tab.rows.len() {
        if tab.basis[r] >= n {
            let col = (0..n)
                .filter(|j| !tab.basis.contains(j))
                .max_by(|&x, &y| tab.rows[r][x].abs().total_cmp(&tab.rows[r][y].abs()));
            match col {
                Some(j) if tab.rows[r][j].abs() > PIVOT_TOL => {
                    tab.pivot(r, j);
                    r += 1;
                }
                _ => {
                    tab.rows.remove(r);
                    tab.rhs.remove(r);
                    tab.basis.remove(r);
                }
            }
        } else {
            r += 1;
        }
    }

    let mut cost = c.to_vec();
    cost.extend(std::iter::repeat_n(0.0, k));
    let allowed: Vec<bool> = (0..total).map(|j| j < n).collect();
    if !tab.optimize(&cost, &allowed) {
        return LpOutcome::Unbounded;
    }

    let x = polish(a, b, &tab.basis, n).unwrap_or_else(|| {
        let mut x = vec![0.0; n];
        for (r, &bj) in tab.basis.iter().enumerate() {
            if bj < n {
                x[bj] = tab.rhs[r].max(0.0);
            }
        }
        x
    });
    let value = c.iter().zip(&x).map(|(ci, xi)| ci * xi).sum();
    LpOutcome::Optimal { x, value }
}

/// Recomputes the basic solution directly from the original data.
fn polish(a: &DMatrix<f64>, b: &[f64], basis: &[usize], n: usize) -> Option<Vec<f64>> {
    let cols: Vec<usize> = basis.iter().copied().filter(|&j| j < n).collect();
    if cols.is_empty() {
        return Some(vec![0.0; n]);
    }
    let sub = DMatrix::from_fn(a.nrows(), cols.len(), |r, k| a[(r, cols[k])]);
    let rhs = DVector::from_column_slice(b);
    let svd = sub.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
    if smin <= smax * 1e-12 {
        return None;
    }
    let sol = basic_solve(&sub, &svd, &rhs)?;
    let resid = (&sub * &sol - &rhs).amax();
    if resid > 1e-12 * (1.0 + rhs.amax()) {
        return None;
    }
    let mut x = vec![0.0; n];
    for (k, &j) in cols.iter().enumerate() {
        if sol[k] < -1e-9 {
            return None;
        }
        x[j] = sol[k].max(0.0);
    }
    Some(x)
}

/// Solves a full-column-rank system: LU when square, otherwise SVD least
/// squares with two refinement steps.
fn basic_solve(
    sub: &DMatrix<f64>,
    svd: &nalgebra::linalg::SVD<f64, nalgebra::Dyn, nalgebra::Dyn>,
    rhs: &DVector<f64>,
) -> Option<DVector<f64>> {
    if sub.is_square() {
        return sub.clone().full_piv_lu().solve(rhs);
    }
    let mut sol = svd.solve(rhs, 0.0).ok()?;
    for _ in 0..2 {
        let r = rhs - sub * &sol;
        sol += svd.solve(&r, 0.0).ok()?;
    }
    Some(sol)
}

/// Constraint matrix `[1ᵀ; ΔX_1ᵀ; …]` of the martingale-measure polytope.
fn polytope_system(increments: &[DVector<f64>]) -> (DMatrix<f64>, Vec<f64>) {
    let m = increments.len();
    let d = increments.first().map_or(0, |v| v.len());
    let a = DMatrix::from_fn(d + 1, m, |r, j| if r == 0 { 1.0 } else { increments[j][r - 1] });
    let mut b = vec![0.0; d + 1];
    b[0] = 1.0;
    (a, b)
}

/// Optimum of `max Σ q_j values_j` over the martingale-measure polytope.
#[derive(Debug, Clone, PartialEq)]
pub struct PolytopeOptimum {
    pub value: f64,
    /// A maximizing vertex measure.
    pub q: Vec<f64>,
}

/// Maximizes `Σ q_j values_j` over the closed polytope. `None` when empty.
pub fn polytope_sup(increments: &[DVector<f64>], values: &[f64]) -> Option<PolytopeOptimum> {
    let (a, b) = polytope_system(increments);
    match maximize(values, &a, &b) {
        LpOutcome::Optimal { x, value } => Some(PolytopeOptimum { value, q: x }),
        LpOutcome::Infeasible => None,
        LpOutcome::Unbounded => unreachable!("the polytope lies in the probability simplex"),
    }
}

/// Largest `t` such that some martingale measure has every weight `≥ t`.
/// A strictly positive value means an equivalent martingale measure exists.
pub fn max_min_weight(increments: &[DVector<f64>]) -> Option<(f64, Vec<f64>)> {
    let m = increments.len();
    let d = increments.first().map_or(0, |v| v.len());
    // Variables (t, s_1..s_m) with q_j = t + s_j.
    let a = DMatrix::from_fn(d + 1, m + 1, |r, j| {
        if r == 0 {
            if j == 0 {
                m as f64
            } else {
                1.0
            }
        } else if j == 0 {
            increments.iter().map(|v| v[r - 1]).sum()
        } else {
            increments[j - 1][r - 1]
        }
    });
    let mut b = vec![0.0; d + 1];
    b[0] = 1.0;
    let mut c = vec![0.0; m + 1];
    c[0] = 1.0;
    match maximize(&c, &a, &b) {
        LpOutcome::Optimal { x, value } => {
            let q = (0..m).map(|j| x[0] + x[j + 1]).collect();
            Some((value, q))
        }
        _ => None,
    }
}

/// Enumerates the vertices of the polytope by brute force over supports.
/// Intended for nodes with at most `max_branches` children.
pub fn polytope_vertices(increments: &[DVector<f64>], max_branches: usize) -> Option<Vec<Vec<f64>>> {
    let m = increments.len();
    if m > max_branches || m >= usize::BITS as usize {
        return None;
    }
    let (a, b) = polytope_system(increments);
    let rhs = DVector::from_column_slice(&b);
    let max_support = a.nrows();
    let mut vertices: Vec<Vec<f64>> = Vec::new();
    for mask in 1usize..(1 << m) {
        let support: Vec<usize> = (0..m).filter(|j| mask & (1 << j) != 0).collect();
        if support.len() > max_support {
            continue;
        }
        let sub = DMatrix::from_fn(a.nrows(), support.len(), |r, k| a[(r, support[k])]);
        let svd = sub.clone().svd(true, true);
        let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
        let smin = svd.singular_values.iter().cloned().fold(f64::INFINITY, f64::min);
        if smin <= 1e-10 * smax {
            continue;
        }
        let Some(sol) = basic_solve(&sub, &svd, &rhs) else {
            continue;
        };
        if (&sub * &sol - &rhs).amax() > 1e-10 {
            continue;
        }
        if sol.iter().any(|&v| v < -1e-12) {
            continue;
        }
        let mut q = vec![0.0; m];
        for (k, &j) in support.iter().enumerate() {
            q[j] = sol[k].max(0.0);
        }
        if !vertices
            .iter()
            .any(|v| v.iter().zip(&q).all(|(x, y)| (x - y).abs() < 1e-12))
        {
            vertices.push(q);
        }
    }
    Some(vertices)
}

//! Small dense linear algebra used by the per-node solvers.
//!
//! Everything here operates on matrices of size at most a few dozen, so
//! clarity wins over blocking or allocation tricks.

use nalgebra::{DMatrix, DVector};

/// Spectral split of a symmetric nonnegative-definite matrix into its
/// numerical range and kernel.
#[derive(Debug, Clone)]
pub struct PsdSplit {
    /// Orthonormal basis of the range, one column per retained eigenvalue.
    pub range: DMatrix<f64>,
    /// Retained eigenvalues, aligned with the columns of `range`.
    pub range_values: Vec<f64>,
    /// Orthonormal basis of the numerical kernel.
    pub kernel: DMatrix<f64>,
    pub lambda_max: f64,
    pub lambda_min: f64,
}

impl PsdSplit {
    /// Eigen-decomposes the symmetric part of `c`; eigenvalues at or below
    /// `rel_tol * λ_max` count as zero.
    pub fn new(c: &DMatrix<f64>, rel_tol: f64) -> Self {
        let n = c.nrows();
        assert_eq!(n, c.ncols(), "PsdSplit needs a square matrix");
        if n == 0 {
            return Self {
                range: DMatrix::zeros(0, 0),
                range_values: Vec::new(),
                kernel: DMatrix::zeros(0, 0),
                lambda_max: 0.0,
                lambda_min: 0.0,
            };
        }
        let sym = (c + c.transpose()) * 0.5;
        let eig = sym.symmetric_eigen();
        let lambda_max = eig.eigenvalues.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lambda_min = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
        let cutoff = rel_tol * lambda_max.max(0.0);

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
        let keep: Vec<usize> = order
            .iter()
            .copied()
            .filter(|&i| eig.eigenvalues[i] > cutoff && eig.eigenvalues[i] > 0.0)
            .collect();
        let drop: Vec<usize> = order.iter().copied().filter(|i| !keep.contains(i)).collect();

        let range = DMatrix::from_fn(n, keep.len(), |r, k| eig.eigenvectors[(r, keep[k])]);
        let kernel = DMatrix::from_fn(n, drop.len(), |r, k| eig.eigenvectors[(r, drop[k])]);
        let range_values = keep.iter().map(|&i| eig.eigenvalues[i]).collect();
        Self {
            range,
            range_values,
            kernel,
            lambda_max,
            lambda_min,
        }
    }

    pub fn rank(&self) -> usize {
        self.range_values.len()
    }

    /// Moore-Penrose pseudoinverse restricted to the retained spectrum.
    pub fn pinv(&self) -> DMatrix<f64> {
        let n = self.range.nrows();
        let mut out = DMatrix::zeros(n, n);
        for (k, &lam) in self.range_values.iter().enumerate() {
            let v = self.range.column(k);
            out += (v * v.transpose()) / lam;
        }
        out
    }

    /// Minimum-norm solution of `c x = b` in the least-squares sense.
    pub fn solve(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(b.len());
        for (k, &lam) in self.range_values.iter().enumerate() {
            let v = self.range.column(k);
            x += v * (v.dot(b) / lam);
        }
        x
    }

    /// Orthogonal projection of `b` onto the kernel.
    pub fn project_kernel(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = DVector::zeros(b.len());
        for k in 0..self.kernel.ncols() {
            let v = self.kernel.column(k);
            x += v * v.dot(b);
        }
        x
    }
}

/// Basis of the linear span of `vectors` (columns of the returned split's
/// `range`), computed from the unweighted Gram sum `Σ v vᵀ`.
pub fn span_split(vectors: &[DVector<f64>], dim: usize, rel_tol: f64) -> PsdSplit {
    let mut gram = DMatrix::zeros(dim, dim);
    for v in vectors {
        gram += v * v.transpose();
    }
    PsdSplit::new(&gram, rel_tol)
}

/// Nonnegative least squares `min ‖E u − f‖, u ≥ 0` (Lawson-Hanson active set).
pub fn nnls(e: &DMatrix<f64>, f: &DVector<f64>) -> DVector<f64> {
    let (rows, cols) = e.shape();
    let mut u = DVector::zeros(cols);
    let mut passive = vec![false; cols];
    let scale =
        e.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0) * f.iter().fold(0.0_f64, |m, v| m.max(v.abs())).max(1.0);
    let tol = 1e-13 * scale * (rows.max(cols) as f64);

    for _ in 0..(3 * cols + 10) {
        let w = e.transpose() * (f - e * &u);
        let candidate = (0..cols)
            .filter(|&j| !passive[j] && w[j] > tol)
            .max_by(|&a, &b| w[a].total_cmp(&w[b]));
        let Some(enter) = candidate else { break };
        passive[enter] = true;

        loop {
            let idx: Vec<usize> = (0..cols).filter(|&j| passive[j]).collect();
            let sub = DMatrix::from_fn(rows, idx.len(), |r, k| e[(r, idx[k])]);
            let z_sub = lstsq(&sub, f);
            let mut z = DVector::zeros(cols);
            for (k, &j) in idx.iter().enumerate() {
                z[j] = z_sub[k];
            }
            if idx.iter().all(|&j| z[j] > 0.0) {
                u = z;
                break;
            }
            let mut alpha = f64::INFINITY;
            for &j in &idx {
                if z[j] <= 0.0 {
                    let denom = u[j] - z[j];
                    if denom > 0.0 {
                        alpha = alpha.min(u[j] / denom);
                    } else {
                        alpha = alpha.min(0.0);
                    }
                }
            }
            if !alpha.is_finite() {
                alpha = 0.0;
            }
            u += (&z - &u) * alpha;
            for &j in &idx {
                if u[j] <= tol * 1e-3 {
                    u[j] = 0.0;
                    passive[j] = false;
                }
            }
            if !passive.iter().any(|&p| p) {
                break;
            }
        }
    }
    u
}

fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    if a.ncols() == 0 {
        return DVector::zeros(0);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.iter().cloned().fold(0.0, f64::max);
    svd.solve(b, smax * 1e-14).unwrap_or_else(|_| DVector::zeros(a.ncols()))
}

/// Least-distance programming: the minimum-norm `x` with `G x ≥ h`.
/// Returns `None` when the constraints are infeasible.
pub fn least_distance(g: &DMatrix<f64>, h: &DVector<f64>) -> Option<DVector<f64>> {
    let (m, n) = g.shape();
    if m == 0 {
        return Some(DVector::zeros(n));
    }
    let mut e = DMatrix::zeros(n + 1, m);
    for j in 0..m {
        for i in 0..n {
            e[(i, j)] = g[(j, i)];
        }
        e[(n, j)] = h[j];
    }
    let mut f = DVector::zeros(n + 1);
    f[n] = 1.0;
    let u = nnls(&e, &f);
    let r = &e * &u - &f;
    // At the optimum r_{n+1} = -‖r‖² and ‖r‖² = 1 / (1 + ‖x‖²); a vanishing
    // residual means no feasible point.
    if r.norm() <= 1e-10 || r[n] >= 0.0 {
        return None;
    }
    Some(DVector::from_fn(n, |i, _| -r[i] / r[n]))
}

/// Neumaier-compensated sum, used for every Monte Carlo mean.
pub fn compensated_sum<I: IntoIterator<Item = f64>>(values: I) -> f64 {
    let mut sum = 0.0_f64;
    let mut comp = 0.0_f64;
    for v in values {
        let t = sum + v;
        if sum.abs() >= v.abs() {
            comp += (sum - t) + v;
        } else {
            comp += (v - t) + sum;
        }
        sum = t;
    }
    sum + comp
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pinv_of_identity() {
        let c = DMatrix::<f64>::identity(2, 2);
        let split = PsdSplit::new(&c, 1e-10);
        let rho = split.solve(&DVector::from_vec(vec![0.3, -0.1]));
        assert!((rho[0] - 0.3).abs() < 1e-15 && (rho[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn rank_one_min_norm() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let split = PsdSplit::new(&c, 1e-10);
        assert_eq!(split.rank(), 1);
        let rho = split.solve(&DVector::from_vec(vec![1.0, 1.0]));
        assert!((rho[0] - 0.5).abs() < 1e-14 && (rho[1] - 0.5).abs() < 1e-14);
    }

    #[test]
    fn kernel_projection_of_diag() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let split = PsdSplit::new(&c, 1e-10);
        let z = split.project_kernel(&DVector::from_vec(vec![0.0, 1.0]));
        assert_eq!(z.as_slice(), &[0.0, 1.0]);
    }

    #[test]
    fn zero_matrix_has_rank_zero() {
        let split = PsdSplit::new(&DMatrix::zeros(3, 3), 1e-10);
        assert_eq!(split.rank(), 0);
        assert_eq!(split.kernel.ncols(), 3);
    }

    #[test]
    fn nnls_matches_unconstrained_when_interior() {
        let e = DMatrix::from_row_slice(3, 2, &[1.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
        let f = DVector::from_vec(vec![1.0, 2.0, 3.0]);
        let u = nnls(&e, &f);
        assert!((u[0] - 1.0).abs() < 1e-12 && (u[1] - 2.0).abs() < 1e-12);
    }

    #[test]
    fn nnls_clamps_negative_coordinate() {
        let e = DMatrix::<f64>::identity(2, 2);
        let f = DVector::from_vec(vec![-1.0, 2.0]);
        let u = nnls(&e, &f);
        assert_eq!(u[0], 0.0);
        assert!((u[1] - 2.0).abs() < 1e-14);
    }

    #[test]
    fn ldp_one_dimensional() {
        let g = DMatrix::from_row_slice(1, 1, &[1.0]);
        let x = least_distance(&g, &DVector::from_vec(vec![1.0])).unwrap();
        assert!((x[0] - 1.0).abs() < 1e-14);
        // x ≥ 1 and -x ≥ 0 cannot both hold.
        let g = DMatrix::from_row_slice(2, 1, &[1.0, -1.0]);
        assert!(least_distance(&g, &DVector::from_vec(vec![1.0, 0.0])).is_none());
    }

    #[test]
    fn ldp_interval_pick_smallest() {
        // 0.1 x ≥ -0.5 and -0.1 x ≥ -1  => x in [-5, 10], min-norm 0.
        let g = DMatrix::from_row_slice(2, 1, &[0.1, -0.1]);
        let x = least_distance(&g, &DVector::from_vec(vec![-0.5, -1.0])).unwrap();
        assert!(x[0].abs() < 1e-14);
        // x ≥ 2 and x ≥ 3 => 3
        let g = DMatrix::from_row_slice(2, 1, &[1.0, 1.0]);
        let x = least_distance(&g, &DVector::from_vec(vec![2.0, 3.0])).unwrap();
        assert!((x[0] - 3.0).abs() < 1e-13);
    }

    #[test]
    fn compensated_sum_recovers_small_terms() {
        let vals = [1e16, 1.0, -1e16, 1.0];
        assert_eq!(compensated_sum(vals), 2.0);
    }
}

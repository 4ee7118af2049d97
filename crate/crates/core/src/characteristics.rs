//! Local drift and covariance of a market process, and the structure
//! condition `a = c ρ`.
//!
//! On a tree the clock runs in operational time (`ΔG = 1` per step), so `a`
//! is the conditional mean increment and `c` the conditional covariance of
//! the martingale increments.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{OdxError, Result};
use crate::linalg::PsdSplit;
use crate::probtree::{conditional_mean, doob_decompose, AdaptedProcess, EventTree, PredictableProcess};

/// Default relative eigenvalue cutoff for the pseudoinverse.
pub const DEFAULT_TOL: f64 = 1e-10;
/// Default threshold for the running mass `∫⟨ρ, cρ⟩ dG`.
pub const DEFAULT_MASS_THRESHOLD: f64 = 1e6;
/// Eigenvalues below `-PSD_TOL` mean the input is not a covariance.
pub const PSD_TOL: f64 = 1e-10;

/// Per-step drift `a`, covariance `c` (row-major `d × d`) and clock `dG`.
#[derive(Debug, Clone, PartialEq)]
pub struct Characteristics {
    pub dim: usize,
    pub a: PredictableProcess,
    pub c: PredictableProcess,
    pub dg: PredictableProcess,
}

impl Characteristics {
    pub fn drift(&self, node: usize) -> DVector<f64> {
        self.a.vector(node)
    }

    pub fn covariance(&self, node: usize) -> DMatrix<f64> {
        DMatrix::from_row_slice(self.dim, self.dim, self.c.at(node))
    }

    pub fn clock(&self, node: usize) -> f64 {
        self.dg.value(node)
    }
}

/// Reads `a`, `c` and `dG = 1` off a tree-valued market process.
pub fn extract_characteristics(tree: &EventTree, x: &AdaptedProcess) -> Result<Characteristics> {
    let d = x.dim();
    let (_, m) = doob_decompose(tree, x)?;
    let mut a = PredictableProcess::zeros(tree, d);
    let mut c = PredictableProcess::zeros(tree, d * d);
    let mut dg = PredictableProcess::zeros(tree, 1);
    for node in tree.inner_nodes() {
        let drift = conditional_mean(tree, x, node)?;
        a.at_mut(node).copy_from_slice(drift.as_slice());
        let probs = tree.child_probs(node);
        let mut cov = DMatrix::zeros(d, d);
        for (p, dm) in probs.iter().zip(m.child_increments(tree, node)) {
            cov += &dm * dm.transpose() * *p;
        }
        // Enforce exact symmetry.
        let cov = (&cov + cov.transpose()) * 0.5;
        c.at_mut(node).copy_from_slice(cov.transpose().as_slice());
        dg.at_mut(node)[0] = 1.0;
    }
    Ok(Characteristics { dim: d, a, c, dg })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum StructureStatus {
    Solvable,
    Arbitrage,
}

/// Outcome of [`solve_structure`].
#[derive(Debug, Clone, PartialEq)]
pub struct StructureReport {
    pub status: StructureStatus,
    /// Minimum-norm `ρ = c⁺a`; present iff solvable.
    pub rho: Option<PredictableProcess>,
    /// Kernel component of `a` at the offending steps, zero elsewhere;
    /// present iff arbitrage.
    pub zeta: Option<PredictableProcess>,
    /// Nodes at which `a` leaves the range of `c`.
    pub arbitrage_nodes: Vec<usize>,
    /// Running `∫⟨ρ, cρ⟩ dG` along each path, with `ρ = c⁺a` everywhere.
    pub mass: AdaptedProcess,
    pub mass_max: f64,
    pub mass_flag: bool,
    /// Largest `‖cρ − a‖∞` over the solvable steps.
    pub max_residual: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StructureOptions {
    pub tol: f64,
    pub mass_threshold: f64,
}

impl Default for StructureOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_TOL,
            mass_threshold: DEFAULT_MASS_THRESHOLD,
        }
    }
}

/// Per-step solution of the structure condition at a single `(a, c)`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSolution {
    pub rho: DVector<f64>,
    /// Projection of `a` onto the numerical kernel of `c`.
    pub kernel_drift: DVector<f64>,
    pub residual: f64,
    pub min_eig: f64,
}

/// Minimum-norm `ρ` with `cρ = a` (when possible) via the eigendecomposition
/// of `c`; eigenvalues below `tol · λ_max` are treated as zero.
pub fn solve_step(a: &DVector<f64>, c: &DMatrix<f64>, tol: f64) -> StepSolution {
    let split = PsdSplit::new(c, tol);
    let rho = split.solve(a);
    let kernel_drift = a - c * split.pinv() * a;
    let residual = (c * &rho - a).amax();
    StepSolution {
        rho,
        kernel_drift,
        residual,
        min_eig: split.lambda_min,
    }
}

/// Solves `a = cρ` step by step. Steps where the residual exceeds `tol`
/// make the report an arbitrage certificate carrying `ζ` with `cζ = 0` and
/// `⟨ζ, a⟩ = ‖ζ‖² > 0`.
pub fn solve_structure(tree: &EventTree, ch: &Characteristics, opts: StructureOptions) -> Result<StructureReport> {
    let d = ch.dim;
    let mut rho = PredictableProcess::zeros(tree, d);
    let mut zeta = PredictableProcess::zeros(tree, d);
    let mut arbitrage_nodes = Vec::new();
    let mut max_residual: f64 = 0.0;
    let mut mass = AdaptedProcess::zeros(tree, 1);

    for node in tree.inner_nodes() {
        let a = ch.drift(node);
        let c = ch.covariance(node);
        let scale = c.amax().max(1.0);
        let sol = solve_step(&a, &c, opts.tol);
        if sol.min_eig < -PSD_TOL * scale {
            return Err(OdxError::NotPsd {
                node,
                min_eig: sol.min_eig,
            });
        }
        rho.at_mut(node).copy_from_slice(sol.rho.as_slice());
        if sol.residual > opts.tol {
            zeta.at_mut(node).copy_from_slice(sol.kernel_drift.as_slice());
            arbitrage_nodes.push(node);
        } else {
            max_residual = max_residual.max(sol.residual);
        }
        let step_mass = sol.rho.dot(&(&c * &sol.rho)) * ch.clock(node);
        let base = mass.value(node);
        for &child in tree.children(node) {
            mass.at_mut(child)[0] = base + step_mass;
        }
    }

    let mass_max = mass.raw().iter().cloned().fold(0.0, f64::max);
    let status = if arbitrage_nodes.is_empty() {
        StructureStatus::Solvable
    } else {
        StructureStatus::Arbitrage
    };
    Ok(StructureReport {
        status,
        rho: (status == StructureStatus::Solvable).then_some(rho),
        zeta: (status == StructureStatus::Arbitrage).then_some(zeta),
        arbitrage_nodes,
        mass,
        mass_max,
        mass_flag: mass_max > opts.mass_threshold,
        max_residual,
    })
}

/// Extracts characteristics and solves the structure condition in one go.
pub fn analyze(tree: &EventTree, x: &AdaptedProcess, opts: StructureOptions) -> Result<StructureReport> {
    let ch = extract_characteristics(tree, x)?;
    solve_structure(tree, &ch, opts)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{a1, b1, t1};
    use crate::probtree::{build_tree, Branching};

    #[test]
    fn b1_and_t1_characteristics() {
        let m = b1();
        let ch = extract_characteristics(&m.tree, &m.x).unwrap();
        assert!((ch.drift(0)[0] - 0.02).abs() < 1e-15);
        assert!((ch.covariance(0)[(0, 0)] - 0.0096).abs() < 1e-15);
        assert_eq!(ch.clock(0), 1.0);

        let m = t1();
        let ch = extract_characteristics(&m.tree, &m.x).unwrap();
        assert!(ch.drift(0)[0].abs() < 1e-15);
        assert!((ch.covariance(0)[(0, 0)] - 0.02 / 3.0).abs() < 1e-15);
    }

    #[test]
    fn deterministic_increment_has_zero_covariance() {
        let tree = build_tree(&Branching::Uniform {
            horizon: 1,
            p: vec![0.3, 0.3, 0.4],
        })
        .unwrap();
        let x = AdaptedProcess::scalar(&tree, vec![0.5, 0.75, 0.75, 0.75]).unwrap();
        let ch = extract_characteristics(&tree, &x).unwrap();
        assert_eq!(ch.covariance(0)[(0, 0)], 0.0);
        assert_eq!(ch.drift(0)[0], 0.25);
    }

    #[test]
    fn identity_and_rank_one_steps() {
        let sol = solve_step(
            &DVector::from_vec(vec![0.3, -0.1]),
            &DMatrix::identity(2, 2),
            DEFAULT_TOL,
        );
        assert!((sol.rho[0] - 0.3).abs() < 1e-15 && (sol.rho[1] + 0.1).abs() < 1e-15);

        let c = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        let sol = solve_step(&DVector::from_vec(vec![1.0, 1.0]), &c, DEFAULT_TOL);
        assert!((sol.rho[0] - 0.5).abs() < 1e-14 && (sol.rho[1] - 0.5).abs() < 1e-14);
        assert!(sol.residual < 1e-14);
    }

    #[test]
    fn kernel_direction_is_an_arbitrage() {
        let c = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0]);
        let a = DVector::from_vec(vec![0.0, 1.0]);
        let sol = solve_step(&a, &c, DEFAULT_TOL);
        assert_eq!(sol.kernel_drift.as_slice(), &[0.0, 1.0]);
        assert!(sol.residual > DEFAULT_TOL);
    }

    #[test]
    fn a1_report() {
        let m = a1();
        let report = analyze(&m.tree, &m.x, StructureOptions::default()).unwrap();
        assert_eq!(report.status, StructureStatus::Arbitrage);
        assert_eq!(report.arbitrage_nodes, vec![0]);
        let zeta = report.zeta.unwrap();
        assert_eq!(zeta.at(0), &[0.0, 1.0]);
        assert!(report.rho.is_none());
    }

    #[test]
    fn b1_report_mass() {
        let m = b1();
        let report = analyze(&m.tree, &m.x, StructureOptions::default()).unwrap();
        assert_eq!(report.status, StructureStatus::Solvable);
        let rho = report.rho.unwrap();
        assert!((rho.value(0) - 0.02 / 0.0096).abs() < 1e-12);
        // ⟨ρ, cρ⟩ = a² / c
        assert!((report.mass_max - 0.0004 / 0.0096).abs() < 1e-12);
        assert!(!report.mass_flag);
    }

    #[test]
    fn non_psd_input_is_rejected() {
        let m = b1();
        let mut ch = extract_characteristics(&m.tree, &m.x).unwrap();
        ch.c.at_mut(0)[0] = -1.0;
        let err = solve_structure(&m.tree, &ch, StructureOptions::default()).unwrap_err();
        assert!(matches!(err, OdxError::NotPsd { node: 0, .. }));
    }
}

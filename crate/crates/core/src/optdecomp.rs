//! Optional decomposition `V = V(0) + ∫⟨H, dX⟩ − C` on event trees.
//!
//! [`is_supermartingale_under_all`] tests the hypothesis node by node over
//! the martingale-measure polytope. Two constructions produce `(H, C)`:
//!
//! * [`decompose_lp`] superhedges each one-step value from the polytope
//!   supremum with the minimum-norm hedge. It works on every node.
//! * [`decompose_kw`] deflates by the numéraire, projects onto the market
//!   increments and splits off a monotone drift. On nodes that are not
//!   complete the orthogonal residual does not vanish, so those nodes fall
//!   back to the LP rule and are listed in the diagnostics.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::deflators::{DeflatorFamily, Numeraire};
use crate::error::{OdxError, Result};
use crate::linalg::{least_distance, span_split, PsdSplit};
use crate::lp::polytope_sup;
use crate::probtree::{stochastic_integral, AdaptedProcess, EventTree, PredictableProcess};

/// Tolerance of the supermartingale test and of the sign of `ΔC`.
pub const SUPERMARTINGALE_TOL: f64 = 1e-10;
/// Tolerance of [`check_uniqueness`].
pub const UNIQUENESS_TOL: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Verdict {
    Pass,
    Fail,
}

/// Evidence that `V` is not a supermartingale for the whole family.
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Witness {
    /// A one-step martingale measure under which `V` drifts upward.
    Measure { node: usize, q: Vec<f64>, violation: f64 },
    /// A family deflator `Y` with `Σ p Δ(Y V) > 0` at `node`.
    Deflator { index: usize, node: usize, violation: f64 },
}

/// Per-node supremum of the next value over the closed polytope.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NodeSup {
    pub node: usize,
    pub sup: f64,
    /// A vertex measure attaining the supremum.
    pub q: Vec<f64>,
    /// `V(node) − sup`; nonnegative on a pass.
    pub gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Certificate {
    pub verdict: Verdict,
    pub witness: Option<Witness>,
    pub nodes: Vec<NodeSup>,
}

fn check_scalar(tree: &EventTree, v: &AdaptedProcess, x: &AdaptedProcess) -> Result<()> {
    v.check_tree(tree)?;
    x.check_tree(tree)?;
    if v.dim() != 1 {
        return Err(OdxError::Dimension {
            expected: 1,
            got: v.dim(),
        });
    }
    if let Some(i) = v.raw().iter().position(|x| !x.is_finite()) {
        return Err(OdxError::InvalidInput(format!("value at node {i} is not finite")));
    }
    Ok(())
}

fn node_sup(tree: &EventTree, v: &AdaptedProcess, x: &AdaptedProcess, node: usize) -> Result<NodeSup> {
    let incs = x.child_increments(tree, node);
    let values: Vec<f64> = tree.children(node).iter().map(|&c| v.value(c)).collect();
    let opt = polytope_sup(&incs, &values).ok_or_else(|| OdxError::Arbitrage {
        node,
        detail: "no martingale measure at this node".into(),
    })?;
    Ok(NodeSup {
        node,
        sup: opt.value,
        q: opt.q,
        gap: v.value(node) - opt.value,
    })
}

/// Tests whether `Y·V` is a supermartingale for every deflator `Y`, through
/// the closed one-step martingale-measure polytope at each node and, when a
/// family is supplied, directly for each of its members.
pub fn is_supermartingale_under_all(
    tree: &EventTree,
    v: &AdaptedProcess,
    x: &AdaptedProcess,
    family: Option<&DeflatorFamily>,
    tol: f64,
) -> Result<Certificate> {
    check_scalar(tree, v, x)?;
    let mut nodes = Vec::new();
    let mut worst: Option<(f64, usize)> = None;
    for node in tree.inner_nodes() {
        let ns = node_sup(tree, v, x, node)?;
        let violation = -ns.gap;
        if violation > tol && worst.is_none_or(|(w, _)| violation > w) {
            worst = Some((violation, nodes.len()));
        }
        nodes.push(ns);
    }
    if let Some((violation, k)) = worst {
        let ns = &nodes[k];
        let witness = Witness::Measure {
            node: ns.node,
            q: ns.q.clone(),
            violation,
        };
        return Ok(Certificate {
            verdict: Verdict::Fail,
            witness: Some(witness),
            nodes,
        });
    }
    if let Some(fam) = family {
        for (index, y) in fam.deflators().enumerate() {
            for node in tree.inner_nodes() {
                let yv0 = y.value(node) * v.value(node);
                let drift: f64 = tree
                    .children(node)
                    .iter()
                    .zip(tree.child_probs(node))
                    .map(|(&c, p)| p * (y.value(c) * v.value(c) - yv0))
                    .sum();
                if drift > tol * yv0.abs().max(1.0) {
                    return Ok(Certificate {
                        verdict: Verdict::Fail,
                        witness: Some(Witness::Deflator {
                            index,
                            node,
                            violation: drift,
                        }),
                        nodes,
                    });
                }
            }
        }
    }
    Ok(Certificate {
        verdict: Verdict::Pass,
        witness: None,
        nodes,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum Route {
    Lp,
    Kw,
}

/// Side products of a decomposition.
#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub route: Route,
    /// Projection coefficients of the deflated value (KW route).
    pub theta: Option<PredictableProcess>,
    /// Deflated drift `B` (KW route).
    pub b: Option<AdaptedProcess>,
    /// Largest per-node residual norm `(E_q ΔN²)^{1/2}` (KW route).
    pub n_norm: f64,
    /// Per-node residual norms, zero at leaves.
    pub node_n_norm: Vec<f64>,
    /// Smallest `ΔB` over the nodes decomposed by projection.
    pub min_db: f64,
    /// Largest `V(node) − sup_q E_q[V(child)]`.
    pub duality_gap: f64,
    /// Nodes handled by the LP rule inside the KW route.
    pub deferred_nodes: Vec<usize>,
    /// Binding polytope vertex per LP-decomposed node.
    pub binding: Vec<(usize, Vec<f64>)>,
}

impl Diagnostics {
    fn empty(route: Route, n: usize) -> Self {
        Self {
            route,
            theta: None,
            b: None,
            n_norm: 0.0,
            node_n_norm: vec![0.0; n],
            min_db: f64::INFINITY,
            duality_gap: 0.0,
            deferred_nodes: Vec::new(),
            binding: Vec::new(),
        }
    }
}

/// `V = V0 + ∫⟨H, dX⟩ − C` with `C(0) = 0` nondecreasing.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub v0: f64,
    pub h: PredictableProcess,
    pub c: AdaptedProcess,
    pub diagnostics: Diagnostics,
}

impl Decomposition {
    /// Smallest consumption increment over all steps.
    pub fn min_dc(&self, tree: &EventTree) -> f64 {
        tree.nodes()
            .iter()
            .skip(1)
            .map(|n| self.c.value(n.id) - self.c.value(n.parent.expect("non-root")))
            .fold(f64::INFINITY, f64::min)
    }
}

/// Options for [`decompose_lp`].
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct LpOptions {
    /// Adds a seeded component orthogonal to every increment to each `H`;
    /// the integral `∫⟨H, dX⟩` and `C` are unaffected.
    pub tie_break_seed: Option<u64>,
}

struct NodeHedge {
    h: DVector<f64>,
    dc: Vec<f64>,
    gap: f64,
    q: Vec<f64>,
}

fn lp_node(
    tree: &EventTree,
    v: &AdaptedProcess,
    x: &AdaptedProcess,
    node: usize,
    rng: Option<&mut ChaCha8Rng>,
) -> Result<NodeHedge> {
    let ns = node_sup(tree, v, x, node)?;
    if ns.gap < -SUPERMARTINGALE_TOL {
        return Err(OdxError::Internal {
            node,
            detail: format!("value lies {:e} below the polytope supremum", -ns.gap),
        });
    }
    let gap = ns.gap.max(0.0);
    let incs = x.child_increments(tree, node);
    let d = x.dim();
    let vn = v.value(node);
    let dv: Vec<f64> = tree.children(node).iter().map(|&c| v.value(c) - vn).collect();
    let scale = dv.iter().fold(vn.abs(), |m, a| m.max(a.abs())).max(1.0);
    let eps = 1e-12 * scale;

    let g = DMatrix::from_fn(incs.len(), d, |j, i| incs[j][i]);
    let rhs = DVector::from_iterator(incs.len(), dv.iter().map(|a| a + gap - eps));
    let mut h = least_distance(&g, &rhs).ok_or_else(|| OdxError::Internal {
        node,
        detail: "no superhedging hedge despite a passing supremum".into(),
    })?;
    let exact: Vec<f64> = dv.iter().map(|a| a + gap).collect();
    if let Some(polished) = polish_active(&g, &h, &exact, 1e3 * eps) {
        h = polished;
    }
    if let Some(rng) = rng {
        let kernel = span_split(&incs, d, 1e-12).kernel;
        if kernel.ncols() > 0 {
            let z = DVector::from_fn(kernel.ncols(), |_, _| StandardNormal.sample(&mut *rng));
            h += &kernel * z;
        }
    }
    let dc = incs.iter().zip(&dv).map(|(inc, dvj)| h.dot(inc) - dvj).collect();
    Ok(NodeHedge { h, dc, gap, q: ns.q })
}

/// Minimum-norm solution of the constraints active at `h`, held as
/// equalities; `None` unless it stays feasible for every constraint.
fn polish_active(g: &DMatrix<f64>, h: &DVector<f64>, rhs: &[f64], band: f64) -> Option<DVector<f64>> {
    let size = |h: &DVector<f64>| {
        let terms = g.abs() * h.abs();
        rhs.iter()
            .zip(terms.iter())
            .fold(1.0_f64, |m, (r, t)| m.max(r.abs()).max(*t))
    };
    let lhs = g * h;
    let band = band.max(1e-9 * size(h));
    let active: Vec<usize> = (0..rhs.len()).filter(|&j| lhs[j] - rhs[j] <= band).collect();
    if active.is_empty() {
        return None;
    }
    let sub = DMatrix::from_fn(active.len(), g.ncols(), |r, i| g[(active[r], i)]);
    let b = DVector::from_iterator(active.len(), active.iter().map(|&j| rhs[j]));
    let cand = sub.clone().svd(true, true).solve(&b, 1e-12).ok()?;
    let fit = (&sub * &cand - &b).amax();
    let slack = (g * &cand)
        .iter()
        .zip(rhs)
        .map(|(l, r)| l - r)
        .fold(f64::INFINITY, f64::min);
    let tiny = 1e-13 * size(&cand);
    (fit <= tiny && slack >= -tiny).then_some(cand)
}

fn apply_node(tree: &EventTree, node: usize, hedge: &NodeHedge, h: &mut PredictableProcess, c: &mut AdaptedProcess) {
    h.at_mut(node).copy_from_slice(hedge.h.as_slice());
    let base = c.value(node);
    for (&child, dc) in tree.children(node).iter().zip(&hedge.dc) {
        c.at_mut(child)[0] = base + dc;
    }
}

/// Superhedging construction: at each node, the minimum-norm `H` with
/// `⟨H, ΔX⟩ ≥ V(child) − sup_q E_q[V(child)]` on every branch, and
/// `ΔC = ⟨H, ΔX⟩ − ΔV`.
pub fn decompose_lp(
    tree: &EventTree,
    v: &AdaptedProcess,
    x: &AdaptedProcess,
    opts: LpOptions,
) -> Result<Decomposition> {
    check_scalar(tree, v, x)?;
    let mut rng = opts.tie_break_seed.map(ChaCha8Rng::seed_from_u64);
    let mut h = PredictableProcess::zeros(tree, x.dim());
    let mut c = AdaptedProcess::zeros(tree, 1);
    let mut diag = Diagnostics::empty(Route::Lp, tree.len());
    for node in tree.inner_nodes() {
        let hedge = lp_node(tree, v, x, node, rng.as_mut())?;
        apply_node(tree, node, &hedge, &mut h, &mut c);
        diag.duality_gap = diag.duality_gap.max(hedge.gap);
        diag.binding.push((node, hedge.q));
    }
    Ok(Decomposition {
        v0: v.value(0),
        h,
        c,
        diagnostics: diag,
    })
}

/// Projection construction along the deflated value `U = V/V̂`.
///
/// With `w = 1 + ⟨ρ̂, ΔX⟩` and the one-step measure `q ∝ p/w`, the scaled
/// increment `wΔU` is regressed on `ΔX` under `q`:
/// `wΔU = ⟨θ, ΔX⟩ − ΔB + ΔN`, `E_q ΔN = 0`, `E_q[ΔN ΔX] = 0`.
/// Then `H = V̂(U ρ̂ + θ)` and `ΔC = V̂(ΔB − ΔN)`. Nodes whose increments do
/// not span a complete one-step market are decomposed by the LP rule.
pub fn decompose_kw(
    tree: &EventTree,
    v: &AdaptedProcess,
    x: &AdaptedProcess,
    numeraire: &Numeraire,
    tol: f64,
) -> Result<Decomposition> {
    check_scalar(tree, v, x)?;
    let d = x.dim();
    let v_hat = &numeraire.v_hat;
    let u = v.zip_with(v_hat, 1, |a, b| vec![a[0] / b[0]])?;
    let mut h = PredictableProcess::zeros(tree, d);
    let mut theta = PredictableProcess::zeros(tree, d);
    let mut b = AdaptedProcess::zeros(tree, 1);
    let mut c = AdaptedProcess::zeros(tree, 1);
    let mut diag = Diagnostics::empty(Route::Kw, tree.len());

    for node in tree.inner_nodes() {
        let children = tree.children(node);
        let m = children.len();
        let incs = x.child_increments(tree, node);
        let rho = numeraire.rho_hat.vector(node);
        let vh = v_hat.value(node);
        let un = u.value(node);
        let w: Vec<f64> = incs.iter().map(|dx| 1.0 + rho.dot(dx)).collect();
        let raw_q: Vec<f64> = tree.child_probs(node).iter().zip(&w).map(|(p, wj)| p / wj).collect();
        let qsum: f64 = raw_q.iter().sum();
        let q: Vec<f64> = raw_q.iter().map(|a| a / qsum).collect();
        let wdu: Vec<f64> = children
            .iter()
            .zip(&w)
            .map(|(&ch, wj)| wj * (u.value(ch) - un))
            .collect();

        let xbar = incs
            .iter()
            .zip(&q)
            .fold(DVector::zeros(d), |acc, (dx, qj)| acc + dx * *qj);
        let wbar: f64 = wdu.iter().zip(&q).map(|(a, qj)| a * qj).sum();
        let mut var = DMatrix::zeros(d, d);
        let mut cov = DVector::zeros(d);
        for ((dx, wj), qj) in incs.iter().zip(&wdu).zip(&q) {
            let cdx = dx - &xbar;
            var += &cdx * cdx.transpose() * *qj;
            cov += &cdx * ((wj - wbar) * qj);
        }
        let split = PsdSplit::new(&var, tol);
        let mut th = split.solve(&cov);
        for _ in 0..2 {
            let r: Vec<f64> = incs.iter().zip(&wdu).map(|(dx, wj)| wj - th.dot(dx)).collect();
            let rbar: f64 = r.iter().zip(&q).map(|(a, qj)| a * qj).sum();
            let mut cov_r = DVector::zeros(d);
            for ((dx, rj), qj) in incs.iter().zip(&r).zip(&q) {
                cov_r += (dx - &xbar) * ((rj - rbar) * qj);
            }
            th += split.solve(&cov_r);
        }
        let resid: Vec<f64> = incs.iter().zip(&wdu).map(|(dx, wj)| wj - th.dot(dx)).collect();
        let rbar: f64 = resid.iter().zip(&q).map(|(r, qj)| r * qj).sum();
        let db = -rbar;
        let dn: Vec<f64> = resid.iter().map(|r| r - rbar).collect();
        let n_norm = dn.iter().zip(&q).map(|(a, qj)| qj * a * a).sum::<f64>().sqrt();

        theta.at_mut(node).copy_from_slice(th.as_slice());
        let bn = b.value(node);
        for &ch in children {
            b.at_mut(ch)[0] = bn + db;
        }
        diag.node_n_norm[node] = n_norm;
        diag.n_norm = diag.n_norm.max(n_norm);

        let complete = split.rank() + 1 == m;
        if complete {
            let hn = (&rho * un + &th) * vh;
            h.at_mut(node).copy_from_slice(hn.as_slice());
            let cn = c.value(node);
            for (&ch, dnj) in children.iter().zip(&dn) {
                c.at_mut(ch)[0] = cn + vh * (db - dnj);
            }
            diag.min_db = diag.min_db.min(db);
            let sup = node_sup(tree, v, x, node)?;
            diag.duality_gap = diag.duality_gap.max(sup.gap);
        } else {
            let hedge = lp_node(tree, v, x, node, None)?;
            apply_node(tree, node, &hedge, &mut h, &mut c);
            diag.duality_gap = diag.duality_gap.max(hedge.gap);
            diag.binding.push((node, hedge.q));
            diag.deferred_nodes.push(node);
        }
    }
    diag.theta = Some(theta);
    diag.b = Some(b);
    Ok(Decomposition {
        v0: v.value(0),
        h,
        c,
        diagnostics: diag,
    })
}

/// `V0 + ∫⟨H, dX⟩ − C`.
pub fn reconstruct(
    tree: &EventTree,
    v0: f64,
    h: &PredictableProcess,
    c: &AdaptedProcess,
    x: &AdaptedProcess,
) -> Result<AdaptedProcess> {
    c.check_tree(tree)?;
    let gains = stochastic_integral(tree, h, x)?;
    gains.zip_with(c, 1, |g, cc| vec![v0 + g[0] - cc[0]])
}

/// Result of [`check_uniqueness`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub pass: bool,
    pub max_c_diff: f64,
    pub max_gain_diff: f64,
    /// Largest `|H₁ − H₂|` component; informative only.
    pub max_h_diff: f64,
}

/// Compares two decompositions of the same value process: `C` and the
/// gains `∫⟨H, dX⟩` must agree, `H` itself need not.
pub fn check_uniqueness(
    tree: &EventTree,
    d1: &Decomposition,
    d2: &Decomposition,
    x: &AdaptedProcess,
    tol: f64,
) -> Result<UniquenessReport> {
    if (d1.v0 - d2.v0).abs() > tol {
        return Err(OdxError::DifferentValue((d1.v0 - d2.v0).abs()));
    }
    let g1 = stochastic_integral(tree, &d1.h, x)?;
    let g2 = stochastic_integral(tree, &d2.h, x)?;
    d1.c.check_tree(tree)?;
    d2.c.check_tree(tree)?;
    let max_c_diff = d1.c.max_abs_diff(&d2.c);
    let max_gain_diff = g1.max_abs_diff(&g2);
    Ok(UniquenessReport {
        pass: max_c_diff <= tol && max_gain_diff <= tol,
        max_c_diff,
        max_gain_diff,
        max_h_diff: d1.h.max_abs_diff(&d2.h),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::deflators::{numeraire_portfolio, FamilyOptions};
    use crate::model::{b1, t1};
    use crate::probtree::{build_tree, Branching};

    fn t1_value(v0: f64) -> AdaptedProcess {
        let m = t1();
        AdaptedProcess::scalar(&m.tree, vec![v0, 1.0, 0.0, 1.0]).unwrap()
    }

    fn b1_claim() -> AdaptedProcess {
        let m = b1();
        AdaptedProcess::scalar(&m.tree, vec![0.15, 0.06, 0.24]).unwrap()
    }

    #[test]
    fn t1_certificate() {
        let m = t1();
        let cert = is_supermartingale_under_all(&m.tree, &t1_value(1.0), &m.x, None, SUPERMARTINGALE_TOL).unwrap();
        assert_eq!(cert.verdict, Verdict::Pass);
        let q = &cert.nodes[0].q;
        assert!((q[0] - 0.5).abs() < 1e-15 && q[1].abs() < 1e-15 && (q[2] - 0.5).abs() < 1e-15);

        let cert = is_supermartingale_under_all(&m.tree, &t1_value(0.9), &m.x, None, SUPERMARTINGALE_TOL).unwrap();
        assert_eq!(cert.verdict, Verdict::Fail);
        match cert.witness.unwrap() {
            Witness::Measure { node, violation, .. } => {
                assert_eq!(node, 0);
                assert!((violation - 0.1).abs() < 1e-12);
            }
            other => panic!("unexpected witness {other:?}"),
        }
    }

    #[test]
    fn martingale_passes_with_family() {
        let m = t1();
        let v = AdaptedProcess::scalar(&m.tree, vec![0.5, 0.7, 0.5, 0.3]).unwrap();
        let fam = DeflatorFamily::build(&m.tree, &m.x, FamilyOptions::default()).unwrap();
        let cert = is_supermartingale_under_all(&m.tree, &v, &m.x, Some(&fam), SUPERMARTINGALE_TOL).unwrap();
        assert_eq!(cert.verdict, Verdict::Pass);
    }

    #[test]
    fn t1_lp_decomposition() {
        let m = t1();
        let v = t1_value(1.0);
        let dec = decompose_lp(&m.tree, &v, &m.x, LpOptions::default()).unwrap();
        assert!(dec.h.value(0).abs() < 1e-9);
        for (node, expect) in [(1, 0.0), (2, 1.0), (3, 0.0)] {
            assert!((dec.c.value(node) - expect).abs() < 1e-9);
        }
        let back = reconstruct(&m.tree, dec.v0, &dec.h, &dec.c, &m.x).unwrap();
        assert!(back.max_abs_diff(&v) < 1e-12);
    }

    #[test]
    fn b1_routes_agree() {
        let m = b1();
        let v = b1_claim();
        let lp = decompose_lp(&m.tree, &v, &m.x, LpOptions::default()).unwrap();
        assert!((lp.h.value(0) + 0.9).abs() < 1e-9);
        assert!(lp.c.raw().iter().all(|c| c.abs() < 1e-9));

        let num = numeraire_portfolio(&m.tree, &m.x).unwrap();
        let kw = decompose_kw(&m.tree, &v, &m.x, &num, 1e-10).unwrap();
        assert!((kw.h.value(0) + 0.9).abs() < 1e-12);
        assert!(kw.diagnostics.n_norm < 1e-10);
        assert!(kw.diagnostics.deferred_nodes.is_empty());
        let rep = check_uniqueness(&m.tree, &lp, &kw, &m.x, UNIQUENESS_TOL).unwrap();
        assert!(rep.pass, "{rep:?}");
    }

    #[test]
    fn t1_kw_defers() {
        let m = t1();
        let num = numeraire_portfolio(&m.tree, &m.x).unwrap();
        let kw = decompose_kw(&m.tree, &t1_value(1.0), &m.x, &num, 1e-10).unwrap();
        assert!((kw.diagnostics.n_norm - (2.0_f64 / 9.0).sqrt()).abs() < 1e-12);
        assert_eq!(kw.diagnostics.deferred_nodes, vec![0]);
        assert!(kw.diagnostics.theta.unwrap().value(0).abs() < 1e-15);
        assert!((kw.c.value(2) - 1.0).abs() < 1e-9);
    }

    #[test]
    fn self_deflation() {
        let m = b1();
        let num = numeraire_portfolio(&m.tree, &m.x).unwrap();
        let kw = decompose_kw(&m.tree, &num.v_hat, &m.x, &num, 1e-10).unwrap();
        assert!(kw.diagnostics.theta.unwrap().value(0).abs() < 1e-12);
        assert!(kw.c.raw().iter().all(|c| c.abs() < 1e-12));
        assert!((kw.h.value(0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn constant_value() {
        let m = t1();
        let v = AdaptedProcess::scalar(&m.tree, vec![2.0; 4]).unwrap();
        let dec = decompose_lp(&m.tree, &v, &m.x, LpOptions::default()).unwrap();
        assert!(dec.h.value(0).abs() < 1e-12);
        assert!(dec.c.raw().iter().all(|c| c.abs() < 1e-11));
    }

    #[test]
    fn tie_break_leaves_gains_unchanged() {
        // Second asset is a copy of the first, so H has a free direction.
        let tree = build_tree(&Branching::Uniform {
            horizon: 1,
            p: vec![1.0 / 3.0; 3],
        })
        .unwrap();
        let x = AdaptedProcess::from_rows(
            &tree,
            vec![vec![0.0, 0.0], vec![0.1, 0.1], vec![0.0, 0.0], vec![-0.1, -0.1]],
        )
        .unwrap();
        let v = AdaptedProcess::scalar(&tree, vec![1.0, 1.0, 0.0, 1.0]).unwrap();
        let a = decompose_lp(
            &tree,
            &v,
            &x,
            LpOptions {
                tie_break_seed: Some(1),
            },
        )
        .unwrap();
        let b = decompose_lp(
            &tree,
            &v,
            &x,
            LpOptions {
                tie_break_seed: Some(2),
            },
        )
        .unwrap();
        let rep = check_uniqueness(&tree, &a, &b, &x, UNIQUENESS_TOL).unwrap();
        assert!(rep.pass);
        assert!(rep.max_h_diff > 1e-3);
    }

    #[test]
    fn tampered_consumption_fails_uniqueness() {
        let m = t1();
        let dec = decompose_lp(&m.tree, &t1_value(1.0), &m.x, LpOptions::default()).unwrap();
        let mut other = dec.clone();
        other.c.at_mut(3)[0] += 0.01;
        let rep = check_uniqueness(&m.tree, &dec, &other, &m.x, UNIQUENESS_TOL).unwrap();
        assert!(!rep.pass);
        other.v0 += 1.0;
        assert!(matches!(
            check_uniqueness(&m.tree, &dec, &other, &m.x, UNIQUENESS_TOL),
            Err(OdxError::DifferentValue(_))
        ));
    }

    #[test]
    fn zero_hedge_reconstructs_constant() {
        let m = t1();
        let h = PredictableProcess::zeros(&m.tree, 1);
        let c = AdaptedProcess::zeros(&m.tree, 1);
        let v = reconstruct(&m.tree, 3.5, &h, &c, &m.x).unwrap();
        assert!(v.raw().iter().all(|&a| a == 3.5));
    }
}

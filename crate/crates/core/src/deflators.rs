//! Stochastic exponentials, the numéraire portfolio and local martingale
//! deflators on event trees.
//!
//! The numéraire portfolio `ρ̂` is found node by node by maximizing expected
//! log-return, so that `Ŷ = 1/V̂` is an exact martingale deflator. Further
//! deflators are products `Ŷ·E(L)` with `L` a jump martingale orthogonal to
//! the deflated market.

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::error::{OdxError, Result};
use crate::linalg::{span_split, PsdSplit};
use crate::lp::max_min_weight;
use crate::probtree::{doob_decompose, AdaptedProcess, EventTree, PredictableProcess};

/// Residual bound for the first-order condition of the log-optimal step.
pub const NEWTON_TOL: f64 = 1e-12;
pub const NEWTON_MAX_ITER: usize = 100;
/// A node whose best martingale measure has a weight this small is treated
/// as admitting arbitrage.
pub const MIN_EMM_WEIGHT: f64 = 1e-12;
/// Default tolerance of [`verify_deflator`].
pub const DEFLATOR_TOL: f64 = 1e-10;

/// How [`stochastic_exponential`] treats a jump of `−1`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExpMode {
    /// Every jump must exceed `−1`, so the result is strictly positive.
    Strict,
    /// A jump of exactly `−1` sends the exponential to 0, where it stays.
    Absorbing,
}

/// Doléans-Dade exponential of a scalar process on a tree:
/// `E(Z)(node) = Π_path (1 + ΔZ)`.
pub fn stochastic_exponential(tree: &EventTree, z: &AdaptedProcess, mode: ExpMode) -> Result<AdaptedProcess> {
    z.check_tree(tree)?;
    if z.dim() != 1 {
        return Err(OdxError::Dimension {
            expected: 1,
            got: z.dim(),
        });
    }
    if z.value(0) != 0.0 {
        return Err(OdxError::NonzeroStart(z.value(0)));
    }
    let mut out = AdaptedProcess::zeros(tree, 1);
    out.at_mut(0)[0] = 1.0;
    for node in tree.nodes().iter().skip(1) {
        let parent = node.parent.expect("non-root node has a parent");
        let prev = out.value(parent);
        let jump = z.value(node.id) - z.value(parent);
        let value = if prev == 0.0 && mode == ExpMode::Absorbing {
            0.0
        } else {
            let too_low = match mode {
                ExpMode::Strict => jump <= -1.0,
                ExpMode::Absorbing => jump < -1.0,
            };
            if too_low {
                return Err(OdxError::JumpTooNegative { node: node.id, jump });
            }
            prev * (1.0 + jump)
        };
        out.at_mut(node.id)[0] = value;
    }
    Ok(out)
}

/// Log-optimal portfolio over a single step with child increments `incs`
/// and probabilities `probs`.
///
/// Solves `Σ p ΔX / (1 + ⟨ρ, ΔX⟩) = 0` by damped Newton iteration inside the
/// span of the increments; the returned `ρ` has no component orthogonal to
/// that span.
pub fn numeraire_step(node: usize, probs: &[f64], incs: &[DVector<f64>]) -> Result<DVector<f64>> {
    let d = incs.first().map_or(0, |v| v.len());
    let span = span_split(incs, d, 1e-12);
    let r = span.rank();
    if r == 0 {
        return Ok(DVector::zeros(d));
    }
    match max_min_weight(incs) {
        Some((t, _)) if t > MIN_EMM_WEIGHT => {}
        Some((t, _)) => {
            return Err(OdxError::Arbitrage {
                node,
                detail: format!("no equivalent martingale measure (best minimum weight {t:e})"),
            })
        }
        None => {
            return Err(OdxError::Arbitrage {
                node,
                detail: "no martingale measure".into(),
            })
        }
    }

    let basis = &span.range;
    let ys: Vec<DVector<f64>> = incs.iter().map(|v| basis.transpose() * v).collect();
    let objective = |beta: &DVector<f64>| -> Option<f64> {
        let mut f = 0.0;
        for (p, y) in probs.iter().zip(&ys) {
            let w = 1.0 + beta.dot(y);
            if w <= 0.0 {
                return None;
            }
            f += p * w.ln();
        }
        Some(f)
    };

    let derivatives = |beta: &DVector<f64>| {
        let mut grad = DVector::zeros(r);
        let mut hess = DMatrix::zeros(r, r);
        for (p, y) in probs.iter().zip(&ys) {
            let w = 1.0 + beta.dot(y);
            grad += y * (p / w);
            hess += y * y.transpose() * (p / (w * w));
        }
        (grad, hess)
    };
    let newton_step = |grad: &DVector<f64>, hess: DMatrix<f64>| match hess.clone().cholesky() {
        Some(ch) => ch.solve(grad),
        None => PsdSplit::new(&hess, 1e-14).solve(grad),
    };

    let mut beta = DVector::zeros(r);
    let mut residual = f64::INFINITY;
    for _ in 0..NEWTON_MAX_ITER {
        let (grad, hess) = derivatives(&beta);
        residual = (basis * &grad).amax();
        if residual <= NEWTON_TOL {
            // Full steps from here converge quadratically; keep them while
            // they still help.
            for _ in 0..4 {
                let trial = &beta + newton_step(&grad, hess.clone());
                if objective(&trial).is_none() {
                    break;
                }
                let (g, _) = derivatives(&trial);
                let res = (basis * &g).amax();
                if res >= residual {
                    break;
                }
                beta = trial;
                residual = res;
                if res == 0.0 {
                    break;
                }
            }
            return Ok(basis * beta);
        }
        let step = newton_step(&grad, hess);
        let decrement = grad.dot(&step);
        let f0 = objective(&beta).expect("current iterate is solvent");
        let mut t = 1.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial = &beta + &step * t;
            if let Some(f) = objective(&trial) {
                // Below ~1e-10 the objective change is lost to rounding.
                if decrement <= 1e-10 || f >= f0 + 1e-4 * t * decrement {
                    beta = trial;
                    accepted = true;
                    break;
                }
            }
            t *= 0.5;
        }
        if !accepted {
            break;
        }
    }
    Err(OdxError::NoConvergence { node, residual })
}

/// The numéraire portfolio `ρ̂` and its wealth `V̂ = E(∫⟨ρ̂, dX⟩)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Numeraire {
    pub rho_hat: PredictableProcess,
    pub v_hat: AdaptedProcess,
}

impl Numeraire {
    /// `Ŷ = 1/V̂`.
    pub fn y_hat(&self) -> AdaptedProcess {
        self.v_hat.map(1, |v| vec![1.0 / v[0]])
    }

    /// Child weights `p·Ŷ(child)/Ŷ(node)`: the one-step martingale measure
    /// induced by the numéraire.
    pub fn implied_measure(&self, tree: &EventTree, node: usize) -> Vec<f64> {
        let v = self.v_hat.value(node);
        tree.children(node)
            .iter()
            .zip(tree.child_probs(node))
            .map(|(&c, p)| p * v / self.v_hat.value(c))
            .collect()
    }
}

pub fn numeraire_portfolio(tree: &EventTree, x: &AdaptedProcess) -> Result<Numeraire> {
    x.check_tree(tree)?;
    let mut rho_hat = PredictableProcess::zeros(tree, x.dim());
    let mut v_hat = AdaptedProcess::zeros(tree, 1);
    v_hat.at_mut(0)[0] = 1.0;
    for node in tree.inner_nodes() {
        let incs = x.child_increments(tree, node);
        let rho = numeraire_step(node, &tree.child_probs(node), &incs)?;
        let base = v_hat.value(node);
        for (&c, dx) in tree.children(node).iter().zip(&incs) {
            v_hat.at_mut(c)[0] = base * (1.0 + rho.dot(dx));
        }
        rho_hat.at_mut(node).copy_from_slice(rho.as_slice());
    }
    Ok(Numeraire { rho_hat, v_hat })
}

/// Shape of the random jump martingales.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct JumpOptions {
    /// Largest jump magnitude before the floor is applied.
    pub scale: f64,
    /// Jumps are kept at or above `−1 + margin`.
    pub margin: f64,
}

impl Default for JumpOptions {
    fn default() -> Self {
        Self {
            scale: 0.5,
            margin: 0.1,
        }
    }
}

/// Basis of `{ΔL : Σ w ΔL = 0, Σ w ΔL ΔMᵀ = 0}` at one node.
fn orthogonal_jump_basis(weights: &[f64], incs: &[DVector<f64>]) -> DMatrix<f64> {
    let m = weights.len();
    let d = incs.first().map_or(0, |v| v.len());
    let mut k = DMatrix::zeros(d + 1, m);
    for (j, (w, v)) in weights.iter().zip(incs).enumerate() {
        k[(0, j)] = *w;
        for i in 0..d {
            k[(i + 1, j)] = w * v[i];
        }
    }
    for mut row in k.row_iter_mut() {
        let s = row.amax();
        if s > 0.0 {
            row /= s;
        }
    }
    PsdSplit::new(&(k.transpose() * &k), 1e-12).kernel
}

/// Projects `direction` onto the orthogonal-jump subspace at one node,
/// scales it by `scale`, and shrinks it if needed so that every jump stays
/// at or above `−1 + margin`.
pub fn jump_from_direction(
    weights: &[f64],
    incs: &[DVector<f64>],
    direction: &[f64],
    scale: f64,
    margin: f64,
) -> Vec<f64> {
    let basis = orthogonal_jump_basis(weights, incs);
    if basis.ncols() == 0 || scale == 0.0 {
        return vec![0.0; weights.len()];
    }
    let dir = DVector::from_column_slice(direction);
    let proj = &basis * (basis.transpose() * dir);
    let mut jump: Vec<f64> = proj.iter().map(|v| v * scale).collect();
    let floor = -1.0 + margin;
    let min = jump.iter().cloned().fold(f64::INFINITY, f64::min);
    if min < floor {
        let shrink = floor / min;
        for v in jump.iter_mut() {
            *v *= shrink;
        }
    }
    jump
}

fn random_jumps(
    tree: &EventTree,
    m: &AdaptedProcess,
    weights: impl Fn(usize) -> Vec<f64>,
    seed: u64,
    opts: JumpOptions,
) -> Result<AdaptedProcess> {
    m.check_tree(tree)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut l = AdaptedProcess::zeros(tree, 1);
    for node in tree.inner_nodes() {
        let w = weights(node);
        let incs = m.child_increments(tree, node);
        let basis = orthogonal_jump_basis(&w, &incs);
        let base = l.value(node);
        if basis.ncols() == 0 {
            for &c in tree.children(node) {
                l.at_mut(c)[0] = base;
            }
            continue;
        }
        let g = DVector::from_fn(basis.ncols(), |_, _| StandardNormal.sample(&mut rng));
        let dir = &basis * g;
        let peak = dir.amax();
        let unit: Vec<f64> = dir.iter().map(|v| v / peak).collect();
        let jumps = jump_from_direction(&w, &incs, &unit, opts.scale, opts.margin);
        for (&c, dl) in tree.children(node).iter().zip(jumps) {
            l.at_mut(c)[0] = base + dl;
        }
    }
    Ok(l)
}

/// Seeded jump martingale `L` with `L(0) = 0`, `E[ΔL] = 0`, `E[ΔL ΔM] = 0`
/// under the tree measure and `ΔL ≥ −1 + margin`. Nodes with no room for
/// such jumps (binary nodes, for instance) get `ΔL = 0`.
pub fn orthogonal_jump_martingale(
    tree: &EventTree,
    m: &AdaptedProcess,
    seed: u64,
    opts: JumpOptions,
) -> Result<AdaptedProcess> {
    random_jumps(tree, m, |node| tree.child_probs(node), seed, opts)
}

/// As [`orthogonal_jump_martingale`], with orthogonality taken under the
/// per-node child weights returned by `weights`.
pub fn orthogonal_jump_martingale_under(
    tree: &EventTree,
    m: &AdaptedProcess,
    weights: impl Fn(usize) -> Vec<f64>,
    seed: u64,
    opts: JumpOptions,
) -> Result<AdaptedProcess> {
    random_jumps(tree, m, weights, seed, opts)
}

/// Result of [`verify_deflator`].
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct DeflatorCheck {
    pub pass: bool,
    /// `max_node |Σ p ΔY|`.
    pub max_drift_y: f64,
    /// `max_node max_i |Σ p Δ(Y Xᵢ)|`.
    pub max_drift_yx: f64,
    /// Node carrying the larger of the two drifts.
    pub worst_node: usize,
}

/// Checks that `Y` and every `Y Xᵢ` have zero conditional drift.
pub fn verify_deflator(tree: &EventTree, y: &AdaptedProcess, x: &AdaptedProcess, tol: f64) -> Result<DeflatorCheck> {
    y.check_tree(tree)?;
    x.check_tree(tree)?;
    for node in 0..tree.len() {
        let v = y.value(node);
        if v.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
            return Err(OdxError::NonPositive { node, value: v });
        }
    }
    let mut max_drift_y: f64 = 0.0;
    let mut max_drift_yx: f64 = 0.0;
    let mut worst_node = 0;
    let mut worst = -1.0;
    for node in tree.inner_nodes() {
        let probs = tree.child_probs(node);
        let y0 = y.value(node);
        let x0 = x.at(node);
        let mut dy = 0.0;
        let mut dyx = vec![0.0; x.dim()];
        for (p, &c) in probs.iter().zip(tree.children(node)) {
            let yc = y.value(c);
            dy += p * (yc - y0);
            for (i, acc) in dyx.iter_mut().enumerate() {
                *acc += p * (yc * x.at(c)[i] - y0 * x0[i]);
            }
        }
        let node_yx = dyx.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
        max_drift_y = max_drift_y.max(dy.abs());
        max_drift_yx = max_drift_yx.max(node_yx);
        let node_worst = dy.abs().max(node_yx);
        if node_worst > worst {
            worst = node_worst;
            worst_node = node;
        }
    }
    Ok(DeflatorCheck {
        pass: max_drift_y <= tol && max_drift_yx <= tol,
        max_drift_y,
        max_drift_yx,
        worst_node,
    })
}

/// Options for [`DeflatorFamily::build`].
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FamilyOptions {
    pub extras: usize,
    pub seed: u64,
    pub jumps: JumpOptions,
}

impl Default for FamilyOptions {
    fn default() -> Self {
        Self {
            extras: 8,
            seed: 0,
            jumps: JumpOptions::default(),
        }
    }
}

/// A product deflator `Y = Ŷ·E(L)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductDeflator {
    pub l: AdaptedProcess,
    pub y: AdaptedProcess,
}

/// The numéraire deflator together with seeded product deflators.
#[derive(Debug, Clone, PartialEq)]
pub struct DeflatorFamily {
    pub rho_hat: PredictableProcess,
    pub v_hat: AdaptedProcess,
    pub y_hat: AdaptedProcess,
    pub extras: Vec<ProductDeflator>,
}

impl DeflatorFamily {
    /// Builds `Ŷ` and `opts.extras` products `Ŷ·E(L)`. Each `L` is
    /// orthogonal to `X` under the one-step measure implied by `Ŷ`, which
    /// makes every product an exact deflator.
    pub fn build(tree: &EventTree, x: &AdaptedProcess, opts: FamilyOptions) -> Result<Self> {
        let num = numeraire_portfolio(tree, x)?;
        Self::from_numeraire(tree, x, num, opts)
    }

    pub fn from_numeraire(tree: &EventTree, x: &AdaptedProcess, num: Numeraire, opts: FamilyOptions) -> Result<Self> {
        let y_hat = num.y_hat();
        let mut extras = Vec::with_capacity(opts.extras);
        for k in 0..opts.extras {
            let seed = opts.seed.wrapping_add((k as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
            let l =
                orthogonal_jump_martingale_under(tree, x, |node| num.implied_measure(tree, node), seed, opts.jumps)?;
            let e = stochastic_exponential(tree, &l, ExpMode::Strict)?;
            let y = y_hat.zip_with(&e, 1, |a, b| vec![a[0] * b[0]])?;
            extras.push(ProductDeflator { l, y });
        }
        Ok(Self {
            rho_hat: num.rho_hat,
            v_hat: num.v_hat,
            y_hat,
            extras,
        })
    }

    /// `Ŷ` followed by every product deflator.
    pub fn deflators(&self) -> impl Iterator<Item = &AdaptedProcess> {
        std::iter::once(&self.y_hat).chain(self.extras.iter().map(|e| &e.y))
    }
}

/// Martingale part of `X` under the tree measure, for callers that want
/// jumps orthogonal to `M` rather than to the deflated market.
pub fn martingale_part(tree: &EventTree, x: &AdaptedProcess) -> Result<AdaptedProcess> {
    doob_decompose(tree, x).map(|(_, m)| m)
}

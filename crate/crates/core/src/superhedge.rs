//! Claims, Snell envelopes under the martingale-measure polytope and
//! superhedging strategies.

use serde::{Deserialize, Serialize};

use crate::deflators::{numeraire_portfolio, stochastic_exponential, ExpMode};
use crate::error::{OdxError, Result};
use crate::lp::{polytope_sup, polytope_vertices};
use crate::optdecomp::{decompose_lp, Decomposition, LpOptions};
use crate::probtree::{AdaptedProcess, EventTree, PredictableProcess};

/// Branch count above which vertex enumeration is not attempted.
pub const MAX_VERTEX_BRANCHES: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClaimKind {
    European,
    American,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Vanilla {
    Put,
    Call,
}

/// A payoff process; a European claim only reads it at the leaves.
#[derive(Debug, Clone, PartialEq)]
pub struct Claim {
    pub kind: ClaimKind,
    pub payoff: AdaptedProcess,
}

impl Claim {
    pub fn new(tree: &EventTree, kind: ClaimKind, payoff: AdaptedProcess) -> Result<Self> {
        payoff.check_tree(tree)?;
        if payoff.dim() != 1 {
            return Err(OdxError::Dimension {
                expected: 1,
                got: payoff.dim(),
            });
        }
        if let Some(i) = payoff.raw().iter().position(|v| !v.is_finite()) {
            return Err(OdxError::InvalidInput(format!("payoff at node {i} is not finite")));
        }
        Ok(Self { kind, payoff })
    }

    /// Put or call with strike `strike` on the price `Sᵢ = E(Xᵢ)`.
    pub fn vanilla(
        tree: &EventTree,
        x: &AdaptedProcess,
        kind: ClaimKind,
        option: Vanilla,
        asset: usize,
        strike: f64,
    ) -> Result<Self> {
        if asset >= x.dim() {
            return Err(OdxError::InvalidInput(format!(
                "asset index {asset} out of range for dimension {}",
                x.dim()
            )));
        }
        let s = prices(tree, x)?.component(asset);
        let payoff = s.map(1, |v| {
            let intrinsic = match option {
                Vanilla::Put => strike - v[0],
                Vanilla::Call => v[0] - strike,
            };
            vec![intrinsic.max(0.0)]
        });
        Self::new(tree, kind, payoff)
    }
}

/// Asset prices `Sᵢ = E(Xᵢ)` for every component of `X`.
pub fn prices(tree: &EventTree, x: &AdaptedProcess) -> Result<AdaptedProcess> {
    let d = x.dim();
    let mut s = AdaptedProcess::zeros(tree, d);
    for i in 0..d {
        let xi = x.component(i);
        let shifted = xi.map(1, |v| vec![v[0] - xi.value(0)]);
        let e = stochastic_exponential(tree, &shifted, ExpMode::Strict)?;
        for node in 0..tree.len() {
            s.at_mut(node)[i] = e.value(node);
        }
    }
    Ok(s)
}

fn envelope_with<F>(tree: &EventTree, claim: &Claim, mut sup: F) -> Result<AdaptedProcess>
where
    F: FnMut(usize, &[f64]) -> Result<f64>,
{
    let mut v = claim.payoff.clone();
    for node in tree.inner_nodes().rev() {
        let values: Vec<f64> = tree.children(node).iter().map(|&c| v.value(c)).collect();
        let cont = sup(node, &values)?;
        v.at_mut(node)[0] = match claim.kind {
            ClaimKind::European => cont,
            ClaimKind::American => cont.max(claim.payoff.value(node)),
        };
    }
    Ok(v)
}

/// Smallest process dominating the payoff (at leaves only for a European
/// claim) whose one-step values never exceed their polytope supremum.
pub fn snell_envelope(tree: &EventTree, claim: &Claim, x: &AdaptedProcess) -> Result<AdaptedProcess> {
    x.check_tree(tree)?;
    envelope_with(tree, claim, |node, values| {
        let incs = x.child_increments(tree, node);
        polytope_sup(&incs, values)
            .map(|o| o.value)
            .ok_or_else(|| OdxError::Arbitrage {
                node,
                detail: "no martingale measure at this node".into(),
            })
    })
}

/// Same recursion, maximizing over enumerated polytope vertices instead of
/// running the simplex. `None` when some node has more than
/// [`MAX_VERTEX_BRANCHES`] children.
pub fn snell_envelope_by_vertices(
    tree: &EventTree,
    claim: &Claim,
    x: &AdaptedProcess,
) -> Result<Option<AdaptedProcess>> {
    x.check_tree(tree)?;
    if tree.inner_nodes().any(|n| tree.children(n).len() > MAX_VERTEX_BRANCHES) {
        return Ok(None);
    }
    envelope_with(tree, claim, |node, values| {
        let incs = x.child_increments(tree, node);
        let verts = polytope_vertices(&incs, MAX_VERTEX_BRANCHES).unwrap_or_default();
        verts
            .iter()
            .map(|q| q.iter().zip(values).map(|(a, b)| a * b).sum::<f64>())
            .reduce(f64::max)
            .ok_or_else(|| OdxError::Arbitrage {
                node,
                detail: "no martingale measure at this node".into(),
            })
    })
    .map(Some)
}

/// Positions of a strategy read as share counts and currency amounts.
#[derive(Debug, Clone, PartialEq)]
pub struct PortfolioView {
    /// Asset prices `Sᵢ = E(Xᵢ)`.
    pub s: AdaptedProcess,
    /// Numéraire share counts `ϑᵢ = V̂ ρ̂ᵢ / Sᵢ`.
    pub shares: PredictableProcess,
    /// Numéraire currency holdings `ηᵢ = V̂ ρ̂ᵢ`.
    pub currency: PredictableProcess,
    /// Share counts of the superhedge, `Hᵢ / Sᵢ`.
    pub hedge_shares: PredictableProcess,
}

impl PortfolioView {
    pub fn build(tree: &EventTree, x: &AdaptedProcess, hedge: &PredictableProcess) -> Result<Self> {
        let s = prices(tree, x)?;
        let num = numeraire_portfolio(tree, x)?;
        let d = x.dim();
        let mut shares = PredictableProcess::zeros(tree, d);
        let mut currency = PredictableProcess::zeros(tree, d);
        let mut hedge_shares = PredictableProcess::zeros(tree, d);
        for node in tree.inner_nodes() {
            let v = num.v_hat.value(node);
            for i in 0..d {
                let si = s.at(node)[i];
                let eta = v * num.rho_hat.at(node)[i];
                currency.at_mut(node)[i] = eta;
                shares.at_mut(node)[i] = eta / si;
                hedge_shares.at_mut(node)[i] = hedge.at(node)[i] / si;
            }
        }
        Ok(Self {
            s,
            shares,
            currency,
            hedge_shares,
        })
    }
}

/// Superhedging price, the decomposition of the envelope and, when the
/// market has a numéraire portfolio, the share-count view.
#[derive(Debug, Clone, PartialEq)]
pub struct Superhedge {
    pub price: f64,
    pub envelope: AdaptedProcess,
    pub decomposition: Decomposition,
    pub portfolio: Option<PortfolioView>,
}

pub fn superhedge(tree: &EventTree, claim: &Claim, x: &AdaptedProcess, opts: LpOptions) -> Result<Superhedge> {
    let envelope = snell_envelope(tree, claim, x)?;
    let decomposition = decompose_lp(tree, &envelope, x, opts)?;
    let portfolio = PortfolioView::build(tree, x, &decomposition.h).ok();
    Ok(Superhedge {
        price: envelope.value(0),
        envelope,
        decomposition,
        portfolio,
    })
}

//! Market models on event trees: the small named instances used throughout
//! the tests and the CLI, and a seeded generator of random arbitrage-free
//! markets.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::Result;
use crate::probtree::{build_tree, AdaptedProcess, Branching, EventTree};

/// An event tree together with the (discounted) return process `X`.
#[derive(Debug, Clone, PartialEq)]
pub struct Market {
    pub tree: EventTree,
    pub x: AdaptedProcess,
}

impl Market {
    pub fn new(tree: EventTree, x: AdaptedProcess) -> Result<Self> {
        x.check_tree(&tree)?;
        Ok(Self { tree, x })
    }

    pub fn dim(&self) -> usize {
        self.x.dim()
    }

    /// Looks up one of the named instances: `b1`, `t1`, `a1`, `put2`.
    pub fn builtin(name: &str) -> Option<Self> {
        match name.to_ascii_lowercase().as_str() {
            "b1" => Some(b1()),
            "t1" => Some(t1()),
            "a1" => Some(a1()),
            "put2" => Some(binomial(2, 0.6, 0.1, -0.1)),
            _ => None,
        }
    }
}

/// One period, two branches with `p = (0.6, 0.4)`, `ΔX = ±0.1`.
pub fn b1() -> Market {
    binomial(1, 0.6, 0.1, -0.1)
}

/// One period, three equally likely branches, `ΔX = (0.1, 0, −0.1)`.
pub fn t1() -> Market {
    let third = 1.0 / 3.0;
    let tree = build_tree(&Branching::Uniform {
        horizon: 1,
        p: vec![third, third, third],
    })
    .expect("valid trinomial tree");
    let x = AdaptedProcess::scalar(&tree, vec![0.0, 0.1, 0.0, -0.1]).expect("matching sizes");
    Market { tree, x }
}

/// Two assets on a fair coin: the first moves `±1`, the second gains `1`
/// on both branches, so `c = diag(1, 0)` and `a = (0, 1)`.
pub fn a1() -> Market {
    let tree = build_tree(&Branching::Uniform {
        horizon: 1,
        p: vec![0.5, 0.5],
    })
    .expect("valid binary tree");
    let x = AdaptedProcess::from_rows(&tree, vec![vec![0.0, 0.0], vec![1.0, 1.0], vec![-1.0, 1.0]])
        .expect("matching sizes");
    Market { tree, x }
}

/// Non-recombining binomial market with `periods` steps; `X` moves by `up`
/// with probability `p_up` and by `down` otherwise.
pub fn binomial(periods: usize, p_up: f64, up: f64, down: f64) -> Market {
    let tree = build_tree(&Branching::Uniform {
        horizon: periods,
        p: vec![p_up, 1.0 - p_up],
    })
    .expect("valid binomial tree");
    let mut x = AdaptedProcess::zeros(&tree, 1);
    for node in tree.nodes().iter().skip(1) {
        let parent = node.parent.expect("non-root");
        let first = tree.children(parent)[0] == node.id;
        let v = x.value(parent) + if first { up } else { down };
        x.at_mut(node.id)[0] = v;
    }
    Market { tree, x }
}

/// Shape of the random markets produced by [`random_market`].
#[derive(Debug, Clone, PartialEq)]
pub struct RandomMarketConfig {
    pub max_periods: usize,
    pub max_branches: usize,
    pub max_dim: usize,
    /// Every node gets exactly `d + 1` affinely independent children.
    pub complete: bool,
    /// Standard deviation of the raw increments.
    pub step_scale: f64,
}

impl Default for RandomMarketConfig {
    fn default() -> Self {
        Self {
            max_periods: 4,
            max_branches: 4,
            max_dim: 2,
            complete: false,
            step_scale: 0.1,
        }
    }
}

/// Seeded random market that admits an equivalent martingale measure at
/// every node: raw increments are recentred under a random strictly
/// positive weighting.
pub fn random_market(seed: u64, cfg: &RandomMarketConfig) -> Market {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let horizon = rng.random_range(1..=cfg.max_periods.max(1));
    let dim = rng.random_range(1..=cfg.max_dim.max(1));
    let complete = cfg.complete && dim < cfg.max_branches.max(2);

    let tree = EventTree::grow(horizon, |_, _| {
        let m = if complete {
            dim + 1
        } else {
            rng.random_range(2..=cfg.max_branches.max(2))
        };
        let raw: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let total: f64 = raw.iter().sum();
        raw.into_iter().map(|w| w / total).collect()
    })
    .expect("generated rows are stochastic");

    let mut x = AdaptedProcess::zeros(&tree, dim);
    for node in tree.inner_nodes() {
        let children = tree.children(node).to_vec();
        let m = children.len();
        let flat_second = !complete && dim == 2 && rng.random_bool(0.15);
        let mut incs: Vec<Vec<f64>> = (0..m)
            .map(|_| {
                (0..dim)
                    .map(|i| {
                        let z: f64 = rng.sample(StandardNormal);
                        if flat_second && i == 1 {
                            0.0
                        } else {
                            z * cfg.step_scale
                        }
                    })
                    .collect()
            })
            .collect();
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
        let wsum: f64 = w.iter().sum();
        for i in 0..dim {
            let centre: f64 = incs.iter().zip(&w).map(|(v, wj)| v[i] * wj).sum::<f64>() / wsum;
            for v in incs.iter_mut() {
                v[i] -= centre;
            }
        }
        let base = x.at(node).to_vec();
        for (c, inc) in children.into_iter().zip(incs) {
            let row = x.at_mut(c);
            for i in 0..dim {
                row[i] = base[i] + inc[i];
            }
        }
    }
    Market { tree, x }
}

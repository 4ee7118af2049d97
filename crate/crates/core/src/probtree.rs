//! Finite filtered probability spaces (event trees) and the process algebra
//! on them.
//!
//! Node ids are assigned breadth-first, so node `0` is the root and every
//! parent id is smaller than its children's ids. Processes are dense arrays
//! indexed by node id.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{OdxError, Result};

/// Tolerance on `Σ p = 1` at every branching node.
pub const PROB_SUM_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct Node {
    pub id: usize,
    pub time: usize,
    pub parent: Option<usize>,
    pub children: Vec<usize>,
    /// Transition probability from the parent; `1` at the root.
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EventTree {
    nodes: Vec<Node>,
    horizon: usize,
}

/// Recursive branching description: the probabilities of the children of a
/// node and, optionally, the description of each child's own branching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSpec {
    pub p: Vec<f64>,
    #[serde(default)]
    pub children: Vec<BranchSpec>,
}

/// Input to [`build_tree`].
#[derive(Debug, Clone, PartialEq)]
pub enum Branching {
    /// Every node up to `horizon` branches with the same probabilities.
    Uniform { horizon: usize, p: Vec<f64> },
    /// Explicit nested branching; nodes without a child description are leaves.
    Nested(BranchSpec),
}

/// Builds an [`EventTree`] from a branching description.
pub fn build_tree(spec: &Branching) -> Result<EventTree> {
    match spec {
        Branching::Uniform { horizon, p } => EventTree::grow(*horizon, |_, _| p.clone()),
        Branching::Nested(root) => {
            // Breadth-first over the spec mirrors the id assignment in `grow`.
            let mut queue = std::collections::VecDeque::from([Some(root)]);
            EventTree::grow(nested_depth(root), |_, _| match queue.pop_front().flatten() {
                Some(s) => {
                    queue.extend((0..s.p.len()).map(|k| s.children.get(k)));
                    s.p.clone()
                }
                None => Vec::new(),
            })
        }
    }
}

fn nested_depth(spec: &BranchSpec) -> usize {
    if spec.p.is_empty() {
        0
    } else {
        1 + spec.children.iter().map(nested_depth).max().unwrap_or(0)
    }
}

/// Rescales a probability row to sum to one; rows already within rounding
/// of one are kept bit for bit.
fn normalized(probs: &[f64]) -> Vec<f64> {
    let total: f64 = probs.iter().sum();
    if (total - 1.0).abs() <= 4.0 * f64::EPSILON * probs.len() as f64 {
        probs.to_vec()
    } else {
        probs.iter().map(|p| p / total).collect()
    }
}

impl EventTree {
    /// Grows a tree breadth-first. `branch(node_id, time)` returns the child
    /// probabilities of a node at `time < horizon`; an empty vector is only
    /// allowed at the horizon.
    pub fn grow<F>(horizon: usize, mut branch: F) -> Result<Self>
    where
        F: FnMut(usize, usize) -> Vec<f64>,
    {
        let mut nodes = vec![Node {
            id: 0,
            time: 0,
            parent: None,
            children: Vec::new(),
            p: 1.0,
        }];
        let mut head = 0;
        while head < nodes.len() {
            let (id, time) = (nodes[head].id, nodes[head].time);
            head += 1;
            if time == horizon {
                continue;
            }
            let probs = branch(id, time);
            validate_row(id, &probs)?;
            for p in normalized(&probs) {
                let child = nodes.len();
                nodes.push(Node {
                    id: child,
                    time: time + 1,
                    parent: Some(id),
                    children: Vec::new(),
                    p,
                });
                nodes[id].children.push(child);
            }
        }
        Ok(Self { nodes, horizon })
    }

    /// Builds a tree from flat node records (the JSON schema). Records must
    /// list ids `0..n` in breadth-first order.
    pub fn from_records(horizon: usize, records: &[NodeRecord]) -> Result<Self> {
        if records.is_empty() {
            return Err(OdxError::InvalidTree("no nodes".into()));
        }
        let mut nodes: Vec<Node> = Vec::with_capacity(records.len());
        for (k, r) in records.iter().enumerate() {
            if r.id != k {
                return Err(OdxError::InvalidTree(format!(
                    "node ids must be 0..n in breadth-first order; found id {} at position {k}",
                    r.id
                )));
            }
            match r.parent {
                None => {
                    if k != 0 || r.time != 0 {
                        return Err(OdxError::InvalidTree(format!(
                            "node {k} has no parent; only the root (id 0, time 0) may"
                        )));
                    }
                }
                Some(parent) => {
                    if parent >= k {
                        return Err(OdxError::InvalidTree(format!(
                            "node {k} lists parent {parent}, which is not an earlier node"
                        )));
                    }
                    if nodes[parent].time + 1 != r.time {
                        return Err(OdxError::InvalidTree(format!(
                            "node {k} at time {} has parent {parent} at time {}",
                            r.time, nodes[parent].time
                        )));
                    }
                    if k > 1 && nodes[k - 1].parent.is_some_and(|q| q > parent) {
                        return Err(OdxError::InvalidTree(format!("node {k} breaks breadth-first order")));
                    }
                    nodes[parent].children.push(k);
                }
            }
            nodes.push(Node {
                id: k,
                time: r.time,
                parent: r.parent,
                children: Vec::new(),
                p: if r.parent.is_some() {
                    r.p.unwrap_or(f64::NAN)
                } else {
                    1.0
                },
            });
        }
        for id in 0..nodes.len() {
            let n = &nodes[id];
            if n.children.is_empty() {
                if n.time != horizon {
                    return Err(OdxError::InvalidTree(format!(
                        "leaf {id} sits at time {}, not at the horizon {horizon}",
                        n.time
                    )));
                }
                continue;
            }
            if n.time >= horizon {
                return Err(OdxError::InvalidTree(format!(
                    "node {id} branches at or beyond the horizon"
                )));
            }
            let probs: Vec<f64> = n.children.iter().map(|&c| nodes[c].p).collect();
            validate_row(id, &probs)?;
            for (c, p) in nodes[id].children.clone().into_iter().zip(normalized(&probs)) {
                nodes[c].p = p;
            }
        }
        Ok(Self { nodes, horizon })
    }

    pub fn records(&self) -> Vec<NodeRecord> {
        self.nodes
            .iter()
            .map(|n| NodeRecord {
                id: n.id,
                time: n.time,
                parent: n.parent,
                p: n.parent.map(|_| n.p),
            })
            .collect()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn node(&self, id: usize) -> &Node {
        &self.nodes[id]
    }

    pub fn nodes(&self) -> &[Node] {
        &self.nodes
    }

    pub fn children(&self, id: usize) -> &[usize] {
        &self.nodes[id].children
    }

    pub fn is_leaf(&self, id: usize) -> bool {
        self.nodes[id].children.is_empty()
    }

    /// Non-leaf node ids in breadth-first order.
    pub fn inner_nodes(&self) -> impl DoubleEndedIterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| !n.children.is_empty()).map(|n| n.id)
    }

    pub fn leaves(&self) -> impl Iterator<Item = usize> + '_ {
        self.nodes.iter().filter(|n| n.children.is_empty()).map(|n| n.id)
    }

    /// Unconditional probability of reaching `id`.
    pub fn path_probability(&self, id: usize) -> f64 {
        let mut prob = 1.0;
        let mut cur = id;
        while let Some(parent) = self.nodes[cur].parent {
            prob *= self.nodes[cur].p;
            cur = parent;
        }
        prob
    }

    /// Node ids from the root to `id`, inclusive.
    pub fn path(&self, id: usize) -> Vec<usize> {
        let mut out = vec![id];
        let mut cur = id;
        while let Some(parent) = self.nodes[cur].parent {
            out.push(parent);
            cur = parent;
        }
        out.reverse();
        out
    }

    /// Conditional probabilities of the children of `id`.
    pub fn child_probs(&self, id: usize) -> Vec<f64> {
        self.nodes[id].children.iter().map(|&c| self.nodes[c].p).collect()
    }
}

fn validate_row(node: usize, probs: &[f64]) -> Result<()> {
    if probs.is_empty() {
        return Err(OdxError::InvalidTree(format!(
            "node {node} before the horizon has no children"
        )));
    }
    for &p in probs {
        if !(p > 0.0 && p <= 1.0) {
            return Err(OdxError::ZeroProbability { node, p });
        }
    }
    let sum: f64 = probs.iter().sum();
    if (sum - 1.0).abs() > PROB_SUM_TOL {
        return Err(OdxError::NotStochastic { node, sum });
    }
    Ok(())
}

/// One entry of the flat tree schema.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRecord {
    pub id: usize,
    pub time: usize,
    pub parent: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<f64>,
}

/// A real-vector value at every node.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptedProcess {
    dim: usize,
    data: Vec<f64>,
}

impl AdaptedProcess {
    pub fn zeros(tree: &EventTree, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; tree.len() * dim],
        }
    }

    /// Builds a process from one row per node.
    pub fn from_rows(tree: &EventTree, rows: Vec<Vec<f64>>) -> Result<Self> {
        if rows.len() != tree.len() {
            return Err(OdxError::Mismatch(format!(
                "{} rows for a tree with {} nodes",
                rows.len(),
                tree.len()
            )));
        }
        let dim = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * dim);
        for row in rows {
            if row.len() != dim {
                return Err(OdxError::Dimension {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Self { dim, data })
    }

    pub fn scalar(tree: &EventTree, values: Vec<f64>) -> Result<Self> {
        Self::from_rows(tree, values.into_iter().map(|v| vec![v]).collect())
    }

    pub fn from_fn<F: FnMut(usize) -> Vec<f64>>(tree: &EventTree, dim: usize, mut f: F) -> Result<Self> {
        let mut data = Vec::with_capacity(tree.len() * dim);
        for id in 0..tree.len() {
            let row = f(id);
            if row.len() != dim {
                return Err(OdxError::Dimension {
                    expected: dim,
                    got: row.len(),
                });
            }
            data.extend(row);
        }
        Ok(Self { dim, data })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.data.len().checked_div(self.dim).unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn at(&self, node: usize) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    pub fn at_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.dim..(node + 1) * self.dim]
    }

    /// First component; the usual accessor for scalar processes.
    pub fn value(&self, node: usize) -> f64 {
        self.data[node * self.dim]
    }

    pub fn vector(&self, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.at(node))
    }

    /// Component `i` as a scalar process.
    pub fn component(&self, i: usize) -> Self {
        Self {
            dim: 1,
            data: self.data.chunks(self.dim).map(|r| r[i]).collect(),
        }
    }

    /// `Δ(child) = self(child) − self(parent)`.
    pub fn increment(&self, tree: &EventTree, child: usize) -> DVector<f64> {
        match tree.node(child).parent {
            Some(parent) => self.vector(child) - self.vector(parent),
            None => DVector::zeros(self.dim),
        }
    }

    /// Increments from `node` to each of its children.
    pub fn child_increments(&self, tree: &EventTree, node: usize) -> Vec<DVector<f64>> {
        let base = self.vector(node);
        tree.children(node).iter().map(|&c| self.vector(c) - &base).collect()
    }

    pub fn check_tree(&self, tree: &EventTree) -> Result<()> {
        if self.len() != tree.len() {
            return Err(OdxError::Mismatch(format!(
                "process has {} nodes, tree has {}",
                self.len(),
                tree.len()
            )));
        }
        Ok(())
    }

    pub fn map<F: Fn(&[f64]) -> Vec<f64>>(&self, dim: usize, f: F) -> Self {
        let mut data = Vec::with_capacity(self.len() * dim);
        for row in self.data.chunks(self.dim) {
            data.extend(f(row));
        }
        Self { dim, data }
    }

    pub fn zip_with<F: Fn(&[f64], &[f64]) -> Vec<f64>>(&self, other: &Self, dim: usize, f: F) -> Result<Self> {
        if self.len() != other.len() {
            return Err(OdxError::Mismatch("processes on different trees".into()));
        }
        let mut data = Vec::with_capacity(self.len() * dim);
        for (a, b) in self.data.chunks(self.dim).zip(other.data.chunks(other.dim)) {
            data.extend(f(a, b));
        }
        Ok(Self { dim, data })
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }

    pub fn raw(&self) -> &[f64] {
        &self.data
    }
}

/// A real-vector value on every non-leaf node: the position held over the
/// step from that node to its children.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictableProcess {
    dim: usize,
    data: Vec<f64>,
    defined: Vec<bool>,
}

impl PredictableProcess {
    pub fn zeros(tree: &EventTree, dim: usize) -> Self {
        Self {
            dim,
            data: vec![0.0; tree.len() * dim],
            defined: tree.nodes().iter().map(|n| !n.children.is_empty()).collect(),
        }
    }

    pub fn from_fn<F: FnMut(usize) -> Vec<f64>>(tree: &EventTree, dim: usize, mut f: F) -> Result<Self> {
        let mut out = Self::zeros(tree, dim);
        for id in tree.inner_nodes() {
            let row = f(id);
            if row.len() != dim {
                return Err(OdxError::Dimension {
                    expected: dim,
                    got: row.len(),
                });
            }
            out.at_mut(id).copy_from_slice(&row);
        }
        Ok(out)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.defined.len()
    }

    pub fn is_empty(&self) -> bool {
        self.defined.is_empty()
    }

    pub fn is_defined(&self, node: usize) -> bool {
        self.defined[node]
    }

    /// Value in force on the step out of `node` (zeros at leaves).
    pub fn at(&self, node: usize) -> &[f64] {
        &self.data[node * self.dim..(node + 1) * self.dim]
    }

    pub fn at_mut(&mut self, node: usize) -> &mut [f64] {
        &mut self.data[node * self.dim..(node + 1) * self.dim]
    }

    pub fn get(&self, node: usize) -> Option<&[f64]> {
        self.defined[node].then(|| self.at(node))
    }

    pub fn vector(&self, node: usize) -> DVector<f64> {
        DVector::from_column_slice(self.at(node))
    }

    pub fn value(&self, node: usize) -> f64 {
        self.data[node * self.dim]
    }

    pub fn check_tree(&self, tree: &EventTree) -> Result<()> {
        if self.len() != tree.len() {
            return Err(OdxError::Mismatch(format!(
                "predictable process has {} nodes, tree has {}",
                self.len(),
                tree.len()
            )));
        }
        Ok(())
    }

    /// Inner nodes with their values, in breadth-first order.
    pub fn entries(&self) -> impl Iterator<Item = (usize, &[f64])> {
        (0..self.len()).filter(|&i| self.defined[i]).map(|i| (i, self.at(i)))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs()))
    }
}

/// `Σ_children p·Δ` at a non-leaf node.
pub fn conditional_mean(tree: &EventTree, process: &AdaptedProcess, node: usize) -> Result<DVector<f64>> {
    process.check_tree(tree)?;
    if tree.is_leaf(node) {
        return Err(OdxError::LeafNode(node));
    }
    let incs = process.child_increments(tree, node);
    Ok(weighted_mean(&tree.child_probs(node), &incs))
}

/// `Σ_children p·Δ Δᵀ` at a non-leaf node.
pub fn conditional_second_moment(tree: &EventTree, process: &AdaptedProcess, node: usize) -> Result<DMatrix<f64>> {
    process.check_tree(tree)?;
    if tree.is_leaf(node) {
        return Err(OdxError::LeafNode(node));
    }
    let incs = process.child_increments(tree, node);
    let mut out = DMatrix::zeros(process.dim(), process.dim());
    for (p, v) in tree.child_probs(node).iter().zip(&incs) {
        out += v * v.transpose() * *p;
    }
    Ok(out)
}

/// Either conditional moment, selected by `order`.
#[derive(Debug, Clone, PartialEq)]
pub enum Moment {
    First(DVector<f64>),
    Second(DMatrix<f64>),
}

pub fn conditional_moment(tree: &EventTree, process: &AdaptedProcess, node: usize, order: u8) -> Result<Moment> {
    match order {
        1 => conditional_mean(tree, process, node).map(Moment::First),
        2 => conditional_second_moment(tree, process, node).map(Moment::Second),
        _ => Err(OdxError::InvalidInput(format!("moment order {order} is not 1 or 2"))),
    }
}

/// Probability-weighted mean, shifted by the first vector so that identical
/// inputs give an exact result.
pub(crate) fn weighted_mean(weights: &[f64], vectors: &[DVector<f64>]) -> DVector<f64> {
    let base = vectors[0].clone();
    let mut acc = DVector::zeros(base.len());
    for (w, v) in weights.iter().zip(vectors) {
        acc += (v - &base) * *w;
    }
    base + acc
}

/// Doob decomposition `X = A + M` with `A(0) = 0` predictable and `M` a
/// martingale.
pub fn doob_decompose(tree: &EventTree, x: &AdaptedProcess) -> Result<(AdaptedProcess, AdaptedProcess)> {
    x.check_tree(tree)?;
    let mut a = AdaptedProcess::zeros(tree, x.dim());
    for node in tree.inner_nodes() {
        let drift = conditional_mean(tree, x, node)?;
        let base = a.vector(node) + drift;
        for &c in tree.children(node) {
            a.at_mut(c).copy_from_slice(base.as_slice());
        }
    }
    let m = x.zip_with(&a, x.dim(), |xv, av| xv.iter().zip(av).map(|(p, q)| p - q).collect())?;
    Ok((a, m))
}

/// Quadratic covariation `[M, N]`: the running sum of `ΔM ΔNᵀ` along each
/// path, flattened row-major (`dim = dim(M) · dim(N)`).
pub fn quadratic_covariation(tree: &EventTree, m: &AdaptedProcess, n: &AdaptedProcess) -> Result<AdaptedProcess> {
    m.check_tree(tree)?;
    n.check_tree(tree)?;
    let (dm, dn) = (m.dim(), n.dim());
    let mut out = AdaptedProcess::zeros(tree, dm * dn);
    for node in tree.nodes().iter().skip(1) {
        let parent = node.parent.expect("non-root node has a parent");
        let a = m.increment(tree, node.id);
        let b = n.increment(tree, node.id);
        let prev = out.at(parent).to_vec();
        let row = out.at_mut(node.id);
        for i in 0..dm {
            for j in 0..dn {
                row[i * dn + j] = prev[i * dn + j] + a[i] * b[j];
            }
        }
    }
    Ok(out)
}

/// Discrete stochastic integral `∫⟨H, dX⟩`: the running sum of
/// `⟨H(parent), ΔX⟩` along each path, starting at 0.
pub fn stochastic_integral(tree: &EventTree, h: &PredictableProcess, x: &AdaptedProcess) -> Result<AdaptedProcess> {
    x.check_tree(tree)?;
    h.check_tree(tree)?;
    if h.dim() != x.dim() {
        return Err(OdxError::Dimension {
            expected: x.dim(),
            got: h.dim(),
        });
    }
    let mut out = AdaptedProcess::zeros(tree, 1);
    for node in tree.nodes().iter().skip(1) {
        let parent = node.parent.expect("non-root node has a parent");
        let gain: f64 = h
            .at(parent)
            .iter()
            .zip(x.at(node.id).iter().zip(x.at(parent)))
            .map(|(hi, (xc, xp))| hi * (xc - xp))
            .sum();
        out.at_mut(node.id)[0] = out.value(parent) + gain;
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn b1() -> (EventTree, AdaptedProcess) {
        let tree = build_tree(&Branching::Uniform {
            horizon: 1,
            p: vec![0.6, 0.4],
        })
        .unwrap();
        let x = AdaptedProcess::scalar(&tree, vec![0.0, 0.1, -0.1]).unwrap();
        (tree, x)
    }

    fn t1() -> (EventTree, AdaptedProcess) {
        let third = 1.0 / 3.0;
        let tree = build_tree(&Branching::Uniform {
            horizon: 1,
            p: vec![third, third, third],
        })
        .unwrap();
        let x = AdaptedProcess::scalar(&tree, vec![0.0, 0.1, 0.0, -0.1]).unwrap();
        (tree, x)
    }

    #[test]
    fn builds_small_trees() {
        let (tree, _) = b1();
        assert_eq!(tree.len(), 3);
        assert_eq!(tree.children(0), &[1, 2]);
        let (tree, _) = t1();
        assert_eq!(tree.len(), 4);
        assert_eq!(tree.horizon(), 1);
    }

    #[test]
    fn rejects_non_stochastic_rows() {
        let err = build_tree(&Branching::Uniform {
            horizon: 1,
            p: vec![0.6, 0.5],
        })
        .unwrap_err();
        assert!(err.to_string().contains("probabilities must sum to 1"));
    }

    #[test]
    fn rejects_zero_probability() {
        let err = build_tree(&Branching::Uniform {
            horizon: 2,
            p: vec![1.0, 0.0],
        })
        .unwrap_err();
        assert!(matches!(err, OdxError::ZeroProbability { .. }));
    }

    #[test]
    fn nested_spec_is_breadth_first() {
        let spec = BranchSpec {
            p: vec![0.5, 0.5],
            children: vec![
                BranchSpec {
                    p: vec![0.25, 0.75],
                    children: vec![],
                },
                BranchSpec {
                    p: vec![0.2, 0.3, 0.5],
                    children: vec![],
                },
            ],
        };
        let tree = build_tree(&Branching::Nested(spec)).unwrap();
        assert_eq!(tree.len(), 8);
        assert_eq!(tree.children(1), &[3, 4]);
        assert_eq!(tree.children(2), &[5, 6, 7]);
        assert!((tree.path_probability(7) - 0.25).abs() < 1e-15);
    }

    #[test]
    fn nested_spec_with_short_branch_is_rejected() {
        let spec = BranchSpec {
            p: vec![0.5, 0.5],
            children: vec![BranchSpec {
                p: vec![1.0],
                children: vec![],
            }],
        };
        assert!(build_tree(&Branching::Nested(spec)).is_err());
    }

    #[test]
    fn records_round_trip() {
        let (tree, _) = t1();
        let back = EventTree::from_records(1, &tree.records()).unwrap();
        assert_eq!(back, tree);
    }

    #[test]
    fn records_reject_leaf_before_horizon() {
        let (tree, _) = b1();
        assert!(EventTree::from_records(2, &tree.records()).is_err());
    }

    #[test]
    fn conditional_moments_b1_t1() {
        let (tree, x) = b1();
        let m1 = conditional_mean(&tree, &x, 0).unwrap();
        assert!((m1[0] - 0.02).abs() < 1e-15);

        let (tree, x) = t1();
        let m1 = conditional_mean(&tree, &x, 0).unwrap();
        assert!(m1[0].abs() < 1e-15);
        let m2 = conditional_second_moment(&tree, &x, 0).unwrap();
        assert!((m2[(0, 0)] - 0.02 / 3.0).abs() < 1e-15);
        assert!(matches!(conditional_mean(&tree, &x, 1), Err(OdxError::LeafNode(1))));
    }

    #[test]
    fn doob_b1() {
        let (tree, x) = b1();
        let (a, m) = doob_decompose(&tree, &x).unwrap();
        assert!((a.value(1) - 0.02).abs() < 1e-15 && (a.value(2) - 0.02).abs() < 1e-15);
        assert!((m.value(1) - 0.08).abs() < 1e-15);
        assert!((m.value(2) + 0.12).abs() < 1e-15);
        assert!(conditional_mean(&tree, &m, 0).unwrap()[0].abs() < 1e-15);
    }

    #[test]
    fn doob_of_driftless_and_constant() {
        let (tree, x) = t1();
        let (a, m) = doob_decompose(&tree, &x).unwrap();
        assert!(a.raw().iter().all(|v| v.abs() < 1e-15));
        assert!(m.max_abs_diff(&x) < 1e-15);

        let c = AdaptedProcess::scalar(&tree, vec![2.0; 4]).unwrap();
        let (a, m) = doob_decompose(&tree, &c).unwrap();
        assert!(a.raw().iter().all(|&v| v == 0.0));
        assert!(m.raw().iter().all(|&v| v == 2.0));
    }

    #[test]
    fn covariation_b1() {
        let (tree, x) = b1();
        let (_, m) = doob_decompose(&tree, &x).unwrap();
        let qv = quadratic_covariation(&tree, &m, &m).unwrap();
        assert!((qv.value(1) - 0.0064).abs() < 1e-15);
        assert!((qv.value(2) - 0.0144).abs() < 1e-15);
        let c = AdaptedProcess::scalar(&tree, vec![1.0; 3]).unwrap();
        let zero = quadratic_covariation(&tree, &m, &c).unwrap();
        assert!(zero.raw().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn covariation_rejects_other_tree() {
        let (tree, x) = b1();
        let (_, y) = t1();
        assert!(quadratic_covariation(&tree, &x, &y).is_err());
    }
}

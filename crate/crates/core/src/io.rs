//! JSON and CSV formats.
//!
//! Every file written carries `"odx_schema": 1`. Floats are printed with 17
//! significant digits so values survive a round-trip unchanged; non-finite
//! values become `null`. Node-indexed processes are JSON objects keyed by
//! node id in increasing numeric order, with a vector (or, on input, a bare
//! number) per node.

use std::collections::BTreeMap;
use std::fmt;
use std::io::{self, Write};

use serde::ser::{SerializeMap, Serializer};
use serde::{Deserialize, Serialize};
use serde_json::ser::Formatter;

use crate::error::OdxError;
use crate::model::Market;
use crate::optdecomp::{Decomposition, Route};
use crate::probtree::{AdaptedProcess, EventTree, NodeRecord, PredictableProcess};
use crate::superhedge::{Claim, ClaimKind, Vanilla};

pub const SCHEMA_VERSION: u32 = 1;

/// Formats a float with 17 significant digits.
pub fn sig17(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        String::new()
    }
}

/// Compact JSON with floats printed by [`sig17`].
#[derive(Debug, Clone, Copy, Default)]
pub struct Sig17Formatter;

impl Formatter for Sig17Formatter {
    fn write_f64<W: ?Sized + Write>(&mut self, writer: &mut W, value: f64) -> io::Result<()> {
        writer.write_all(sig17(value).as_bytes())
    }

    fn write_f32<W: ?Sized + Write>(&mut self, writer: &mut W, value: f32) -> io::Result<()> {
        self.write_f64(writer, f64::from(value))
    }
}

pub fn to_json<T: Serialize>(value: &T) -> String {
    let mut buf = Vec::new();
    let mut ser = serde_json::Serializer::with_formatter(&mut buf, Sig17Formatter);
    value.serialize(&mut ser).expect("serializing to memory cannot fail");
    String::from_utf8(buf).expect("serde_json emits UTF-8")
}

/// Node-keyed rows serialized as a JSON object in the given order.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeMap(pub Vec<(usize, Vec<f64>)>);

impl NodeMap {
    pub fn adapted(p: &AdaptedProcess) -> Self {
        Self((0..p.len()).map(|i| (i, p.at(i).to_vec())).collect())
    }

    pub fn predictable(p: &PredictableProcess) -> Self {
        Self(p.entries().map(|(i, v)| (i, v.to_vec())).collect())
    }
}

impl Serialize for NodeMap {
    fn serialize<S: Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let mut map = serializer.serialize_map(Some(self.0.len()))?;
        for (id, row) in &self.0 {
            map.serialize_entry(&id.to_string(), row)?;
        }
        map.end()
    }
}

/// Input failure: either the text is not valid JSON for the schema, or
/// the decoded content is inconsistent.
#[derive(Debug, Clone, PartialEq)]
pub enum InputError {
    Json {
        line: usize,
        column: usize,
        message: String,
    },
    Content(OdxError),
}

impl fmt::Display for InputError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Json { line, column, message } => write!(f, "line {line}, column {column}: {message}"),
            Self::Content(e) => write!(f, "{e}"),
        }
    }
}

impl std::error::Error for InputError {}

impl From<serde_json::Error> for InputError {
    fn from(e: serde_json::Error) -> Self {
        Self::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        }
    }
}

impl From<OdxError> for InputError {
    fn from(e: OdxError) -> Self {
        Self::Content(e)
    }
}

pub type InputResult<T> = std::result::Result<T, InputError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreeJson {
    pub horizon: usize,
    pub nodes: Vec<NodeRecord>,
}

/// A node value on input: a bare number or a vector.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
pub enum Cell {
    Scalar(f64),
    Vector(Vec<f64>),
}

impl Cell {
    fn into_vec(self) -> Vec<f64> {
        match self {
            Self::Scalar(v) => vec![v],
            Self::Vector(v) => v,
        }
    }
}

pub type ProcessJson = BTreeMap<String, Cell>;

fn parse_rows(
    tree: &EventTree,
    map: ProcessJson,
    name: &str,
    need: impl Fn(usize) -> bool,
) -> InputResult<Vec<Option<Vec<f64>>>> {
    let mut rows: Vec<Option<Vec<f64>>> = vec![None; tree.len()];
    for (key, cell) in map {
        let id: usize = key
            .trim()
            .parse()
            .map_err(|_| OdxError::InvalidInput(format!("{name}: key {key:?} is not a node id")))?;
        if id >= tree.len() {
            return Err(OdxError::InvalidInput(format!("{name}: node {id} is not in the tree")).into());
        }
        rows[id] = Some(cell.into_vec());
    }
    if let Some(missing) = (0..tree.len()).find(|&i| need(i) && rows[i].is_none()) {
        return Err(OdxError::InvalidInput(format!("{name}: no value for node {missing}")).into());
    }
    Ok(rows)
}

pub fn parse_adapted(tree: &EventTree, map: ProcessJson, name: &str) -> InputResult<AdaptedProcess> {
    let rows = parse_rows(tree, map, name, |_| true)?;
    Ok(AdaptedProcess::from_rows(
        tree,
        rows.into_iter().map(|r| r.expect("checked")).collect(),
    )?)
}

pub fn parse_predictable(
    tree: &EventTree,
    map: ProcessJson,
    dim: usize,
    name: &str,
) -> InputResult<PredictableProcess> {
    let rows = parse_rows(tree, map, name, |i| !tree.is_leaf(i))?;
    Ok(PredictableProcess::from_fn(tree, dim, |i| {
        rows[i].clone().unwrap_or_default()
    })?)
}

#[derive(Debug, Clone, Deserialize)]
struct ModelJson {
    tree: TreeJson,
    #[serde(rename = "X")]
    x: ProcessJson,
    #[serde(rename = "V", default)]
    v: Option<ProcessJson>,
}

/// A market with an optional value process to decompose.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelInput {
    pub market: Market,
    pub v: Option<AdaptedProcess>,
}

pub fn parse_model(text: &str) -> InputResult<ModelInput> {
    let raw: ModelJson = serde_json::from_str(text)?;
    let tree = EventTree::from_records(raw.tree.horizon, &raw.tree.nodes)?;
    let x = parse_adapted(&tree, raw.x, "X")?;
    let v = match raw.v {
        Some(m) => {
            let v = parse_adapted(&tree, m, "V")?;
            if v.dim() != 1 {
                return Err(OdxError::InvalidInput("V must be scalar".into()).into());
            }
            Some(v)
        }
        None => None,
    };
    Ok(ModelInput {
        market: Market::new(tree, x)?,
        v,
    })
}

/// Standalone value process file: a bare node map.
pub fn parse_value(text: &str, tree: &EventTree) -> InputResult<AdaptedProcess> {
    let map: ProcessJson = serde_json::from_str(text)?;
    let v = parse_adapted(tree, map, "V")?;
    if v.dim() != 1 {
        return Err(OdxError::InvalidInput("V must be scalar".into()).into());
    }
    Ok(v)
}

#[derive(Serialize)]
struct ModelOut {
    odx_schema: u32,
    tree: TreeJson,
    #[serde(rename = "X")]
    x: NodeMap,
    #[serde(rename = "V", skip_serializing_if = "Option::is_none")]
    v: Option<NodeMap>,
}

pub fn model_json(market: &Market, v: Option<&AdaptedProcess>) -> String {
    to_json(&ModelOut {
        odx_schema: SCHEMA_VERSION,
        tree: TreeJson {
            horizon: market.tree.horizon(),
            nodes: market.tree.records(),
        },
        x: NodeMap::adapted(&market.x),
        v: v.map(NodeMap::adapted),
    })
}

#[derive(Debug, Clone, Deserialize)]
struct ClaimJson {
    kind: ClaimKind,
    #[serde(default)]
    payoff: Option<ProcessJson>,
    #[serde(default)]
    formula: Option<Vanilla>,
    #[serde(default)]
    strike: Option<f64>,
    #[serde(default)]
    asset: usize,
}

pub fn parse_claim(text: &str, market: &Market) -> InputResult<Claim> {
    let raw: ClaimJson = serde_json::from_str(text)?;
    let tree = &market.tree;
    match (raw.payoff, raw.formula) {
        (Some(map), None) => {
            let rows = parse_rows(tree, map, "payoff", |i| {
                raw.kind == ClaimKind::American || tree.is_leaf(i)
            })?;
            let payoff = AdaptedProcess::from_rows(tree, rows.into_iter().map(|r| r.unwrap_or(vec![0.0])).collect())?;
            Ok(Claim::new(tree, raw.kind, payoff)?)
        }
        (None, Some(formula)) => {
            let strike = raw
                .strike
                .ok_or_else(|| OdxError::InvalidInput("claim formula needs a strike".into()))?;
            Ok(Claim::vanilla(tree, &market.x, raw.kind, formula, raw.asset, strike)?)
        }
        _ => Err(OdxError::InvalidInput("claim needs exactly one of \"payoff\" or \"formula\"".into()).into()),
    }
}

/// Decomposition as read back by `verify`.
#[derive(Debug, Clone, Deserialize)]
pub struct DecompositionJson {
    #[serde(rename = "V0")]
    pub v0: f64,
    #[serde(rename = "H")]
    pub h: ProcessJson,
    #[serde(rename = "C")]
    pub c: ProcessJson,
    #[serde(rename = "V", default)]
    pub v: Option<ProcessJson>,
}

/// Decoded decomposition file.
#[derive(Debug, Clone, PartialEq)]
pub struct DecompositionInput {
    pub v0: f64,
    pub h: PredictableProcess,
    pub c: AdaptedProcess,
    pub v: Option<AdaptedProcess>,
}

pub fn parse_decomposition(text: &str, market: &Market) -> InputResult<DecompositionInput> {
    let raw: DecompositionJson = serde_json::from_str(text)?;
    let tree = &market.tree;
    let h = parse_predictable(tree, raw.h, market.dim(), "H")?;
    let c = parse_adapted(tree, raw.c, "C")?;
    let v = raw.v.map(|m| parse_adapted(tree, m, "V")).transpose()?;
    Ok(DecompositionInput { v0: raw.v0, h, c, v })
}

#[derive(Serialize)]
struct DiagnosticsOut {
    n_norm: f64,
    min_db: f64,
    duality_gap: f64,
    deferred_nodes: Vec<usize>,
    binding: NodeMap,
    #[serde(skip_serializing_if = "Option::is_none")]
    theta: Option<NodeMap>,
    #[serde(rename = "B", skip_serializing_if = "Option::is_none")]
    b: Option<NodeMap>,
}

#[derive(Serialize)]
pub struct DecompositionOut {
    route: Route,
    #[serde(rename = "V0")]
    v0: f64,
    #[serde(rename = "H")]
    h: NodeMap,
    #[serde(rename = "C")]
    c: NodeMap,
    #[serde(rename = "V")]
    v: NodeMap,
    diagnostics: DiagnosticsOut,
}

impl DecompositionOut {
    pub fn new(dec: &Decomposition, v: &AdaptedProcess) -> Self {
        let d = &dec.diagnostics;
        Self {
            route: d.route,
            v0: dec.v0,
            h: NodeMap::predictable(&dec.h),
            c: NodeMap::adapted(&dec.c),
            v: NodeMap::adapted(v),
            diagnostics: DiagnosticsOut {
                n_norm: d.n_norm,
                min_db: d.min_db,
                duality_gap: d.duality_gap,
                deferred_nodes: d.deferred_nodes.clone(),
                binding: NodeMap(d.binding.clone()),
                theta: d.theta.as_ref().map(NodeMap::predictable),
                b: d.b.as_ref().map(NodeMap::adapted),
            },
        }
    }
}

/// Per-node table `node, time, parent, V, H_i…, dC, dB, N_norm`; cells not
/// defined at a node are left empty.
pub fn decomposition_csv(tree: &EventTree, v: &AdaptedProcess, dec: &Decomposition) -> String {
    let d = dec.h.dim();
    let mut w = csv::Writer::from_writer(Vec::new());
    let mut header = vec!["node".to_string(), "time".into(), "parent".into(), "V".into()];
    header.extend((0..d).map(|i| format!("H_{i}")));
    header.extend(["dC".to_string(), "dB".into(), "N_norm".into()]);
    w.write_record(&header).expect("in-memory write");
    for node in tree.nodes() {
        let mut row = vec![
            node.id.to_string(),
            node.time.to_string(),
            node.parent.map(|p| p.to_string()).unwrap_or_default(),
            sig17(v.value(node.id)),
        ];
        let inner = !tree.is_leaf(node.id);
        row.extend((0..d).map(|i| {
            if inner {
                sig17(dec.h.at(node.id)[i])
            } else {
                String::new()
            }
        }));
        match node.parent {
            Some(p) => {
                row.push(sig17(dec.c.value(node.id) - dec.c.value(p)));
                row.push(
                    dec.diagnostics
                        .b
                        .as_ref()
                        .map(|b| sig17(b.value(node.id) - b.value(p)))
                        .unwrap_or_default(),
                );
            }
            None => row.extend([String::new(), String::new()]),
        }
        row.push(if inner {
            sig17(dec.diagnostics.node_n_norm[node.id])
        } else {
            String::new()
        });
        w.write_record(&row).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv emits UTF-8")
}

/// Writes rows of floats under a header, 17 significant digits each.
pub fn float_csv(header: &[String], rows: impl IntoIterator<Item = Vec<f64>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header).expect("in-memory write");
    for row in rows {
        w.write_record(row.iter().map(|v| sig17(*v))).expect("in-memory write");
    }
    String::from_utf8(w.into_inner().expect("flush to memory")).expect("csv emits UTF-8")
}

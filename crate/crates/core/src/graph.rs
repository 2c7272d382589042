//! Inspectable operation graphs executed under budgets.
//!
//! A graph is validated and hashed before anything runs. Execution walks a
//! fixed topological order (ties by node id), admits a node only if it fits
//! in every remaining budget dimension, and materializes each node's output
//! as a workspace artifact. A halted run returns a continuation token; resuming
//! with it reproduces exactly what an unbudgeted run would have produced.
//!
//! Cost model: raster-touching nodes cost `ceil(cells / 1000)` units (at least
//! one), where `cells` is the reference grid size times the number of rasters
//! read. A `perceive` node costs one unit and one perceptor call.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::{compute_attributes, extract_time_series, AttributeKind};
use crate::dual::{labeled_examples, predict_surface, training_digest, LightweightModel, NearestCentroidModel};
use crate::embeddings::EmbeddingProvider;
use crate::error::{Error, Result};
use crate::geomemory::MemoryStore;
use crate::geometry::Polygon;
use crate::navigation::{cell_zoom, reference_grid, PatchRef};
use crate::perception::{PerceptionQuery, PerceptorRegistry, Task};
use crate::raster::{Band, CellId, GridRaster};
use crate::time::TimeStamp;
use crate::vector::VectorLayer;
use crate::workspace::{json_digest, Artifact, ArtifactKind, ArtifactPayload, ProvenanceRecord, Workspace};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    NdviIndex,
    ZonalStats,
    MaskApply,
    Threshold,
    TimeSeriesExtract,
    TrainLightweight,
    PredictSurface,
    Perceive,
    AttachAttributes,
    Export,
}

const OP_NAMES: [&str; 10] = [
    "ndvi_index",
    "zonal_stats",
    "mask_apply",
    "threshold",
    "time_series_extract",
    "train_lightweight",
    "predict_surface",
    "perceive",
    "attach_attributes",
    "export",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphNode {
    pub id: String,
    pub op: OpKind,
    #[serde(default)]
    pub params: BTreeMap<String, Value>,
    #[serde(default)]
    pub inputs: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GraphSpec {
    pub nodes: Vec<GraphNode>,
    pub outputs: Vec<String>,
}

impl GraphSpec {
    /// Parses a spec, reporting unknown operation names as such.
    pub fn from_json(v: &Value) -> Result<Self> {
        if let Some(nodes) = v.get("nodes").and_then(Value::as_array) {
            for n in nodes {
                if let Some(op) = n.get("op").and_then(Value::as_str) {
                    if !OP_NAMES.contains(&op) {
                        return Err(Error::UnknownOp(op.to_string()));
                    }
                }
            }
        }
        Ok(serde_json::from_value(v.clone())?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComputeGraph {
    nodes: BTreeMap<String, GraphNode>,
    outputs: Vec<String>,
    graph_hash: String,
    order: Vec<String>,
}

impl ComputeGraph {
    pub fn hash(&self) -> &str {
        &self.graph_hash
    }

    pub fn short_hash(&self) -> &str {
        &self.graph_hash[..12]
    }

    pub fn nodes(&self) -> &BTreeMap<String, GraphNode> {
        &self.nodes
    }

    pub fn outputs(&self) -> &[String] {
        &self.outputs
    }

    /// Execution order: topological, ties broken by node id.
    pub fn order(&self) -> &[String] {
        &self.order
    }

    pub fn artifact_id(&self, node: &str) -> String {
        format!("{}:{node}", self.short_hash())
    }

    fn layer_name(&self, node: &str) -> String {
        format!("graph/{}/{node}", self.short_hash())
    }
}

#[derive(Debug, Clone, Copy)]
enum Ty {
    Str,
    Num,
    UInt,
    StrList,
    Task,
}

fn type_ok(ty: Ty, v: &Value) -> bool {
    match ty {
        Ty::Str => v.is_string(),
        Ty::Num => v.as_f64().is_some_and(f64::is_finite),
        Ty::UInt => v.is_u64(),
        Ty::StrList => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
        Ty::Task => serde_json::from_value::<Task>(v.clone()).is_ok(),
    }
}

struct ParamRules {
    inputs: (usize, usize),
    keys: &'static [(&'static str, Ty)],
}

fn rules(op: OpKind) -> ParamRules {
    use Ty::*;
    let (inputs, keys): ((usize, usize), &'static [(&'static str, Ty)]) = match op {
        OpKind::NdviIndex => ((0, 1), &[("layer", Str), ("red", Str), ("nir", Str)]),
        OpKind::ZonalStats => ((0, 1), &[("layer", Str), ("band", Str), ("vector", Str)]),
        OpKind::MaskApply => ((0, 2), &[("layer", Str), ("mask", Str), ("mask_band", Str)]),
        OpKind::Threshold => ((0, 1), &[("layer", Str), ("band", Str), ("value", Num), ("cmp", Str)]),
        OpKind::TimeSeriesExtract => ((0, usize::MAX), &[("layers", StrList), ("band", Str), ("vector", Str)]),
        OpKind::TrainLightweight => ((0, 0), &[("vector", Str), ("slice", UInt)]),
        OpKind::PredictSurface => ((1, 1), &[("mask", Str), ("mask_band", Str), ("slice", UInt)]),
        OpKind::Perceive => ((0, 0), &[("task", Task), ("question", Str), ("cells", StrList), ("timestamp", Num)]),
        OpKind::AttachAttributes => ((0, 1), &[("layer", Str), ("band", Str), ("vector", Str), ("keys", StrList)]),
        OpKind::Export => ((1, 1), &[("name", Str)]),
    };
    ParamRules { inputs, keys }
}

fn schema_err(node: &str, reason: impl Into<String>) -> Error {
    Error::ParamSchema { node: node.to_string(), reason: reason.into() }
}

fn str_list(v: Option<&Value>) -> Vec<String> {
    v.and_then(Value::as_array)
        .map(|a| a.iter().filter_map(|s| s.as_str().map(String::from)).collect())
        .unwrap_or_default()
}

fn validate_params(n: &GraphNode) -> Result<()> {
    let r = rules(n.op);
    if n.inputs.len() < r.inputs.0 || n.inputs.len() > r.inputs.1 {
        return Err(schema_err(&n.id, format!("{} inputs not allowed", n.inputs.len())));
    }
    for (k, v) in &n.params {
        let Some((_, ty)) = r.keys.iter().find(|(name, _)| name == k) else {
            return Err(schema_err(&n.id, format!("unknown parameter `{k}`")));
        };
        if !type_ok(*ty, v) {
            return Err(schema_err(&n.id, format!("parameter `{k}` has the wrong type")));
        }
    }
    let has = |k: &str| n.params.contains_key(k);
    let need = |k: &str, cond: bool| -> Result<()> {
        if cond && !has(k) {
            return Err(schema_err(&n.id, format!("missing parameter `{k}`")));
        }
        Ok(())
    };
    let ni = n.inputs.len();
    match n.op {
        OpKind::NdviIndex => need("layer", ni == 0)?,
        OpKind::ZonalStats => {
            need("layer", ni == 0)?;
            need("vector", true)?;
        }
        OpKind::MaskApply => {
            need("layer", ni == 0)?;
            need("mask", ni < 2)?;
        }
        OpKind::Threshold => {
            need("layer", ni == 0)?;
            need("value", true)?;
            if let Some(c) = n.params.get("cmp").and_then(Value::as_str) {
                if !["gt", "ge", "lt", "le"].contains(&c) {
                    return Err(schema_err(&n.id, format!("unknown comparison `{c}`")));
                }
            }
        }
        OpKind::TimeSeriesExtract => {
            need("vector", true)?;
            if ni + str_list(n.params.get("layers")).len() < 2 {
                return Err(schema_err(&n.id, "a series needs at least two rasters"));
            }
        }
        OpKind::TrainLightweight => need("vector", true)?,
        OpKind::PredictSurface => {}
        OpKind::Perceive => {
            need("task", true)?;
            need("question", true)?;
            need("cells", true)?;
            let cells = str_list(n.params.get("cells"));
            if cells.is_empty() {
                return Err(schema_err(&n.id, "perceive needs at least one cell"));
            }
            for c in cells {
                c.parse::<CellId>().map_err(|_| schema_err(&n.id, format!("bad cell id `{c}`")))?;
            }
        }
        OpKind::AttachAttributes => {
            need("vector", true)?;
            need("keys", true)?;
            let keys = str_list(n.params.get("keys"));
            if keys.is_empty() {
                return Err(schema_err(&n.id, "no attribute keys"));
            }
            for k in &keys {
                match k.as_str() {
                    "shape.area" | "shape.perimeter" | "shape.compactness" => {}
                    "computed.mean" => need("layer", ni == 0)?,
                    other => return Err(schema_err(&n.id, format!("unknown attribute key `{other}`"))),
                }
            }
        }
        OpKind::Export => need("name", true)?,
    }
    Ok(())
}

pub fn build_graph(spec: &GraphSpec) -> Result<ComputeGraph> {
    build_graph_limited(spec, None)
}

/// Validates a spec into a graph, optionally capping the node count.
pub fn build_graph_limited(spec: &GraphSpec, max_nodes: Option<u64>) -> Result<ComputeGraph> {
    if spec.outputs.is_empty() {
        return Err(Error::Schema("graph declares no outputs".into()));
    }
    if let Some(limit) = max_nodes {
        if spec.nodes.len() as u64 > limit {
            return Err(Error::GraphTooLarge { nodes: spec.nodes.len(), limit });
        }
    }
    let mut nodes = BTreeMap::new();
    for n in &spec.nodes {
        if n.id.is_empty() || n.id.contains(['/', ':']) {
            return Err(schema_err(&n.id, "node ids must be non-empty and free of `/` and `:`"));
        }
        if nodes.insert(n.id.clone(), n.clone()).is_some() {
            return Err(Error::DuplicateId(n.id.clone()));
        }
    }
    for n in nodes.values() {
        for i in &n.inputs {
            if !nodes.contains_key(i) {
                return Err(schema_err(&n.id, format!("unknown input `{i}`")));
            }
        }
        validate_params(n)?;
    }
    for o in &spec.outputs {
        if !nodes.contains_key(o) {
            return Err(Error::Schema(format!("unknown output node `{o}`")));
        }
    }

    // Kahn with a sorted ready set
    let mut indeg: BTreeMap<&str, usize> = nodes.keys().map(|k| (k.as_str(), 0)).collect();
    let mut children: BTreeMap<&str, Vec<&str>> = BTreeMap::new();
    for n in nodes.values() {
        for i in &n.inputs {
            *indeg.get_mut(n.id.as_str()).expect("known node") += 1;
            children.entry(i.as_str()).or_default().push(n.id.as_str());
        }
    }
    let mut ready: BTreeSet<&str> = indeg.iter().filter(|(_, d)| **d == 0).map(|(k, _)| *k).collect();
    let mut order = Vec::with_capacity(nodes.len());
    while let Some(next) = ready.pop_first() {
        order.push(next.to_string());
        for c in children.get(next).into_iter().flatten() {
            let d = indeg.get_mut(c).expect("known node");
            *d -= 1;
            if *d == 0 {
                ready.insert(c);
            }
        }
    }
    if order.len() != nodes.len() {
        let stuck = indeg.iter().find(|(_, d)| **d > 0).map(|(k, _)| k.to_string()).unwrap_or_default();
        return Err(Error::CycleDetected(stuck));
    }

    let mut outputs = spec.outputs.clone();
    outputs.sort();
    outputs.dedup();
    let canonical = json!({
        "nodes": nodes.values().collect::<Vec<_>>(),
        "outputs": outputs,
    });
    Ok(ComputeGraph { graph_hash: json_digest(&canonical), nodes, outputs, order })
}

/// Per-call resource limits; `None` means unlimited.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Budget {
    pub max_nodes: Option<u64>,
    pub max_cost_units: Option<u64>,
    pub max_perceptor_calls: Option<u64>,
}

impl Budget {
    pub fn unlimited() -> Self {
        Self::default()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostConsumed {
    pub nodes: u64,
    pub cost_units: u64,
    pub perceptor_calls: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExecStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ContinuationToken {
    pub graph_hash: String,
    /// Nodes still to run, in execution order.
    pub frontier: Vec<String>,
    /// Artifacts of nodes that already ran.
    pub materialized: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutionReport {
    pub status: ExecStatus,
    /// Nodes run by this call.
    pub completed: Vec<String>,
    /// Artifacts produced by this call.
    pub artifacts: Vec<String>,
    pub cost: CostConsumed,
    pub continuation: Option<ContinuationToken>,
}

/// Services some operations need beyond the workspace.
#[derive(Default)]
pub struct ExecEnv<'a> {
    pub provider: Option<&'a dyn EmbeddingProvider>,
    pub perception: Option<(&'a mut PerceptorRegistry, &'a mut MemoryStore)>,
    pub now: TimeStamp,
}

#[derive(Debug, Clone, PartialEq)]
enum NodeValue {
    Raster(GridRaster),
    Vector(VectorLayer),
    Json(Value),
}

/// Declared cost of a node on this workspace: (units, perceptor calls).
pub fn node_cost(node: &GraphNode, ws: &Workspace) -> (u64, u64) {
    if node.op == OpKind::Perceive {
        return (1, 1);
    }
    let cells = reference_grid(ws).map(|g| g.len() as u64).unwrap_or(0);
    let reads = match node.op {
        OpKind::TimeSeriesExtract => (node.inputs.len() + str_list(node.params.get("layers")).len()) as u64,
        _ => 1,
    };
    ((cells * reads).div_ceil(1000).max(1), 0)
}

fn layers_referenced(n: &GraphNode) -> (Vec<String>, Vec<String>) {
    let mut rasters: Vec<String> = ["layer", "mask"]
        .iter()
        .filter_map(|k| n.params.get(*k).and_then(Value::as_str).map(String::from))
        .collect();
    rasters.extend(str_list(n.params.get("layers")));
    let vectors = n.params.get("vector").and_then(Value::as_str).map(String::from).into_iter().collect();
    (rasters, vectors)
}

/// Runs (or resumes) a graph until it completes or the next node would
/// overrun the budget.
pub fn execute(
    graph: &ComputeGraph,
    ws: &mut Workspace,
    env: &mut ExecEnv<'_>,
    budget: &Budget,
    resume: Option<&ContinuationToken>,
) -> Result<ExecutionReport> {
    if let Some(limit) = budget.max_nodes {
        if graph.nodes.len() as u64 > limit {
            return Err(Error::GraphTooLarge { nodes: graph.nodes.len(), limit });
        }
    }
    for n in graph.nodes.values() {
        let (rasters, vectors) = layers_referenced(n);
        for r in rasters {
            ws.raster(&r)?;
        }
        for v in vectors {
            ws.vector(&v)?;
        }
    }

    let mut values: BTreeMap<String, NodeValue> = BTreeMap::new();
    let start = match resume {
        None => 0,
        Some(tok) => {
            if tok.graph_hash != graph.graph_hash {
                return Err(Error::TokenMismatch("token belongs to another graph".into()));
            }
            let done = graph.order.len() - tok.frontier.len();
            if tok.frontier.len() > graph.order.len() || graph.order[done..] != tok.frontier[..] {
                return Err(Error::TokenMismatch("frontier does not match the graph order".into()));
            }
            let expected: Vec<String> = graph.order[..done].iter().map(|n| graph.artifact_id(n)).collect();
            if expected != tok.materialized {
                return Err(Error::TokenMismatch("materialized artifacts do not match".into()));
            }
            for node in &graph.order[..done] {
                values.insert(node.clone(), load_value(ws, &graph.artifact_id(node))?);
            }
            done
        }
    };

    let mut cost = CostConsumed::default();
    let mut completed = Vec::new();
    let mut artifacts = Vec::new();
    let mut next = start;
    while next < graph.order.len() {
        let id = &graph.order[next];
        let node = &graph.nodes[id];
        let (units, calls) = node_cost(node, ws);
        let over = |used: u64, add: u64, lim: Option<u64>| lim.is_some_and(|l| used + add > l);
        if over(cost.cost_units, units, budget.max_cost_units)
            || over(cost.perceptor_calls, calls, budget.max_perceptor_calls)
        {
            break;
        }
        let value = run_node(node, ws, env, &values).map_err(|e| match e {
            Error::MissingLayer(_) | Error::CallBudgetExhausted(_) => e,
            other => Error::RuntimeOp { node: id.clone(), cause: other.to_string() },
        })?;
        let art = materialize(graph, node, ws, &value, env.now)?;
        values.insert(id.clone(), value);
        cost.nodes += 1;
        cost.cost_units += units;
        cost.perceptor_calls += calls;
        completed.push(id.clone());
        artifacts.push(art);
        next += 1;
    }

    let continuation = (next < graph.order.len()).then(|| ContinuationToken {
        graph_hash: graph.graph_hash.clone(),
        frontier: graph.order[next..].to_vec(),
        materialized: graph.order[..next].iter().map(|n| graph.artifact_id(n)).collect(),
    });
    Ok(ExecutionReport {
        status: if continuation.is_some() { ExecStatus::Partial } else { ExecStatus::Complete },
        completed,
        artifacts,
        cost,
        continuation,
    })
}

/// Resumes until complete; fails with `Stalled` if a call makes no progress.
pub fn run_to_completion(
    graph: &ComputeGraph,
    ws: &mut Workspace,
    env: &mut ExecEnv<'_>,
    budget: &Budget,
) -> Result<Vec<ExecutionReport>> {
    let mut reports = Vec::new();
    let mut token: Option<ContinuationToken> = None;
    loop {
        let r = execute(graph, ws, env, budget, token.as_ref())?;
        let done = r.status == ExecStatus::Complete;
        if !done && r.completed.is_empty() {
            let stuck = r.continuation.as_ref().and_then(|c| c.frontier.first().cloned()).unwrap_or_default();
            return Err(Error::Stalled(stuck));
        }
        token = r.continuation.clone();
        reports.push(r);
        if done {
            return Ok(reports);
        }
    }
}

fn load_value(ws: &Workspace, artifact: &str) -> Result<NodeValue> {
    let a = ws
        .artifact(artifact)
        .map_err(|_| Error::TokenMismatch(format!("artifact `{artifact}` is gone")))?;
    Ok(match &a.payload {
        ArtifactPayload::Raster(l) => NodeValue::Raster(ws.raster(l)?.clone()),
        ArtifactPayload::Vector(l) => NodeValue::Vector(ws.vector(l)?.clone()),
        ArtifactPayload::Json(v) => NodeValue::Json(v.clone()),
    })
}

fn materialize(graph: &ComputeGraph, node: &GraphNode, ws: &mut Workspace, v: &NodeValue, now: TimeStamp) -> Result<String> {
    let id = graph.artifact_id(&node.id);
    let layer = match (node.op, node.params.get("name").and_then(Value::as_str)) {
        (OpKind::Export, Some(name)) => format!("export/{name}"),
        _ => graph.layer_name(&node.id),
    };
    let (kind, payload) = match v {
        NodeValue::Raster(r) => {
            ws.add_raster(layer.clone(), r.clone())?;
            (ArtifactKind::Raster, ArtifactPayload::Raster(layer))
        }
        NodeValue::Vector(l) => {
            let mut l = l.clone();
            l.name = layer.clone();
            ws.add_vector(l)?;
            (ArtifactKind::Vector, ArtifactPayload::Vector(layer))
        }
        NodeValue::Json(j) => {
            let kind = if node.op == OpKind::TimeSeriesExtract { ArtifactKind::Plot } else { ArtifactKind::Report };
            (kind, ArtifactPayload::Json(j.clone()))
        }
    };
    ws.put_artifact(Artifact {
        id: id.clone(),
        kind,
        payload,
        provenance: ProvenanceRecord {
            producer: format!("graph:{}", graph.graph_hash),
            inputs: node.inputs.iter().map(|i| graph.artifact_id(i)).collect(),
            created: now,
            param_digest: json_digest(&node.params),
        },
    })?;
    Ok(id)
}

fn param_str<'a>(n: &'a GraphNode, k: &str) -> Option<&'a str> {
    n.params.get(k).and_then(Value::as_str)
}

/// The `i`-th raster operand: the `i`-th input node if present, else the
/// workspace layer named by parameter `key`.
fn raster_operand(
    n: &GraphNode,
    i: usize,
    key: &str,
    ws: &Workspace,
    values: &BTreeMap<String, NodeValue>,
) -> Result<GridRaster> {
    if let Some(input) = n.inputs.get(i) {
        return match &values[input] {
            NodeValue::Raster(r) => Ok(r.clone()),
            _ => Err(Error::InvalidParams(format!("input `{input}` is not a raster"))),
        };
    }
    let name = param_str(n, key).ok_or_else(|| Error::InvalidParams(format!("missing `{key}`")))?;
    Ok(ws.raster(name)?.clone())
}

fn first_band(r: &GridRaster, n: &GraphNode, key: &str) -> Result<String> {
    match param_str(n, key) {
        Some(b) => Ok(b.to_string()),
        None => r
            .bands
            .first()
            .map(|b| b.name.clone())
            .ok_or_else(|| Error::BandMismatch("raster has no bands".into())),
    }
}

fn run_node(
    n: &GraphNode,
    ws: &Workspace,
    env: &mut ExecEnv<'_>,
    values: &BTreeMap<String, NodeValue>,
) -> Result<NodeValue> {
    match n.op {
        OpKind::NdviIndex => {
            let src = raster_operand(n, 0, "layer", ws, values)?;
            let red = param_str(n, "red").unwrap_or("B4");
            let nir = param_str(n, "nir").unwrap_or("B8");
            Ok(NodeValue::Raster(op_ndvi(&src, red, &src, nir)?))
        }
        OpKind::ZonalStats => {
            let src = raster_operand(n, 0, "layer", ws, values)?;
            let band = first_band(&src, n, "band")?;
            let layer = ws.vector(param_str(n, "vector").expect("validated"))?;
            let mut zones = serde_json::Map::new();
            for f in layer.iter() {
                let v = match op_zonal_stats(&src, &band, &f.geometry) {
                    Ok(s) => serde_json::to_value(s)?,
                    Err(Error::NoCellsCovered) => Value::Null,
                    Err(e) => return Err(e),
                };
                zones.insert(f.id.clone(), v);
            }
            Ok(NodeValue::Json(json!({ "band": band, "zones": zones })))
        }
        OpKind::MaskApply => {
            let src = raster_operand(n, 0, "layer", ws, values)?;
            let mask = raster_operand(n, 1, "mask", ws, values)?;
            let mb = first_band(&mask, n, "mask_band")?;
            Ok(NodeValue::Raster(op_mask_apply(&src, &mask, &mb)?))
        }
        OpKind::Threshold => {
            let src = raster_operand(n, 0, "layer", ws, values)?;
            let band = first_band(&src, n, "band")?;
            let value = n.params["value"].as_f64().expect("validated");
            let cmp = param_str(n, "cmp").unwrap_or("gt");
            Ok(NodeValue::Raster(op_threshold(&src, &band, value, cmp)?))
        }
        OpKind::TimeSeriesExtract => {
            let mut stack = Vec::new();
            for i in 0..n.inputs.len() {
                stack.push(raster_operand(n, i, "", ws, values)?);
            }
            for l in str_list(n.params.get("layers")) {
                stack.push(ws.raster(&l)?.clone());
            }
            stack.sort_by_key(|r| r.timestamp);
            let band = param_str(n, "band").unwrap_or("ndvi").to_string();
            let refs: Vec<&GridRaster> = stack.iter().collect();
            let layer = ws.vector(param_str(n, "vector").expect("validated"))?;
            let mut series = serde_json::Map::new();
            for f in layer.iter() {
                let v = match extract_time_series(&refs, &band, &f.geometry) {
                    Ok(s) => json!(s.iter().map(|(t, x)| json!([t.0, x])).collect::<Vec<_>>()),
                    Err(Error::NoCellsCovered) => Value::Null,
                    Err(e) => return Err(e),
                };
                series.insert(f.id.clone(), v);
            }
            Ok(NodeValue::Json(json!({ "band": band, "series": series })))
        }
        OpKind::TrainLightweight => {
            let p = env.provider.ok_or_else(|| Error::InvalidParams("no embedding provider".into()))?;
            let slice = n.params.get("slice").and_then(Value::as_u64).unwrap_or(0) as usize;
            let layer = ws.vector(param_str(n, "vector").expect("validated"))?;
            let examples: Vec<_> = labeled_examples(layer, p, slice)?.into_iter().map(|(_, v, l)| (v, l)).collect();
            let mut model = NearestCentroidModel::default();
            model.fit(&examples)?;
            Ok(NodeValue::Json(json!({
                "model": model,
                "slice": slice,
                "training_digest": training_digest(&examples),
            })))
        }
        OpKind::PredictSurface => {
            let p = env.provider.ok_or_else(|| Error::InvalidParams("no embedding provider".into()))?;
            let NodeValue::Json(m) = &values[&n.inputs[0]] else {
                return Err(Error::InvalidParams("input is not a trained model".into()));
            };
            let model: NearestCentroidModel = serde_json::from_value(m["model"].clone())?;
            let slice = n
                .params
                .get("slice")
                .and_then(Value::as_u64)
                .or_else(|| m["slice"].as_u64())
                .unwrap_or(0) as usize;
            let grid = reference_grid(ws)?;
            let mask = match param_str(n, "mask") {
                Some(l) => Some(ws.raster(l)?),
                None => None,
            };
            let mb = match mask {
                Some(m) => Some(first_band(m, n, "mask_band")?),
                None => None,
            };
            let pool: Vec<CellId> = grid.cells().collect();
            let r = predict_surface(&model, &pool, p, slice, &grid, mask.zip(mb.as_deref()))?;
            Ok(NodeValue::Raster(r))
        }
        OpKind::Perceive => {
            let (reg, mem) = env
                .perception
                .as_mut()
                .ok_or_else(|| Error::InvalidParams("no perceptor registry".into()))?;
            let task: Task = serde_json::from_value(n.params["task"].clone())?;
            let grid = reference_grid(ws)?;
            let t = n
                .params
                .get("timestamp")
                .and_then(Value::as_f64)
                .map(|x| TimeStamp(x as i64))
                .unwrap_or(ws.time_window.end);
            let patches = str_list(n.params.get("cells"))
                .iter()
                .map(|c| {
                    let cell: CellId = c.parse()?;
                    if !grid.contains_cell(cell) {
                        return Err(Error::NotFound(format!("cell {cell}")));
                    }
                    Ok(PatchRef {
                        bbox: grid.cell_bbox(cell),
                        timestamp: t,
                        layer_view: "rgb".into(),
                        cells: vec![cell],
                        zoom: cell_zoom(&grid),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let q = PerceptionQuery { patches, task, question: param_str(n, "question").unwrap_or("").into() };
            let results = reg.perceive(&q, mem, env.now)?;
            Ok(NodeValue::Json(json!({ "results": results })))
        }
        OpKind::AttachAttributes => {
            let mut layer = ws.vector(param_str(n, "vector").expect("validated"))?.clone();
            let keys = str_list(n.params.get("keys"));
            let mut kinds = Vec::new();
            let mut scratch = None;
            for k in &keys {
                kinds.push(match k.as_str() {
                    "shape.area" => AttributeKind::ShapeArea,
                    "shape.perimeter" => AttributeKind::ShapePerimeter,
                    "shape.compactness" => AttributeKind::ShapeCompactness,
                    _ => {
                        let src = raster_operand(n, 0, "layer", ws, values)?;
                        let band = first_band(&src, n, "band")?;
                        scratch = Some(src);
                        AttributeKind::ZonalMean { layer: "__operand".into(), band }
                    }
                });
            }
            let view = match scratch {
                Some(r) => {
                    let mut v = ws.clone();
                    v.rasters.insert("__operand".into(), r);
                    Some(v)
                }
                None => None,
            };
            let src_ws = view.as_ref().unwrap_or(ws);
            let shape_only: Vec<AttributeKind> =
                kinds.iter().filter(|k| !matches!(k, AttributeKind::ZonalMean { .. })).cloned().collect();
            for f in layer.features.values_mut() {
                // as in zonal_stats, a zone without valid cells gets no mean rather than failing the node
                let attrs = match compute_attributes(src_ws, &f.geometry, &kinds, &BTreeMap::new()) {
                    Err(Error::NoCellsCovered) => compute_attributes(src_ws, &f.geometry, &shape_only, &BTreeMap::new())?,
                    other => other?,
                };
                f.attributes.extend(attrs);
            }
            Ok(NodeValue::Vector(layer))
        }
        OpKind::Export => Ok(values[&n.inputs[0]].clone()),
    }
}

fn co_registered(a: &GridRaster, b: &GridRaster) -> Result<()> {
    if a.grid() != b.grid() {
        return Err(Error::BandMismatch("rasters are not co-registered".into()));
    }
    Ok(())
}

/// `(nir - red) / (nir + red)` per cell; nodata where either input is nodata
/// or the denominator is zero.
pub fn op_ndvi(red: &GridRaster, red_band: &str, nir: &GridRaster, nir_band: &str) -> Result<GridRaster> {
    co_registered(red, nir)?;
    let (r, n) = (red.band(red_band)?, nir.band(nir_band)?);
    let nodata = red.nodata;
    let values = r
        .values
        .iter()
        .zip(&n.values)
        .map(|(&rv, &nv)| {
            if red.is_nodata(rv) || nir.is_nodata(nv) || nv + rv == 0.0 {
                nodata
            } else {
                (nv - rv) / (nv + rv)
            }
        })
        .collect();
    let mut out = GridRaster::from_bands(red.grid(), vec![Band { name: "ndvi".into(), values }], nodata)?;
    out.timestamp = red.timestamp;
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ZonalStats {
    pub mean: f64,
    pub min: f64,
    pub max: f64,
    pub count: u64,
}

/// Statistics over cells whose centers fall inside the polygon, nodata excluded.
pub fn op_zonal_stats(raster: &GridRaster, band: &str, polygon: &Polygon) -> Result<ZonalStats> {
    let b = raster.band(band)?;
    let grid = raster.grid();
    let (mut sum, mut min, mut max, mut count) = (0.0, f64::INFINITY, f64::NEG_INFINITY, 0u64);
    for c in grid.cells_in_polygon(polygon) {
        let v = b.values[grid.index(c)];
        if raster.is_nodata(v) {
            continue;
        }
        sum += v;
        min = min.min(v);
        max = max.max(v);
        count += 1;
    }
    if count == 0 {
        return Err(Error::NoCellsCovered);
    }
    Ok(ZonalStats { mean: sum / count as f64, min, max, count })
}

/// Keeps cells where the mask is nonzero; everything else becomes nodata.
pub fn op_mask_apply(src: &GridRaster, mask: &GridRaster, mask_band: &str) -> Result<GridRaster> {
    co_registered(src, mask)?;
    let m = &mask.band(mask_band)?.values;
    let mut out = src.clone();
    for b in &mut out.bands {
        for (v, &mv) in b.values.iter_mut().zip(m) {
            if mask.is_nodata(mv) || mv == 0.0 {
                *v = src.nodata;
            }
        }
    }
    Ok(out)
}

/// Binary `mask` band: 1 where `band cmp value` holds, else 0; nodata kept.
pub fn op_threshold(src: &GridRaster, band: &str, value: f64, cmp: &str) -> Result<GridRaster> {
    let b = src.band(band)?;
    let test: fn(f64, f64) -> bool = match cmp {
        "gt" => |a, b| a > b,
        "ge" => |a, b| a >= b,
        "lt" => |a, b| a < b,
        "le" => |a, b| a <= b,
        other => return Err(Error::InvalidParams(format!("unknown comparison `{other}`"))),
    };
    let values = b
        .values
        .iter()
        .map(|&v| {
            if src.is_nodata(v) {
                src.nodata
            } else if test(v, value) {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let mut out = GridRaster::from_bands(src.grid(), vec![Band { name: "mask".into(), values }], src.nodata)?;
    out.timestamp = src.timestamp;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeoPoint;
    use crate::raster::Grid;

    fn g(w: u32, h: u32) -> Grid {
        Grid { origin: GeoPoint::new(0., 0.), cell_size: 1.0, width: w, height: h }
    }

    fn rn(red: f64, nir: f64) -> GridRaster {
        let mut r = GridRaster::filled(g(1, 1), &["B4", "B8"], 0.0, -9999.0);
        r.bands[0].values[0] = red;
        r.bands[1].values[0] = nir;
        r
    }

    #[test]
    fn ndvi_cases() {
        let v = |red, nir| {
            let r = rn(red, nir);
            op_ndvi(&r, "B4", &r, "B8").unwrap().bands[0].values[0]
        };
        assert_eq!(v(0.5, 0.5), 0.0);
        assert!((v(0.2, 0.8) - 0.6).abs() < 1e-15);
        assert_eq!(v(0.0, 0.0), -9999.0);
        assert_eq!(v(-9999.0, 0.3), -9999.0);
        let other = GridRaster::filled(g(2, 1), &["B8"], 0.3, -9999.0);
        assert!(matches!(op_ndvi(&rn(0.1, 0.2), "B4", &other, "B8"), Err(Error::BandMismatch(_))));
    }

    #[test]
    fn zonal_cases() {
        let c = GridRaster::filled(g(3, 3), &["v"], 7.0, -9999.0);
        let all = Polygon::square_around(GeoPoint::new(1.5, 1.5), 3.0);
        let s = op_zonal_stats(&c, "v", &all).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.count), (7.0, 7.0, 7.0, 9));

        let mut r = GridRaster::filled(g(2, 2), &["v"], 0.0, -9999.0);
        r.bands[0].values = vec![1., 2., 3., 4.];
        let s = op_zonal_stats(&r, "v", &Polygon::square_around(GeoPoint::new(1., 1.), 2.0)).unwrap();
        assert_eq!((s.mean, s.min, s.max, s.count), (2.5, 1.0, 4.0, 4));

        // a small square between cell centers covers none of them
        let between = Polygon::square_around(GeoPoint::new(1.0, 1.0), 0.4);
        assert_eq!(op_zonal_stats(&r, "v", &between), Err(Error::NoCellsCovered));
    }

    fn node(id: &str, op: OpKind, params: Value, inputs: &[&str]) -> GraphNode {
        GraphNode {
            id: id.into(),
            op,
            params: serde_json::from_value(params).unwrap(),
            inputs: inputs.iter().map(|s| s.to_string()).collect(),
        }
    }

    fn chain() -> GraphSpec {
        GraphSpec {
            nodes: vec![
                node("ndvi", OpKind::NdviIndex, json!({"layer": "s2"}), &[]),
                node("mask", OpKind::Threshold, json!({"value": 0.3}), &["ndvi"]),
                node("out", OpKind::Export, json!({"name": "veg"}), &["mask"]),
            ],
            outputs: vec!["out".into()],
        }
    }

    #[test]
    fn build_validates_and_hashes() {
        let a = build_graph(&chain()).unwrap();
        assert_eq!(a.order(), ["ndvi", "mask", "out"]);
        assert_eq!(a.hash(), build_graph(&chain()).unwrap().hash());

        let mut selfref = chain();
        selfref.nodes[0].inputs = vec!["ndvi".into()];
        assert!(matches!(build_graph(&selfref), Err(Error::CycleDetected(_))));

        let mut empty = chain();
        empty.outputs.clear();
        assert!(build_graph(&empty).is_err());

        let bad = json!({"nodes": [{"id": "a", "op": "fourier"}], "outputs": ["a"]});
        assert_eq!(GraphSpec::from_json(&bad), Err(Error::UnknownOp("fourier".into())));

        let mut missing = chain();
        missing.nodes[1].params.clear();
        assert!(matches!(build_graph(&missing), Err(Error::ParamSchema { .. })));
        assert!(matches!(build_graph_limited(&chain(), Some(2)), Err(Error::GraphTooLarge { .. })));
    }

    fn ws() -> Workspace {
        let grid = g(40, 40);
        let mut w = Workspace::new(
            grid.extent().to_polygon(),
            crate::time::TimeWindow::new(TimeStamp(0), TimeStamp(10)).unwrap(),
            1,
        )
        .unwrap();
        let mut r = GridRaster::filled(grid, &["B4", "B8"], 0.0, -9999.0);
        for i in 0..grid.len() {
            r.bands[0].values[i] = 0.1 + (i % 7) as f64 * 0.05;
            r.bands[1].values[i] = 0.2 + (i % 11) as f64 * 0.06;
        }
        w.add_raster("s2", r).unwrap();
        w
    }

    #[test]
    fn budget_halts_and_resumes_identically() {
        let graph = build_graph(&chain()).unwrap();
        let mut free = ws();
        let full = execute(&graph, &mut free, &mut ExecEnv::default(), &Budget::unlimited(), None).unwrap();
        assert_eq!(full.status, ExecStatus::Complete);
        // each node costs ceil(1600/1000) = 2 units
        assert_eq!(full.cost.cost_units, 6);

        let mut tight = ws();
        let budget = Budget { max_cost_units: Some(2), ..Budget::default() };
        let reports = run_to_completion(&graph, &mut tight, &mut ExecEnv::default(), &budget).unwrap();
        assert_eq!(reports.len(), 3);
        assert!(reports.iter().all(|r| r.cost.cost_units <= 2));
        assert_eq!(free.rasters, tight.rasters);
        assert_eq!(free.artifacts, tight.artifacts);

        let stuck = Budget { max_cost_units: Some(1), ..Budget::default() };
        assert!(matches!(run_to_completion(&graph, &mut ws(), &mut ExecEnv::default(), &stuck), Err(Error::Stalled(_))));
    }

    #[test]
    fn token_for_other_graph_rejected() {
        let graph = build_graph(&chain()).unwrap();
        let tok = ContinuationToken { graph_hash: "x".into(), frontier: vec![], materialized: vec![] };
        assert!(matches!(
            execute(&graph, &mut ws(), &mut ExecEnv::default(), &Budget::unlimited(), Some(&tok)),
            Err(Error::TokenMismatch(_))
        ));
    }

    #[test]
    fn missing_layer_reported_before_running() {
        let graph = build_graph(&chain()).unwrap();
        let mut w = ws();
        w.rasters.clear();
        let grid = g(40, 40);
        w.add_raster("other", GridRaster::filled(grid, &["B4"], 0.0, -9999.0)).unwrap();
        assert_eq!(
            execute(&graph, &mut w, &mut ExecEnv::default(), &Budget::unlimited(), None),
            Err(Error::MissingLayer("s2".into()))
        );
        assert!(w.artifacts.is_empty());
    }
}

//! Scripted end-to-end stories. A script is data: a session spec, a sim-user
//! policy and a list of steps that the sim user plays against any
//! [`SessionDriver`], in process or over HTTP.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::attribution::AttributeKind;
use crate::error::{Error, Result};
use crate::geomemory::{MemoryQuery, SpatialFilter};
use crate::geometry::Polygon;
use crate::graph::{Budget, GraphSpec};
use crate::navigation::{NavParams, QueryKind};
use crate::perception::{PerceptionQuery, Task};
use crate::raster::CellId;
use crate::workspace::{digest_hex, json_digest, save_workspace, Artifact, ArtifactKind, ArtifactPayload, ProvenanceRecord};

use super::actions::{Action, OutcomeDetail};
use super::engine::{Session, SessionDriver};
use super::harness::user_seed;
use super::ledger::write_log;
use super::metrics::MetricsReport;
use super::simuser::{SimUser, SimUserPolicy};
use super::SessionSpec;

const BUILTIN: [(&str, &str); 3] = [
    ("summarize", include_str!("../../scenarios/summarize.json")),
    ("crop-map", include_str!("../../scenarios/crop-map.json")),
    ("flood", include_str!("../../scenarios/flood.json")),
];

pub fn builtin_names() -> Vec<&'static str> {
    BUILTIN.iter().map(|(n, _)| *n).collect()
}

pub fn builtin(name: &str) -> Result<ScenarioScript> {
    let (_, text) = BUILTIN
        .iter()
        .find(|(n, _)| *n == name)
        .ok_or_else(|| Error::NotFound(format!("scenario `{name}`")))?;
    ScenarioScript::from_json(text)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "do", rename_all = "snake_case", deny_unknown_fields)]
pub enum ScenarioStep {
    /// One raw action.
    Act { dt: u64, op: Action },
    SeedLabels {
        positives: usize,
        negatives: usize,
        /// Look at the patches of this navigation query first.
        #[serde(default)]
        focus: Option<Focus>,
    },
    PropagateRounds { max_rounds: u32 },
    DualRounds { max_rounds: u32 },
    PerceiveAndReview,
    /// Runs a graph and resumes it until it completes.
    Graph {
        spec: GraphSpec,
        #[serde(default)]
        budget: Budget,
    },
    /// Re-checks the least confident cells of a confidence raster.
    QualityControl { confidence_layer: String, budget: usize },
    /// Diversity navigation at one zoom, then a caption per patch.
    ExploreAndCaption { zoom: u32, budget: usize, question: String },
    /// Reads back everything in memory and files a user summary entry.
    Summarize { query: String },
    /// Computes attributes for every feature of a layer.
    AttributeAll { layer: String, kinds: Vec<AttributeKind> },
    /// Flags footprints whose numeric attribute reaches a threshold.
    ClassifyFootprints { layer: String, attribute: String, threshold: f64 },
    Done,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Focus {
    pub kind: QueryKind,
    pub budget: usize,
    #[serde(default)]
    pub params: NavParams,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioScript {
    pub name: String,
    #[serde(default)]
    pub description: String,
    pub session: SessionSpec,
    #[serde(default)]
    pub policy: SimUserPolicy,
    #[serde(default)]
    pub user: u32,
    pub steps: Vec<ScenarioStep>,
}

impl ScenarioScript {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Schema(format!("scenario script: {e}")))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&fs::read_to_string(path)?)
    }

    /// The session spec with the run's seed applied.
    pub fn session_spec(&self, seed: u64) -> SessionSpec {
        SessionSpec { seed, ..self.session.clone() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Caption {
    pub zoom: u32,
    pub cells: usize,
    pub bbox: [f64; 4],
    pub label: Option<String>,
    pub note: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Footprint {
    pub id: String,
    pub value: Option<f64>,
    pub flagged: bool,
}

/// What the actor saw and produced; contains nothing from the reference.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub notes: Vec<Value>,
    pub captions: Vec<Caption>,
    /// Caption label counts over all patches.
    pub summary: BTreeMap<String, usize>,
    pub footprints: Vec<Footprint>,
    pub graphs: Vec<String>,
}

fn note(step: &str, v: Value) -> Value {
    json!({ "step": step, "result": v })
}

/// Plays a script against a driver and declares done.
pub fn drive_scenario<D: SessionDriver + ?Sized>(
    driver: &mut D,
    script: &ScenarioScript,
    user: u64,
) -> Result<ScenarioReport> {
    let seed = driver.spec().seed;
    let mut report = ScenarioReport { name: script.name.clone(), seed, ..Default::default() };
    let policy = script.policy.clone();
    let latency = policy.tool_latency_s;
    let mut u = SimUser::new(driver, policy, user)?;
    for step in &script.steps {
        if u.is_finished() {
            break;
        }
        match step {
            ScenarioStep::Act { dt, op } => {
                let out = u.act(*dt, op.clone())?;
                report.notes.push(note(op.name(), json!({ "applied": out.is_some() })));
            }
            ScenarioStep::SeedLabels { positives, negatives, focus } => {
                let mut first = Vec::new();
                if let Some(f) = focus {
                    let op = Action::Navigate { kind: f.kind, budget: f.budget, params: f.params.clone() };
                    let Some(out) = u.act(latency, op)? else { break };
                    if let OutcomeDetail::Context(bundle) = out.detail {
                        first = bundle.patches.iter().flat_map(|p| p.cells.iter().copied()).collect();
                    }
                }
                u.seed_labels_from(&first, *positives, *negatives)?;
                let v = json!({ "positives": positives, "negatives": negatives, "focus_cells": first.len() });
                report.notes.push(note("seed_labels", v));
            }
            ScenarioStep::PropagateRounds { max_rounds } => {
                u.propagate_rounds(*max_rounds)?;
                report.notes.push(note("propagate_rounds", json!({ "max_rounds": max_rounds })));
            }
            ScenarioStep::DualRounds { max_rounds } => {
                u.dual_rounds(*max_rounds)?;
                report.notes.push(note("dual_rounds", json!({ "max_rounds": max_rounds })));
            }
            ScenarioStep::PerceiveAndReview => {
                u.perceive_and_review()?;
                report.notes.push(note("perceive_and_review", Value::Null));
            }
            ScenarioStep::Graph { spec, budget } => {
                let mut op = Action::RunGraph { spec: spec.clone(), budget: *budget };
                let mut runs = 0u32;
                loop {
                    let Some(out) = u.act(latency, op)? else { break };
                    runs += 1;
                    let OutcomeDetail::Graph(r) = out.detail else {
                        return Err(Error::Schema("graph action returned no report".into()));
                    };
                    match r.continuation {
                        Some(tok) if !r.completed.is_empty() => {
                            op = Action::ResumeGraph { hash: tok.graph_hash, budget: *budget };
                        }
                        Some(tok) => return Err(Error::Stalled(tok.frontier.first().cloned().unwrap_or_default())),
                        None => {
                            report.graphs.push(r.artifacts.last().cloned().unwrap_or_default());
                            break;
                        }
                    }
                }
                report.notes.push(note("graph", json!({ "calls": runs })));
            }
            ScenarioStep::QualityControl { confidence_layer, budget } => {
                let params = NavParams { confidence_layer: Some(confidence_layer.clone()), ..NavParams::default() };
                let Some(out) = u.act(latency, Action::Navigate { kind: QueryKind::QualityControl, budget: *budget, params })?
                else {
                    break;
                };
                let OutcomeDetail::Context(bundle) = out.detail else {
                    return Err(Error::Schema("navigation returned no context".into()));
                };
                let cells: Vec<CellId> = bundle.patches.iter().flat_map(|p| p.cells.iter().copied()).collect();
                let fixed = u.quality_check(&cells)?;
                report.notes.push(note("quality_control", json!({ "checked": cells.len(), "fixed": fixed })));
            }
            ScenarioStep::ExploreAndCaption { zoom, budget, question } => {
                let params = NavParams { zoom: Some(*zoom), ..NavParams::default() };
                let Some(out) = u.act(latency, Action::Navigate { kind: QueryKind::Explore, budget: *budget, params })?
                else {
                    break;
                };
                let OutcomeDetail::Context(bundle) = out.detail else {
                    return Err(Error::Schema("navigation returned no context".into()));
                };
                let query = PerceptionQuery { patches: bundle.patches.clone(), task: Task::Caption, question: question.clone() };
                let Some(out) = u.act(latency, Action::Perceive { query, suggest: None })? else { break };
                let OutcomeDetail::Perception(results) = out.detail else {
                    return Err(Error::Schema("perception returned no results".into()));
                };
                for (p, r) in bundle.patches.iter().zip(results) {
                    if let Some(l) = &r.label {
                        *report.summary.entry(l.clone()).or_default() += 1;
                    }
                    report.captions.push(Caption {
                        zoom: p.zoom,
                        cells: p.cells.len(),
                        bbox: [p.bbox.min_x, p.bbox.min_y, p.bbox.max_x, p.bbox.max_y],
                        label: r.label,
                        note: r.note,
                    });
                }
                report.notes.push(note("explore_and_caption", json!({ "zoom": zoom, "patches": bundle.patches.len() })));
            }
            ScenarioStep::Summarize { query } => {
                let geometry = match u.driver_spec().roi.clone() {
                    Some(p) => p,
                    None => u.eyes().extent().to_polygon(),
                };
                let all = MemoryQuery { spatial: Some(SpatialFilter::BBox(geometry.bbox())), ..MemoryQuery::default() };
                let Some(out) = u.act(latency, Action::MemoryRetrieve { query: all })? else {
                    break;
                };
                let OutcomeDetail::Memory(entries) = out.detail else {
                    return Err(Error::Schema("memory retrieval returned no entries".into()));
                };
                let text = report.summary.iter().map(|(k, n)| format!("{k}: {n}")).collect::<Vec<_>>().join(", ");
                let op = Action::MemoryWrite {
                    geometry,
                    query: query.clone(),
                    output_ref: Some(format!("report/{}", script.name)),
                    notes: format!("{} observations; {text}", entries.len()),
                };
                u.act(latency, op)?;
                report.notes.push(note("summarize", json!({ "entries": entries.len() })));
            }
            ScenarioStep::AttributeAll { layer, kinds } => {
                let ids: Vec<String> = u.driver_vector(layer)?.iter().map(|f| f.id.clone()).collect();
                for id in &ids {
                    let op = Action::Attribute { layer: layer.clone(), feature_id: id.clone(), kinds: kinds.clone() };
                    if u.act(latency, op)?.is_none() {
                        break;
                    }
                }
                report.notes.push(note("attribute_all", json!({ "layer": layer, "features": ids.len() })));
            }
            ScenarioStep::ClassifyFootprints { layer, attribute, threshold } => {
                let l = u.driver_vector(layer)?;
                report.footprints = l
                    .iter()
                    .map(|f| {
                        let value = f.attributes.get(attribute).and_then(|a| a.as_number());
                        Footprint { id: f.id.clone(), value, flagged: value.is_some_and(|v| v >= *threshold) }
                    })
                    .collect();
                let flagged = report.footprints.iter().filter(|f| f.flagged).count();
                report.notes.push(note("classify_footprints", json!({ "footprints": l.len(), "flagged": flagged })));
            }
            ScenarioStep::Done => break,
        }
    }
    u.done()?;
    Ok(report)
}

/// Share of truly destroyed footprints whose centroid falls inside a flagged
/// footprint, computed by the evaluator after the session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FootprintCheck {
    pub footprints: usize,
    pub destroyed: usize,
    pub flagged: usize,
    pub destroyed_hit: usize,
    pub fraction: Option<f64>,
}

pub struct ScenarioOutcome {
    pub script: ScenarioScript,
    pub report: ScenarioReport,
    pub metrics: MetricsReport,
    pub check: Option<FootprintCheck>,
    pub session: Session,
}

pub fn run_scenario(script: &ScenarioScript, seed: u64) -> Result<ScenarioOutcome> {
    let mut session = Session::new(script.session_spec(seed))?;
    let report = drive_scenario(&mut session, script, user_seed(script.user, seed))?;
    let metrics = session.metrics()?;
    let check = if report.footprints.is_empty() { None } else { Some(footprint_check(&mut session, &report)?) };
    Ok(ScenarioOutcome { script: script.clone(), report, metrics, check, session })
}

fn footprint_check(session: &mut Session, report: &ScenarioReport) -> Result<FootprintCheck> {
    let flagged: Vec<Polygon> = report
        .footprints
        .iter()
        .filter(|f| f.flagged)
        .map(|f| session.world().buildings.iter().find(|b| b.id == f.id).map(|b| b.footprint.clone()))
        .collect::<Option<_>>()
        .ok_or_else(|| Error::NotFound("flagged footprint is not a building".into()))?;
    let buildings = session.world().buildings.clone();
    let (mut destroyed, mut hit) = (0, 0);
    for b in &buildings {
        if session.reference_share(&b.cells) < 0.5 {
            continue;
        }
        destroyed += 1;
        let c = b.footprint.centroid();
        if flagged.iter().any(|p| p.contains_point(&c)) {
            hit += 1;
        }
    }
    Ok(FootprintCheck {
        footprints: buildings.len(),
        destroyed,
        flagged: flagged.len(),
        destroyed_hit: hit,
        fraction: (destroyed > 0).then(|| hit as f64 / destroyed as f64),
    })
}

fn hash_tree(root: &Path, dir: &Path, out: &mut BTreeMap<String, String>) -> Result<()> {
    let mut entries: Vec<_> = fs::read_dir(dir)?.collect::<std::io::Result<_>>()?;
    entries.sort_by_key(|e| e.path());
    for e in entries {
        let p = e.path();
        if p.is_dir() {
            hash_tree(root, &p, out)?;
        } else {
            let rel = p.strip_prefix(root).expect("under root").to_string_lossy().replace('\\', "/");
            out.insert(rel, digest_hex(&fs::read(&p)?));
        }
    }
    Ok(())
}

impl ScenarioOutcome {
    /// Writes `workspace/` (a reloadable bundle with the report as an
    /// artifact), `metrics.json`, `log.jsonl` and `report.json`, and returns a
    /// digest per written file.
    pub fn export(&self, out: &Path) -> Result<BTreeMap<String, String>> {
        fs::create_dir_all(out)?;
        let mut ws = self.session.workspace().clone();
        ws.put_artifact(Artifact {
            id: format!("report/{}", self.script.name),
            kind: ArtifactKind::Report,
            payload: ArtifactPayload::Json(serde_json::to_value(&self.report)?),
            provenance: ProvenanceRecord {
                producer: format!("scenario:{}", self.script.name),
                inputs: Vec::new(),
                created: self.session.clock(),
                param_digest: json_digest(&self.script),
            },
        })?;
        let bundle = out.join("workspace");
        if bundle.exists() {
            fs::remove_dir_all(&bundle)?;
        }
        save_workspace(&ws, &bundle)?;
        let metrics = json!({ "metrics": self.metrics, "footprint_check": self.check });
        fs::write(out.join("metrics.json"), serde_json::to_vec_pretty(&metrics)?)?;
        fs::write(out.join("report.json"), serde_json::to_vec_pretty(&self.report)?)?;
        let mut log = Vec::new();
        write_log(self.session.log(), &mut log)?;
        fs::write(out.join("log.jsonl"), log)?;
        let mut hashes = BTreeMap::new();
        hash_tree(out, out, &mut hashes)?;
        Ok(hashes)
    }
}

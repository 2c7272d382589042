use std::collections::{BTreeMap, BTreeSet};

use crate::attribution::{compute_attributes, ExternalSource};
use crate::dual::{dual_loop_step, LoopState, NearestCentroidModel};
use crate::embeddings::{cmp_score, EmbeddingIndex, EmbeddingProvider};
use crate::error::{Error, Result};
use crate::geomemory::{Author, MemoryStore};
use crate::geometry::Polygon;
use crate::graph::{build_graph_limited, execute, ComputeGraph, ContinuationToken, ExecEnv};
use crate::navigation::{build_context, NavContext};
use crate::perception::{MockOraclePerceptor, PerceptorRegistry, TaskKind};
use crate::propagation::{batch_review, propagate, SeedSet};
use crate::raster::{CellId, GridRaster, DEFAULT_NODATA};
use crate::seed;
use crate::time::TimeStamp;
use crate::geometry::LOCAL_CRS;
use crate::vector::{Feature, LabelOrigin, LabelStatus, VectorLayer};
use crate::workspace::Workspace;

use super::actions::*;
use super::evaluator::Evaluator;
use super::ledger::{EditEvent, EditKind, EndReason, LogRecord, LOG_FORMAT, LOG_VERSION};
use super::metrics::{
    compute_progress_auc, compute_rework_rate, compute_suggestion_bias, compute_time_to_threshold, review_rates,
    MetricsReport, QualitySample, Validity,
};
use super::world::{generate_world, World, LABELS_LAYER};
use super::{CapabilityLevel, SessionSpec};

/// Anything that can run a session on an actor's behalf: in process or over HTTP.
pub trait SessionDriver {
    fn spec(&self) -> &SessionSpec;
    fn apply(&mut self, step: &Step) -> Result<ActionOutcome>;
    fn view(&mut self) -> Result<SessionView>;
    /// A vector layer as the actor may see it.
    fn vector(&mut self, name: &str) -> Result<VectorLayer>;
    fn metrics(&mut self) -> Result<MetricsReport>;
    fn ledger(&mut self) -> Result<Vec<EditEvent>>;
}

/// Effects of an action, computed before any session state changes.
#[derive(Default)]
struct Staged {
    layers: Vec<VectorLayer>,
    rasters: Vec<(String, GridRaster)>,
    workspace: Option<Workspace>,
    events: Vec<EditEvent>,
    created: Vec<FeatureView>,
    units: u64,
    next_feature: Option<u64>,
    loop_state: Option<LoopState>,
    graph: Option<(ComputeGraph, Option<ContinuationToken>)>,
}

pub struct Session {
    spec: SessionSpec,
    world: World,
    roi: Polygon,
    roi_cells: Vec<bool>,
    evaluator: Evaluator,
    memory: MemoryStore,
    perceptors: PerceptorRegistry,
    clock: i64,
    next_tick: i64,
    finished: Option<EndReason>,
    ledger: Vec<EditEvent>,
    samples: Vec<QualitySample>,
    log: Vec<LogRecord>,
    cost: u64,
    next_feature: u64,
    loop_state: LoopState,
    graphs: BTreeMap<String, (ComputeGraph, Option<ContinuationToken>)>,
    indexes: BTreeMap<usize, EmbeddingIndex>,
}

fn units_for_cells(n: usize) -> u64 {
    (n as u64).div_ceil(1000).max(1)
}

fn event(kind: EditKind, f: &Feature) -> EditEvent {
    EditEvent {
        t: TimeStamp(0),
        kind,
        target: f.id.clone(),
        origin: f.label_origin,
        label: f.label.clone(),
        prior_label: None,
        prior_status: None,
        cell: f.cell,
    }
}

/// Cell-based label layers are checked for geometry, CRS and required fields.
pub(crate) fn layer_validity(layer: &VectorLayer, crs: &str) -> Validity {
    let committed: Vec<&Feature> = layer.iter().filter(|f| f.status == LabelStatus::Committed).collect();
    Validity {
        geometry_valid: committed.iter().all(|f| f.geometry.validate().is_ok()),
        crs_consistent: layer.crs == crs && crs == LOCAL_CRS,
        schema_valid: committed
            .iter()
            .all(|f| f.validate().is_ok() && f.label.as_deref().is_some_and(|l| !l.is_empty())),
    }
}

/// Metrics from a finished (or running) session's records. Shared with replay
/// so both paths use one formula.
#[allow(clippy::too_many_arguments)]
pub(crate) fn compute_metrics(
    spec: &SessionSpec,
    samples: &[QualitySample],
    ledger: &[EditEvent],
    layer: &VectorLayer,
    crs: &str,
    evaluator: &mut Evaluator,
    cost: u64,
    end: TimeStamp,
) -> Result<MetricsReport> {
    let (accept_rate, reject_rate) = review_rates(ledger);
    Ok(MetricsReport {
        time_to_threshold: compute_time_to_threshold(samples, spec.tau)?,
        progress_auc: compute_progress_auc(samples, spec.t_max)?,
        rework_rate: compute_rework_rate(ledger),
        suggestion_bias: compute_suggestion_bias(&evaluator.judged(layer)),
        accept_rate,
        reject_rate,
        compute_cost: cost,
        validity: layer_validity(layer, crs),
        final_quality: samples.last().map(|s| s.q).unwrap_or(0.0),
        n_edits: ledger.iter().filter(|e| e.kind.is_edit()).count() as u64,
        end_time: end,
    })
}

impl Session {
    pub fn new(spec: SessionSpec) -> Result<Self> {
        spec.validate()?;
        let mut world = generate_world(&spec.world, spec.seed)?;
        let roi = spec.roi.clone().unwrap_or_else(|| world.grid.extent().to_polygon());
        let cells = world.grid.cells_in_polygon(&roi);
        if cells.is_empty() {
            return Err(Error::OutOfRoi);
        }
        let mut roi_cells = vec![false; world.grid.len()];
        for c in &cells {
            roi_cells[world.grid.index(*c)] = true;
        }
        if let Some(w) = spec.window {
            world.workspace.time_window = w;
        }
        let evaluator = Evaluator::new(&world, &spec, &roi);
        let mut perceptors = PerceptorRegistry::new();
        let oracle = MockOraclePerceptor::new(world.scene.clone(), spec.perceptor_noise, seed::mix(&[spec.seed, 0x9e7c]))?;
        for kind in [TaskKind::Classify, TaskKind::Detect, TaskKind::Caption, TaskKind::Change] {
            perceptors.register(kind, Box::new(oracle.clone()));
        }
        let mut s = Self {
            memory: MemoryStore::new(roi.clone()),
            roi,
            roi_cells,
            evaluator,
            perceptors,
            clock: 0,
            next_tick: 0,
            finished: None,
            ledger: Vec::new(),
            samples: Vec::new(),
            log: vec![LogRecord::Header {
                t: TimeStamp(0),
                format: LOG_FORMAT.into(),
                version: LOG_VERSION,
                spec: Box::new(spec.clone()),
            }],
            cost: 0,
            next_feature: 0,
            loop_state: LoopState::default(),
            graphs: BTreeMap::new(),
            indexes: BTreeMap::new(),
            world,
            spec,
        };
        s.ticks_through(0)?;
        if s.spec.t_max == 0 {
            s.finish_at(0, EndReason::TimeBudget)?;
        }
        Ok(s)
    }

    pub fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    pub fn roi(&self) -> &Polygon {
        &self.roi
    }

    pub fn clock(&self) -> TimeStamp {
        TimeStamp(self.clock)
    }

    pub fn is_finished(&self) -> bool {
        self.finished.is_some()
    }

    pub fn end_reason(&self) -> Option<EndReason> {
        self.finished
    }

    pub fn log(&self) -> &[LogRecord] {
        &self.log
    }

    pub fn ledger(&self) -> &[EditEvent] {
        &self.ledger
    }

    pub fn samples(&self) -> &[QualitySample] {
        &self.samples
    }

    pub fn workspace(&self) -> &Workspace {
        &self.world.workspace
    }

    pub fn memory(&self) -> &MemoryStore {
        &self.memory
    }

    pub fn world(&self) -> &World {
        &self.world
    }

    pub fn perceptor_calls(&self) -> u64 {
        self.perceptors.calls()
    }

    pub fn labels(&self) -> &VectorLayer {
        self.world.workspace.vectors.get(LABELS_LAYER).expect("labels layer exists")
    }

    pub fn evaluator_audit(&self) -> (u64, u64) {
        (self.evaluator.reference_reads(), self.evaluator.evaluations())
    }

    /// Share of `cells` whose reference class is the task class. Aggregate
    /// only, for post-session checks.
    pub fn reference_share(&mut self, cells: &[CellId]) -> f64 {
        self.evaluator.positive_share(cells)
    }

    pub fn view(&self) -> SessionView {
        SessionView {
            clock: TimeStamp(self.clock),
            t_max: self.spec.t_max,
            finished: self.finished.is_some(),
            capability: self.spec.capability,
            features: self.labels().iter().map(FeatureView::from).collect(),
        }
    }

    pub fn metrics(&mut self) -> Result<MetricsReport> {
        let layer = self.labels().clone();
        let crs = self.world.workspace.crs.clone();
        compute_metrics(
            &self.spec,
            &self.samples,
            &self.ledger,
            &layer,
            &crs,
            &mut self.evaluator,
            self.cost,
            TimeStamp(self.clock),
        )
    }

    fn sample(&mut self, t: i64) -> Result<()> {
        let layer = self.world.workspace.vectors.get(LABELS_LAYER).expect("labels layer exists");
        let q = self.evaluator.quality(layer)?;
        let s = QualitySample { t: TimeStamp(t), q, metric: self.evaluator.metric() };
        self.samples.push(s);
        self.log.push(LogRecord::Quality(s));
        Ok(())
    }

    fn ticks_before(&mut self, end: i64) -> Result<()> {
        while self.next_tick < end && self.next_tick <= self.spec.t_max {
            self.sample(self.next_tick)?;
            self.next_tick += self.spec.eval_interval;
        }
        Ok(())
    }

    fn ticks_through(&mut self, end: i64) -> Result<()> {
        self.ticks_before(end + 1)
    }

    fn finish_at(&mut self, t: i64, reason: EndReason) -> Result<()> {
        self.ticks_through(t)?;
        if self.samples.last().map(|s| s.t.0) != Some(t) {
            self.sample(t)?;
        }
        self.clock = t;
        self.finished = Some(reason);
        self.log.push(LogRecord::End { t: TimeStamp(t), reason });
        Ok(())
    }

    /// Runs one actor step. Failed steps change nothing, including the clock.
    pub fn apply(&mut self, step: &Step) -> Result<ActionOutcome> {
        if self.finished.is_some() {
            return Err(Error::SessionFinished);
        }
        let need = step.op.required_level();
        if self.spec.capability < need {
            return Err(Error::CapabilityDenied { op: step.op.name().into(), level: self.spec.capability });
        }
        let end = self.clock.checked_add(i64::try_from(step.dt).unwrap_or(i64::MAX)).unwrap_or(i64::MAX);
        if end > self.spec.t_max {
            self.finish_at(self.spec.t_max, EndReason::TimeBudget)?;
            return Ok(ActionOutcome {
                applied: false,
                clock: TimeStamp(self.clock),
                finished: true,
                created: Vec::new(),
                detail: OutcomeDetail::None,
            });
        }
        let now = TimeStamp(end);
        let (staged, detail) = self.stage(&step.op, now)?;

        self.ticks_before(end)?;
        let start = self.clock;
        let Staged { layers, rasters, workspace, mut events, created, units, next_feature, loop_state, graph } = staged;
        if let Some(ws) = workspace {
            self.world.workspace = ws;
        }
        for l in layers {
            self.world.workspace.vectors.insert(l.name.clone(), l);
        }
        for (name, r) in rasters {
            self.world.workspace.rasters.insert(name, r);
        }
        if let Some(n) = next_feature {
            self.next_feature = n;
        }
        if let Some(ls) = loop_state {
            self.loop_state = ls;
        }
        if let Some((g, tok)) = graph {
            self.graphs.insert(g.hash().to_string(), (g, tok));
        }
        self.clock = end;
        self.log.push(LogRecord::Action { t: now, start: TimeStamp(start), dt: step.dt, op: Box::new(step.op.clone()) });
        for e in &mut events {
            e.t = now;
            self.log.push(LogRecord::Event(e.clone()));
        }
        self.ledger.extend(events);
        if units > 0 {
            self.cost += units;
            self.log.push(LogRecord::Compute { t: now, op: step.op.name().into(), units });
        }
        self.ticks_through(end)?;
        if matches!(step.op, Action::Done) {
            self.finish_at(end, EndReason::Done)?;
        } else if end >= self.spec.t_max {
            self.finish_at(self.spec.t_max, EndReason::TimeBudget)?;
        }
        Ok(ActionOutcome { applied: true, clock: TimeStamp(self.clock), finished: self.finished.is_some(), created, detail })
    }

    fn in_roi(&self, c: CellId) -> bool {
        self.world.grid.contains_cell(c) && self.roi_cells[self.world.grid.index(c)]
    }

    fn mask(&self, m: &Option<MaskRef>) -> Result<Option<Vec<bool>>> {
        let Some(m) = m else { return Ok(None) };
        let r = self.world.workspace.raster(&m.layer)?;
        crate::dual::mask_cells(&self.world.grid, Some((r, &m.band))).map(Some)
    }

    fn index(&mut self, slice: usize) -> Result<&EmbeddingIndex> {
        if !self.indexes.contains_key(&slice) {
            let idx = EmbeddingIndex::from_provider(&self.world.provider, &self.world.grid, slice)?;
            self.indexes.insert(slice, idx);
        }
        Ok(&self.indexes[&slice])
    }

    fn new_suggestion(&self, id: u64, cell: CellId, label: &str, origin: LabelOrigin) -> Feature {
        Feature {
            id: format!("f{id:06}"),
            geometry: self.world.grid.cell_polygon(cell),
            attributes: BTreeMap::new(),
            label: Some(label.to_string()),
            label_origin: origin,
            status: LabelStatus::Suggested,
            cell: Some(cell),
        }
    }

    fn stage(&mut self, op: &Action, now: TimeStamp) -> Result<(Staged, OutcomeDetail)> {
        let grid = self.world.grid;
        let mut st = Staged::default();
        let detail = match op {
            Action::Wait | Action::Done => OutcomeDetail::None,
            Action::ManualLabel { cell, label } => {
                if !grid.contains_cell(*cell) || !self.in_roi(*cell) {
                    return Err(Error::OutOfRoi);
                }
                if label.is_empty() {
                    return Err(Error::InvalidParams("label must not be empty".into()));
                }
                let mut layer = self.labels().clone();
                let live = layer.iter().find(|f| f.cell == Some(*cell) && f.status.is_live()).map(|f| f.id.clone());
                match live {
                    Some(id) => {
                        let f = layer.get_mut(&id)?;
                        if f.status != LabelStatus::Committed {
                            return Err(Error::InvalidParams(format!("cell {cell} has a pending label `{id}`")));
                        }
                        if f.label.as_deref() == Some(label.as_str()) {
                            return Err(Error::InvalidParams(format!("cell {cell} already carries `{label}`")));
                        }
                        let prior = f.label.replace(label.clone());
                        f.label_origin = LabelOrigin::Manual;
                        f.transition(LabelStatus::Committed)?;
                        let mut e = event(EditKind::Overwrite, f);
                        e.prior_label = prior;
                        e.prior_status = Some(LabelStatus::Committed);
                        st.events.push(e);
                    }
                    None => {
                        let mut f = self.new_suggestion(self.next_feature, *cell, label, LabelOrigin::Manual);
                        f.status = LabelStatus::Committed;
                        st.events.push(event(EditKind::Create, &f));
                        st.created.push(FeatureView::from(&f));
                        layer.insert(f)?;
                        st.next_feature = Some(self.next_feature + 1);
                    }
                }
                st.layers.push(layer);
                OutcomeDetail::None
            }
            Action::DeleteFeature { id } => {
                let mut layer = self.labels().clone();
                let f = layer.get(id)?.clone();
                if !f.status.is_live() {
                    return Err(Error::InvalidParams(format!("`{id}` was rejected and cannot be deleted")));
                }
                layer.features.remove(id);
                let mut e = event(EditKind::Delete, &f);
                e.prior_label = f.label.clone();
                e.prior_status = Some(f.status);
                st.events.push(e);
                st.layers.push(layer);
                OutcomeDetail::None
            }
            Action::Propagate { label, positives, negatives, k, slice, mask } => {
                if label.is_empty() {
                    return Err(Error::InvalidParams("label must not be empty".into()));
                }
                let allowed = self.mask(mask)?;
                let pool: Vec<String> = grid
                    .cells()
                    .filter(|c| self.in_roi(*c) && allowed.as_ref().is_none_or(|m| m[grid.index(*c)]))
                    .map(|c| c.to_string())
                    .collect();
                let seeds = SeedSet { label: label.clone(), positives: positives.clone(), negatives: negatives.clone() };
                let mut layer = self.labels().clone();
                let index = self.index(*slice)?.clone();
                let candidates = propagate(&seeds, &layer, &index, &pool, *k)?;
                let mut next = self.next_feature;
                for c in &candidates {
                    let cell: CellId = c.id.parse()?;
                    let f = self.new_suggestion(next, cell, label, LabelOrigin::Propagation);
                    next += 1;
                    st.events.push(event(EditKind::Suggest, &f));
                    st.created.push(FeatureView::from(&f));
                    layer.insert(f)?;
                }
                st.next_feature = Some(next);
                st.layers.push(layer);
                st.units = units_for_cells(grid.len());
                OutcomeDetail::Candidates(candidates)
            }
            Action::Review { batch } => {
                let mut layer = self.labels().clone();
                let decisions = batch_review(&mut layer, batch)?;
                for (id, _) in decisions {
                    let f = layer.get(&id)?;
                    let kind = if f.status == LabelStatus::Accepted { EditKind::Accept } else { EditKind::Reject };
                    let mut e = event(kind, f);
                    e.prior_status = Some(LabelStatus::Suggested);
                    st.events.push(e);
                }
                st.layers.push(layer);
                OutcomeDetail::None
            }
            Action::Commit { ids } => {
                let mut layer = self.labels().clone();
                let targets: Vec<String> = match ids {
                    Some(v) if v.is_empty() => return Err(Error::EmptyBatch),
                    Some(v) => {
                        let uniq: BTreeSet<&String> = v.iter().collect();
                        if uniq.len() != v.len() {
                            return Err(Error::InvalidParams("duplicate ids in commit".into()));
                        }
                        v.clone()
                    }
                    None => layer.iter().filter(|f| f.status == LabelStatus::Accepted).map(|f| f.id.clone()).collect(),
                };
                for id in &targets {
                    let f = layer.get_mut(id)?;
                    if f.status != LabelStatus::Accepted {
                        return Err(Error::IllegalTransition { from: f.status, to: LabelStatus::Committed });
                    }
                    f.transition(LabelStatus::Committed)?;
                    let mut e = event(EditKind::Commit, f);
                    e.prior_status = Some(LabelStatus::Accepted);
                    st.events.push(e);
                }
                st.layers.push(layer);
                OutcomeDetail::None
            }
            Action::DualLoopStep(p) => {
                let mask_raster = match &p.mask {
                    Some(m) => Some((self.world.workspace.raster(&m.layer)?, m.band.as_str())),
                    None => None,
                };
                let mut state = self.loop_state.clone();
                let mut model = NearestCentroidModel::default();
                let layer = self.labels();
                let step = dual_loop_step(
                    &mut state,
                    layer,
                    &self.world.provider,
                    p.slice,
                    &grid,
                    mask_raster,
                    p.queue_len,
                    &mut model,
                )?;
                let mut layer = layer.clone();
                if let Some(target) = &p.suggest {
                    let k = step
                        .surface
                        .raster
                        .bands
                        .iter()
                        .position(|b| &b.name == target)
                        .ok_or_else(|| Error::InvalidParams(format!("model has no class `{target}`")))?;
                    let occupied: BTreeSet<CellId> = layer.iter().filter_map(|f| f.cell).collect();
                    let mut picks: Vec<(f64, CellId)> = grid
                        .cells()
                        .filter(|c| self.in_roi(*c) && !occupied.contains(c))
                        .filter(|c| step.surface.argmax(*c) == Some(k))
                        .map(|c| (step.surface.raster.bands[k].values[grid.index(c)], c))
                        .collect();
                    picks.sort_by(|a, b| cmp_score(b.0, a.0).then(a.1.cmp(&b.1)));
                    if let Some(m) = p.max_suggestions {
                        picks.truncate(m);
                    }
                    let mut next = self.next_feature;
                    for (_, cell) in picks {
                        let f = self.new_suggestion(next, cell, target, LabelOrigin::DualModel);
                        next += 1;
                        st.events.push(event(EditKind::Suggest, &f));
                        st.created.push(FeatureView::from(&f));
                        layer.insert(f)?;
                    }
                    st.next_feature = Some(next);
                }
                let mut conf = GridRaster::filled(grid, &["confidence"], DEFAULT_NODATA, DEFAULT_NODATA);
                for c in grid.cells() {
                    if let Some(pmax) = step.surface.max_probability(c) {
                        conf.bands[0].values[grid.index(c)] = pmax;
                    }
                }
                st.rasters.push(("dual/surface".into(), step.surface.raster.clone()));
                st.rasters.push(("dual/confidence".into(), conf));
                st.rasters.push(("dual/uncertainty".into(), step.uncertainty.clone()));
                st.layers.push(layer);
                st.units = units_for_cells(grid.len());
                let out = DualOutcome {
                    iteration: state.iteration,
                    training_digest: step.surface.training_digest.clone(),
                    queue: state.review_queue.clone(),
                };
                st.loop_state = Some(state);
                OutcomeDetail::Dual(out)
            }
            Action::Navigate { kind, budget, params } => {
                let ctx = NavContext { workspace: &self.world.workspace, provider: Some(&self.world.provider) };
                let bundle = build_context(*kind, &ctx, *budget, params)?;
                st.units = units_for_cells(grid.len());
                OutcomeDetail::Context(bundle)
            }
            Action::Perceive { query, suggest } => {
                let calls = self.perceptors.calls();
                let snapshot = self.memory.clone();
                let results = self.perceptors.perceive(query, &mut self.memory, now);
                let results = match results {
                    Ok(r) => r,
                    Err(e) => {
                        self.perceptors.restore_calls(calls);
                        self.memory = snapshot;
                        return Err(e);
                    }
                };
                if let Some(map) = suggest {
                    let mut layer = self.labels().clone();
                    let mut occupied: BTreeSet<CellId> = layer.iter().filter_map(|f| f.cell).collect();
                    let mut next = self.next_feature;
                    for (patch, r) in query.patches.iter().zip(&results) {
                        let Some(label) = r.label.as_ref().filter(|_| r.answerable).and_then(|l| map.get(l)) else {
                            continue;
                        };
                        for cell in &patch.cells {
                            if !self.in_roi(*cell) || !occupied.insert(*cell) {
                                continue;
                            }
                            let f = self.new_suggestion(next, *cell, label, LabelOrigin::Perceptor);
                            next += 1;
                            st.events.push(event(EditKind::Suggest, &f));
                            st.created.push(FeatureView::from(&f));
                            layer.insert(f)?;
                        }
                    }
                    st.next_feature = Some(next);
                    st.layers.push(layer);
                }
                st.units = 1;
                OutcomeDetail::Perception(results)
            }
            Action::RunGraph { spec, budget } => {
                let g = build_graph_limited(spec, budget.max_nodes)?;
                self.run_graph(g, budget, None, now, &mut st)?
            }
            Action::ResumeGraph { hash, budget } => {
                let (g, tok) = self
                    .graphs
                    .get(hash)
                    .cloned()
                    .ok_or_else(|| Error::NotFound(format!("graph {hash}")))?;
                let tok = tok.ok_or_else(|| Error::InvalidParams(format!("graph {hash} already complete")))?;
                self.run_graph(g, budget, Some(tok), now, &mut st)?
            }
            Action::Attribute { layer, feature_id, kinds } => {
                let mut l = self.world.workspace.vector(layer)?.clone();
                let geometry = l.get(feature_id)?.geometry.clone();
                let sources: BTreeMap<String, Box<dyn ExternalSource>> = self
                    .world
                    .ext_sources
                    .iter()
                    .map(|(k, v)| (k.clone(), Box::new(v.clone()) as Box<dyn ExternalSource>))
                    .collect();
                let attrs = compute_attributes(&self.world.workspace, &geometry, kinds, &sources)?;
                let f = l.get_mut(feature_id)?;
                f.attributes.extend(attrs);
                let out = f.clone();
                if layer == LABELS_LAYER {
                    st.events.push(event(EditKind::Attribute, &out));
                }
                st.layers.push(l);
                OutcomeDetail::Feature(Box::new(out))
            }
            Action::MemoryWrite { geometry, query, output_ref, notes } => {
                let id = self.memory.write(geometry.clone(), now, query.clone(), output_ref.clone(), notes.clone(), Author::User)?;
                OutcomeDetail::MemoryEntry(self.memory.get(id)?.clone())
            }
            Action::MemoryRetrieve { query } => OutcomeDetail::Memory(self.memory.retrieve(query)?),
            Action::MemoryCurate { id, action } => OutcomeDetail::MemoryEntry(self.memory.curate(*id, action.clone())?),
            Action::SetBudget { perceptor_calls } => {
                self.perceptors.set_limit(*perceptor_calls);
                OutcomeDetail::None
            }
        };
        Ok((st, detail))
    }

    fn run_graph(
        &mut self,
        g: ComputeGraph,
        budget: &crate::graph::Budget,
        resume: Option<ContinuationToken>,
        now: TimeStamp,
        st: &mut Staged,
    ) -> Result<OutcomeDetail> {
        let mut ws = self.world.workspace.clone();
        let calls = self.perceptors.calls();
        let mut memory = self.memory.clone();
        let agent = self.spec.capability >= CapabilityLevel::PlusAgent;
        let report = {
            let mut env = ExecEnv {
                provider: Some(&self.world.provider as &dyn EmbeddingProvider),
                perception: if agent { Some((&mut self.perceptors, &mut memory)) } else { None },
                now,
            };
            execute(&g, &mut ws, &mut env, budget, resume.as_ref())
        };
        let report = match report {
            Ok(r) => r,
            Err(e) => {
                self.perceptors.restore_calls(calls);
                return Err(e);
            }
        };
        self.memory = memory;
        st.units = report.cost.cost_units;
        st.workspace = Some(ws);
        st.graph = Some((g, report.continuation.clone()));
        Ok(OutcomeDetail::Graph(report))
    }
}

impl SessionDriver for Session {
    fn spec(&self) -> &SessionSpec {
        &self.spec
    }

    fn apply(&mut self, step: &Step) -> Result<ActionOutcome> {
        Session::apply(self, step)
    }

    fn view(&mut self) -> Result<SessionView> {
        Ok(Session::view(self))
    }

    fn vector(&mut self, name: &str) -> Result<VectorLayer> {
        Ok(self.world.workspace.vector(name)?.clone())
    }

    fn metrics(&mut self) -> Result<MetricsReport> {
        Session::metrics(self)
    }

    fn ledger(&mut self) -> Result<Vec<EditEvent>> {
        Ok(self.ledger.clone())
    }
}

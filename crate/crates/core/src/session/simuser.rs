//! Simulated users that drive sessions at desk scale.
//!
//! A sim user sees the latent scene through noisy eyes: each cell's class is
//! misjudged with a fixed, seeded probability, and the same cell is always
//! misjudged the same way. Durations come from the policy's work rates.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::navigation::{cell_zoom, NavParams, QueryKind};
use crate::perception::{PerceptionQuery, Task};
use crate::propagation::{Decision, ReviewBatch};
use crate::raster::{CellId, Grid};
use crate::seed;
use crate::vector::{LabelStatus, VectorLayer};

use super::actions::*;
use super::engine::SessionDriver;
use super::world::generate_world;
use super::{CapabilityLevel, SessionSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimUserPolicy {
    /// Manual labels per simulated minute.
    pub manual_per_min: f64,
    /// Suggestion reviews per simulated minute.
    pub reviews_per_min: f64,
    /// Seconds to inspect one cell while scanning.
    pub scan_s: u64,
    /// Seconds for one batch accept or reject.
    pub batch_decision_s: u64,
    pub commit_s: u64,
    /// Seconds spent configuring and waiting on a tool.
    pub tool_latency_s: u64,
    /// Chance the user misjudges a cell.
    pub error_rate: f64,
    /// Declare done once this share of the ROI has been covered.
    pub coverage_target: f64,
    pub propagate_k: usize,
    pub seed_positives: usize,
    pub seed_negatives: usize,
    /// Stop propagation rounds when fewer than this share of candidates is accepted.
    pub min_yield: f64,
    pub dual_queue: usize,
    pub max_dual_rounds: u32,
    /// Suggestions inspected before batch-accepting the rest of a batch; any
    /// disagreement means reviewing every one.
    pub spot_checks: usize,
    pub explore_patches: usize,
    pub perceptor_calls: u64,
    /// Restricts propagation and model suggestions.
    pub mask: Option<MaskRef>,
}

impl Default for SimUserPolicy {
    fn default() -> Self {
        Self {
            manual_per_min: 6.0,
            reviews_per_min: 30.0,
            scan_s: 1,
            batch_decision_s: 20,
            commit_s: 2,
            tool_latency_s: 5,
            error_rate: 0.05,
            coverage_target: 0.95,
            propagate_k: 20,
            seed_positives: 5,
            seed_negatives: 3,
            min_yield: 0.2,
            dual_queue: 10,
            max_dual_rounds: 6,
            spot_checks: 5,
            explore_patches: 8,
            perceptor_calls: 10,
            mask: None,
        }
    }
}

impl SimUserPolicy {
    pub fn validate(&self) -> Result<()> {
        if !(self.manual_per_min > 0.0 && self.reviews_per_min > 0.0) {
            return Err(Error::InvalidParams("work rates must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.error_rate) || !(self.coverage_target > 0.0 && self.coverage_target <= 1.0) {
            return Err(Error::InvalidParams("error rate or coverage target out of range".into()));
        }
        if self.propagate_k == 0 || self.seed_positives == 0 {
            return Err(Error::InvalidParams("need at least one candidate and one positive seed".into()));
        }
        Ok(())
    }

    pub fn manual_s(&self) -> u64 {
        (60.0 / self.manual_per_min).ceil() as u64
    }

    pub fn review_s(&self) -> u64 {
        (60.0 / self.reviews_per_min).ceil() as u64
    }
}

/// What a sim user believes about each cell.
#[derive(Debug, Clone)]
pub struct Eyes {
    grid: Grid,
    roi: Vec<CellId>,
    positive: Vec<bool>,
    /// Land-cover class the user perceives, used to vary negative examples.
    cover: Vec<u16>,
    classes: usize,
    class: String,
    negative: String,
}

impl Eyes {
    /// Built from the latent scene at the final time slice, never from the
    /// sealed reference.
    pub fn new(spec: &SessionSpec, user_seed: u64, error_rate: f64) -> Result<Self> {
        let world = generate_world(&spec.world, spec.seed)?;
        let class = spec.task.class().to_string();
        let k = spec.world.class_index(&class)? as u16;
        let scene = world.final_classes();
        let positive = scene
            .iter()
            .enumerate()
            .map(|(i, c)| {
                let slip = seed::unit(&[spec.seed, user_seed, 0xe7e5, i as u64]) < error_rate;
                (*c == k) != slip
            })
            .collect();
        let roi_poly = spec.roi.clone().unwrap_or_else(|| world.grid.extent().to_polygon());
        Ok(Self {
            grid: world.grid,
            roi: world.grid.cells_in_polygon(&roi_poly),
            positive,
            cover: scene.to_vec(),
            classes: spec.world.classes.len(),
            class,
            negative: spec.negative_label.clone(),
        })
    }

    pub fn believes_positive(&self, c: CellId) -> bool {
        self.positive[self.grid.index(c)]
    }

    pub fn label(&self, c: CellId) -> &str {
        if self.believes_positive(c) {
            &self.class
        } else {
            &self.negative
        }
    }

    pub fn roi(&self) -> &[CellId] {
        &self.roi
    }

    pub fn extent(&self) -> BBox {
        self.grid.extent()
    }
}

enum Stop {
    Finished,
    Fail(Error),
}

impl From<Error> for Stop {
    fn from(e: Error) -> Self {
        Stop::Fail(e)
    }
}

type Flow<T> = std::result::Result<T, Stop>;

pub struct SimUser<'a, D: SessionDriver + ?Sized> {
    driver: &'a mut D,
    policy: SimUserPolicy,
    eyes: Eyes,
    scanned: Vec<bool>,
    /// Scanning time not yet charged to an action.
    pending_s: u64,
    slice: usize,
    finished: bool,
}

impl<'a, D: SessionDriver + ?Sized> SimUser<'a, D> {
    pub fn new(driver: &'a mut D, policy: SimUserPolicy, user_seed: u64) -> Result<Self> {
        policy.validate()?;
        let spec = driver.spec().clone();
        let eyes = Eyes::new(&spec, user_seed, policy.error_rate)?;
        Ok(Self {
            scanned: vec![false; eyes.grid.len()],
            driver,
            policy,
            eyes,
            pending_s: 0,
            slice: spec.world.slices - 1,
            finished: false,
        })
    }

    pub fn eyes(&self) -> &Eyes {
        &self.eyes
    }

    pub fn driver_spec(&self) -> &SessionSpec {
        self.driver.spec()
    }

    pub fn driver_vector(&mut self, name: &str) -> Result<VectorLayer> {
        self.driver.vector(name)
    }

    fn class(&self) -> String {
        self.eyes.class.clone()
    }

    fn step(&mut self, dt: u64, op: Action) -> Flow<ActionOutcome> {
        if self.finished {
            return Err(Stop::Finished);
        }
        let dt = dt + std::mem::take(&mut self.pending_s);
        let out = self.driver.apply(&Step::new(dt, op))?;
        if out.finished {
            self.finished = true;
        }
        if !out.applied {
            return Err(Stop::Finished);
        }
        Ok(out)
    }

    fn view(&mut self) -> Flow<SessionView> {
        Ok(self.driver.view()?)
    }

    /// Scans unvisited cells in row-major order, labeling positives. With
    /// quotas, also labels negatives and stops once both are met; otherwise
    /// stops at the coverage target.
    fn scan(&mut self, quotas: Option<(usize, usize)>) -> Flow<()> {
        let order = self.eyes.roi.clone();
        self.scan_order(order, quotas)
    }

    fn scan_order(&mut self, cells: Vec<CellId>, quotas: Option<(usize, usize)>) -> Flow<()> {
        let view = self.view()?;
        let mut live: BTreeSet<CellId> =
            view.features.iter().filter(|f| f.status.is_live()).filter_map(|f| f.cell).collect();
        let count = |label: &str| {
            view.features
                .iter()
                .filter(|f| f.status == LabelStatus::Committed && f.label.as_deref() == Some(label))
                .count()
        };
        let (mut pos, mut neg) = (count(&self.eyes.class), count(&self.eyes.negative));
        let total = self.eyes.roi.len().max(1);
        let mut covered = self
            .eyes
            .roi
            .iter()
            .filter(|c| {
                self.scanned[self.eyes.grid.index(**c)]
                    || view.features.iter().any(|f| f.cell == Some(**c) && f.status == LabelStatus::Committed)
            })
            .count();
        // spread negative seeds over the other land covers
        let per_cover = quotas.map(|(_, n)| n.div_ceil(self.eyes.classes.saturating_sub(1).max(1))).unwrap_or(0);
        let mut by_cover = vec![0usize; self.eyes.classes];
        for c in cells {
            if let Some((p, n)) = quotas {
                if pos >= p && neg >= n {
                    return Ok(());
                }
            } else if covered as f64 / total as f64 >= self.policy.coverage_target {
                return Ok(());
            }
            let i = self.eyes.grid.index(c);
            if self.scanned[i] || live.contains(&c) {
                continue;
            }
            self.scanned[i] = true;
            covered += 1;
            self.pending_s += self.policy.scan_s;
            let positive = self.eyes.believes_positive(c);
            let cover = self.eyes.cover[i] as usize;
            let want = match quotas {
                None => positive,
                Some((_, n)) => positive || (neg < n && by_cover[cover] < per_cover),
            };
            if want {
                let label = self.eyes.label(c).to_string();
                self.step(self.policy.manual_s(), Action::ManualLabel { cell: c, label })?;
                live.insert(c);
                if positive {
                    pos += 1;
                } else {
                    neg += 1;
                    by_cover[cover] += 1;
                }
            }
        }
        Ok(())
    }

    fn reviewed_ids(view: &SessionView, label: &str) -> Vec<String> {
        view.features
            .iter()
            .filter(|f| matches!(f.status, LabelStatus::Committed | LabelStatus::Accepted))
            .filter(|f| f.label.as_deref() == Some(label) && f.cell.is_some())
            .map(|f| f.id.clone())
            .collect()
    }

    fn decide(&self, created: &[FeatureView]) -> Vec<(String, Decision)> {
        created
            .iter()
            .map(|f| {
                let ok = f.cell.is_some_and(|c| Some(self.eyes.label(c)) == f.label.as_deref());
                (f.id.clone(), if ok { Decision::Accept } else { Decision::Reject })
            })
            .collect()
    }

    fn review_and_commit(&mut self, created: &[FeatureView]) -> Flow<usize> {
        if created.is_empty() {
            return Ok(0);
        }
        let decisions = self.decide(created);
        let accepted = decisions.iter().filter(|d| d.1 == Decision::Accept).count();
        let dt = self.policy.review_s() * decisions.len() as u64;
        self.step(dt, Action::Review { batch: ReviewBatch::Each { decisions } })?;
        if accepted > 0 {
            self.step(self.policy.commit_s, Action::Commit { ids: None })?;
        }
        Ok(accepted)
    }

    /// One propagate-review-commit round; returns the accepted share, or
    /// `None` when nothing is left to rank.
    fn propagate_round(&mut self) -> Flow<Option<f64>> {
        let view = self.view()?;
        let class = self.class();
        let positives = Self::reviewed_ids(&view, &class);
        if positives.is_empty() {
            return Ok(None);
        }
        let negatives = Self::reviewed_ids(&view, &self.eyes.negative.clone());
        let op = Action::Propagate {
            label: class,
            positives,
            negatives,
            k: self.policy.propagate_k,
            slice: self.slice,
            mask: self.policy.mask.clone(),
        };
        let out = match self.step(self.policy.tool_latency_s, op) {
            Err(Stop::Fail(Error::EmptyPool)) => return Ok(None),
            other => other?,
        };
        if out.created.is_empty() {
            return Ok(None);
        }
        let accepted = self.review_and_commit(&out.created)?;
        Ok(Some(accepted as f64 / out.created.len() as f64))
    }

    /// One dual-model round; returns true once it brings nothing new.
    fn dual_round(&mut self) -> Flow<bool> {
        let view = self.view()?;
        let live: BTreeSet<CellId> = view.features.iter().filter(|f| f.status.is_live()).filter_map(|f| f.cell).collect();
        let op = Action::DualLoopStep(DualParams {
            queue_len: self.policy.dual_queue,
            suggest: Some(self.class()),
            max_suggestions: None,
            mask: self.policy.mask.clone(),
            slice: self.slice,
        });
        let out = self.step(self.policy.tool_latency_s, op)?;
        let queue = match &out.detail {
            OutcomeDetail::Dual(d) => d.queue.clone(),
            _ => Vec::new(),
        };
        let in_queue: BTreeSet<CellId> = queue.iter().copied().collect();
        let (checked, trusted): (Vec<FeatureView>, Vec<FeatureView>) =
            out.created.iter().cloned().partition(|f| f.cell.is_some_and(|c| in_queue.contains(&c)));
        let mut any_accept = false;
        if !trusted.is_empty() {
            let k = self.policy.spot_checks.min(trusted.len());
            // evenly spaced sample through the batch
            let sample: Vec<FeatureView> = (0..k).map(|i| trusted[i * trusted.len() / k].clone()).collect();
            let agree = self.decide(&sample).iter().all(|d| d.1 == Decision::Accept);
            self.pending_s += self.policy.review_s() * k as u64;
            if agree {
                let ids = trusted.iter().map(|f| f.id.clone()).collect();
                self.step(self.policy.batch_decision_s, Action::Review { batch: ReviewBatch::AcceptAll { ids } })?;
                any_accept = true;
            } else {
                let decisions = self.decide(&trusted);
                any_accept |= decisions.iter().any(|d| d.1 == Decision::Accept);
                let dt = self.policy.review_s() * decisions.len() as u64;
                self.step(dt, Action::Review { batch: ReviewBatch::Each { decisions } })?;
            }
        }
        if !checked.is_empty() {
            let decisions = self.decide(&checked);
            any_accept |= decisions.iter().any(|d| d.1 == Decision::Accept);
            let dt = self.policy.review_s() * decisions.len() as u64;
            self.step(dt, Action::Review { batch: ReviewBatch::Each { decisions } })?;
        }
        let suggested: BTreeSet<CellId> = out.created.iter().filter_map(|f| f.cell).collect();
        let mut manual = 0;
        for c in queue {
            if live.contains(&c) || suggested.contains(&c) {
                continue;
            }
            let label = self.eyes.label(c).to_string();
            self.step(self.policy.manual_s(), Action::ManualLabel { cell: c, label })?;
            manual += 1;
        }
        if any_accept {
            self.step(self.policy.commit_s, Action::Commit { ids: None })?;
        }
        Ok(out.created.is_empty() && manual == 0)
    }

    /// Explore the scene, ask the perceptor for labels, and review them.
    fn perceive_seeds(&mut self) -> Flow<()> {
        self.step(0, Action::SetBudget { perceptor_calls: Some(self.policy.perceptor_calls) })?;
        let grid = self.eyes.grid;
        let params = NavParams { zoom: Some(cell_zoom(&grid)), slice: Some(self.slice), ..NavParams::default() };
        let out = self.step(
            self.policy.tool_latency_s,
            Action::Navigate { kind: QueryKind::Explore, budget: self.policy.explore_patches, params },
        )?;
        let OutcomeDetail::Context(bundle) = out.detail else {
            return Ok(());
        };
        let spec = self.driver.spec().clone();
        let class = self.class();
        let mut map = BTreeMap::new();
        for c in &spec.world.classes {
            let to = if *c == class { class.clone() } else { self.eyes.negative.clone() };
            map.insert(c.clone(), to);
        }
        let query = PerceptionQuery {
            patches: bundle.patches,
            task: Task::Classify { classes: spec.world.classes.clone() },
            question: "what is the land cover here?".into(),
        };
        let out = self.step(self.policy.tool_latency_s, Action::Perceive { query, suggest: Some(map) })?;
        self.review_and_commit(&out.created)?;
        Ok(())
    }

    fn script(&mut self, level: CapabilityLevel) -> Flow<()> {
        let quotas = Some((self.policy.seed_positives, self.policy.seed_negatives));
        match level {
            CapabilityLevel::Baseline => self.scan(None)?,
            CapabilityLevel::PlusPropagation => {
                self.scan(quotas)?;
                while let Some(y) = self.propagate_round()? {
                    if y < self.policy.min_yield {
                        break;
                    }
                }
                self.scan(None)?;
            }
            CapabilityLevel::PlusScaling | CapabilityLevel::PlusAgent => {
                if level == CapabilityLevel::PlusAgent {
                    self.perceive_seeds()?;
                }
                self.scan(quotas)?;
                self.propagate_round()?;
                for _ in 0..self.policy.max_dual_rounds {
                    if self.dual_round()? {
                        break;
                    }
                }
            }
        }
        Ok(())
    }

    fn finish(&mut self, r: Flow<()>) -> Result<()> {
        match r {
            Ok(()) => {
                if !self.finished {
                    self.step(0, Action::Done).map(|_| ()).or_else(|s| match s {
                        Stop::Finished => Ok(()),
                        Stop::Fail(e) => Err(e),
                    })?;
                }
                Ok(())
            }
            Err(Stop::Finished) => Ok(()),
            Err(Stop::Fail(e)) => Err(e),
        }
    }

    /// Plays the default script for the session's capability level and
    /// declares done.
    pub fn run(&mut self) -> Result<()> {
        let level = self.driver.spec().capability;
        let r = self.script(level);
        self.finish(r)
    }

    // Macro steps for scripted scenarios.

    pub fn seed_labels(&mut self, positives: usize, negatives: usize) -> Result<()> {
        self.flow(|u| u.scan(Some((positives, negatives))))
    }

    /// Seeds like [`Self::seed_labels`] but looks at `first` before the rest
    /// of the ROI.
    pub fn seed_labels_from(&mut self, first: &[CellId], positives: usize, negatives: usize) -> Result<()> {
        let in_roi: BTreeSet<CellId> = self.eyes.roi.iter().copied().collect();
        let mut seen = BTreeSet::new();
        let order: Vec<CellId> = first
            .iter()
            .chain(self.eyes.roi.iter())
            .filter(|c| in_roi.contains(c) && seen.insert(**c))
            .copied()
            .collect();
        self.flow(|u| u.scan_order(order, Some((positives, negatives))))
    }

    pub fn propagate_rounds(&mut self, max_rounds: u32) -> Result<()> {
        self.flow(|u| {
            for _ in 0..max_rounds {
                match u.propagate_round()? {
                    Some(y) if y >= u.policy.min_yield => {}
                    _ => break,
                }
            }
            Ok(())
        })
    }

    pub fn dual_rounds(&mut self, max_rounds: u32) -> Result<()> {
        self.flow(|u| {
            for _ in 0..max_rounds {
                if u.dual_round()? {
                    break;
                }
            }
            Ok(())
        })
    }

    pub fn perceive_and_review(&mut self) -> Result<()> {
        self.flow(|u| u.perceive_seeds())
    }

    /// Re-examines cells and overwrites committed labels the user disagrees with.
    pub fn quality_check(&mut self, cells: &[CellId]) -> Result<usize> {
        let mut fixed = 0;
        self.flow(|u| {
            let view = u.view()?;
            for c in cells {
                u.pending_s += u.policy.scan_s;
                let want = u.eyes.label(*c).to_string();
                let committed = view
                    .features
                    .iter()
                    .find(|f| f.cell == Some(*c) && f.status == LabelStatus::Committed);
                let needs = match committed {
                    Some(f) => f.label.as_deref() != Some(want.as_str()),
                    None => view.live_at(*c).is_none(),
                };
                if needs {
                    u.step(u.policy.manual_s(), Action::ManualLabel { cell: *c, label: want })?;
                    fixed += 1;
                }
            }
            Ok(())
        })?;
        Ok(fixed)
    }

    /// Runs an arbitrary step, ignoring it once the session has ended.
    pub fn act(&mut self, dt: u64, op: Action) -> Result<Option<ActionOutcome>> {
        match self.step(dt, op) {
            Ok(o) => Ok(Some(o)),
            Err(Stop::Finished) => Ok(None),
            Err(Stop::Fail(e)) => Err(e),
        }
    }

    pub fn done(&mut self) -> Result<()> {
        self.finish(Ok(()))
    }

    pub fn is_finished(&self) -> bool {
        self.finished
    }

    fn flow(&mut self, f: impl FnOnce(&mut Self) -> Flow<()>) -> Result<()> {
        match f(self) {
            Ok(()) | Err(Stop::Finished) => Ok(()),
            Err(Stop::Fail(e)) => Err(e),
        }
    }
}

//! Perception routing: patches plus a task query in, label and note out.
//!
//! Results are suggestions. `perceive` writes them to geo-memory as agent
//! entries and never touches committed layers.
//!
//! Out-of-process perceptors speak a line-oriented JSON protocol over
//! stdin/stdout: the runtime writes one [`PerceptionQuery`] holding a single
//! patch per line and expects one [`PerceptionResult`] line back.

use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Write};
use std::process::{Command, Stdio};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geomemory::{Author, MemoryStore};
use crate::navigation::PatchRef;
use crate::raster::Grid;
use crate::seed;
use crate::time::TimeStamp;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Task {
    Classify { classes: Vec<String> },
    Detect { class: String },
    Caption,
    Change,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    Classify,
    Detect,
    Caption,
    Change,
}

impl Task {
    pub fn kind(&self) -> TaskKind {
        match self {
            Task::Classify { .. } => TaskKind::Classify,
            Task::Detect { .. } => TaskKind::Detect,
            Task::Caption => TaskKind::Caption,
            Task::Change => TaskKind::Change,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionQuery {
    pub patches: Vec<PatchRef>,
    pub task: Task,
    pub question: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PerceptionResult {
    pub answerable: bool,
    pub label: Option<String>,
    pub confidence: f64,
    pub note: String,
}

impl PerceptionResult {
    pub fn unanswerable(note: impl Into<String>) -> Self {
        Self { answerable: false, label: None, confidence: 0.0, note: note.into() }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = if self.answerable {
            self.label.is_some()
        } else {
            self.label.is_none() && !self.note.trim().is_empty()
        };
        if !ok || !(0.0..=1.0).contains(&self.confidence) {
            return Err(Error::Schema(format!("malformed perception result {self:?}")));
        }
        Ok(())
    }
}

pub trait Perceptor: Send + Sync {
    fn name(&self) -> &str;
    fn perceive_patch(&self, patch: &PatchRef, task: &Task, question: &str) -> Result<PerceptionResult>;
}

/// Latent scene class per cell and time slice, plus class names.
#[derive(Debug, Clone, PartialEq)]
pub struct SceneTruth {
    pub grid: Grid,
    pub class_names: Vec<String>,
    pub slices: Vec<(TimeStamp, Vec<u16>)>,
}

impl SceneTruth {
    /// Latest slice not after `t`, or the first slice.
    pub fn slice_for(&self, t: TimeStamp) -> usize {
        self.slices.iter().rposition(|(ts, _)| *ts <= t).unwrap_or(0)
    }

    /// Majority class over the patch cells (ties to the lower class index) and its share.
    fn majority(&self, patch: &PatchRef, slice: usize) -> Result<(usize, f64)> {
        let classes = &self.slices[slice].1;
        let mut counts = vec![0usize; self.class_names.len()];
        for c in &patch.cells {
            if !self.grid.contains_cell(*c) {
                return Err(Error::NotFound(format!("cell {c}")));
            }
            counts[classes[self.grid.index(*c)] as usize] += 1;
        }
        let (best, n) = counts
            .iter()
            .enumerate()
            .fold((0, 0), |acc, (i, &n)| if n > acc.1 { (i, n) } else { acc });
        Ok((best, n as f64 / patch.cells.len() as f64))
    }

    fn share_of(&self, patch: &PatchRef, slice: usize, class: usize) -> f64 {
        let classes = &self.slices[slice].1;
        let n = patch
            .cells
            .iter()
            .filter(|c| classes[self.grid.index(**c)] as usize == class)
            .count();
        n as f64 / patch.cells.len() as f64
    }
}

/// Ground-truth perceptor with label noise.
///
/// With probability `epsilon` the true label is replaced by a uniformly drawn
/// other label. Randomness is derived from the seed and the request, so the
/// perceptor is stateless and repeatable.
#[derive(Debug, Clone)]
pub struct MockOraclePerceptor {
    truth: SceneTruth,
    epsilon: f64,
    seed: u64,
}

impl MockOraclePerceptor {
    pub fn new(truth: SceneTruth, epsilon: f64, seed: u64) -> Result<Self> {
        if !(0.0..1.0).contains(&epsilon) {
            return Err(Error::InvalidParams(format!("noise rate {epsilon} outside [0,1)")));
        }
        Ok(Self { truth, epsilon, seed })
    }

    fn noisy(&self, truth: &str, alternatives: &[String], patch: &PatchRef, task: &Task, question: &str) -> (String, f64) {
        if self.epsilon == 0.0 {
            return (truth.to_string(), 1.0);
        }
        let key = serde_json::to_string(&(&patch.cells, patch.timestamp, task, question))
            .expect("serializable request");
        let mut rng = seed::rng(&[self.seed, seed::str_hash(&key)]);
        let flip = rng.random::<f64>() < self.epsilon;
        let jitter = rng.random_range(-0.05..=0.05);
        let confidence = (1.0 - self.epsilon + jitter).clamp(0.0, 1.0);
        let others: Vec<&String> = alternatives.iter().filter(|a| *a != truth).collect();
        if flip && !others.is_empty() {
            let pick = others[rng.random_range(0..others.len())];
            return (pick.clone(), confidence);
        }
        (truth.to_string(), confidence)
    }
}

impl Perceptor for MockOraclePerceptor {
    fn name(&self) -> &str {
        "mock-oracle"
    }

    fn perceive_patch(&self, patch: &PatchRef, task: &Task, question: &str) -> Result<PerceptionResult> {
        if patch.cells.is_empty() {
            return Err(Error::NoPatches);
        }
        let slice = self.truth.slice_for(patch.timestamp);
        let names = &self.truth.class_names;
        let (maj, share) = self.truth.majority(patch, slice)?;
        let pct = (share * 100.0).round();
        let n = patch.cells.len();
        let (label, confidence, note) = match task {
            Task::Classify { classes } => {
                if classes.is_empty() {
                    return Err(Error::InvalidParams("classify needs at least one class".into()));
                }
                if !classes.contains(&names[maj]) {
                    return Ok(PerceptionResult::unanswerable(format!(
                        "observed mostly {}, which is not among the requested classes",
                        names[maj]
                    )));
                }
                let (l, c) = self.noisy(&names[maj], classes, patch, task, question);
                let note = format!("{pct}% of {n} cells look like {l}");
                (l, c, note)
            }
            Task::Detect { class } => {
                let Some(idx) = names.iter().position(|c| c == class) else {
                    return Ok(PerceptionResult::unanswerable(format!("no detector for class {class}")));
                };
                let share = self.truth.share_of(patch, slice, idx);
                let truth = if share >= 0.5 { "present" } else { "absent" };
                let alts = ["present".to_string(), "absent".to_string()];
                let (l, c) = self.noisy(truth, &alts, patch, task, question);
                let note = format!("{class} {l}; covers {}% of the patch", (share * 100.0).round());
                (l, c, note)
            }
            Task::Caption => {
                let (l, c) = self.noisy(&names[maj], names, patch, task, question);
                let note = format!("patch of {n} cells dominated by {l} ({pct}%)");
                (l, c, note)
            }
            Task::Change => {
                let (before, _) = self.truth.majority(patch, 0)?;
                let truth = if before != maj { "changed" } else { "unchanged" };
                let alts = ["changed".to_string(), "unchanged".to_string()];
                let (l, c) = self.noisy(truth, &alts, patch, task, question);
                let note = format!("{} then {}: {l}", names[before], names[maj]);
                (l, c, note)
            }
        };
        Ok(PerceptionResult { answerable: true, label: Some(label), confidence, note })
    }
}

/// Declines patches coarser than `min_zoom` and defers the rest.
pub struct ResolutionLimitedPerceptor<P> {
    pub inner: P,
    pub min_zoom: u32,
}

impl<P: Perceptor> Perceptor for ResolutionLimitedPerceptor<P> {
    fn name(&self) -> &str {
        "resolution-limited"
    }

    fn perceive_patch(&self, patch: &PatchRef, task: &Task, question: &str) -> Result<PerceptionResult> {
        if patch.zoom < self.min_zoom {
            return Ok(PerceptionResult::unanswerable(format!("resolution too low at zoom {}", patch.zoom)));
        }
        self.inner.perceive_patch(patch, task, question)
    }
}

/// Runs an external program per patch using the JSON line protocol.
#[derive(Debug, Clone)]
pub struct StdioPerceptor {
    pub program: String,
    pub args: Vec<String>,
}

impl Perceptor for StdioPerceptor {
    fn name(&self) -> &str {
        &self.program
    }

    fn perceive_patch(&self, patch: &PatchRef, task: &Task, question: &str) -> Result<PerceptionResult> {
        let req = PerceptionQuery { patches: vec![patch.clone()], task: task.clone(), question: question.into() };
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()?;
        {
            let mut stdin = child.stdin.take().expect("piped stdin");
            serde_json::to_writer(&mut stdin, &req)?;
            stdin.write_all(b"\n")?;
        }
        let mut line = String::new();
        BufReader::new(child.stdout.take().expect("piped stdout")).read_line(&mut line)?;
        let status = child.wait()?;
        if !status.success() {
            return Err(Error::Io(format!("perceptor `{}` exited with {status}", self.program)));
        }
        let res: PerceptionResult = serde_json::from_str(line.trim())?;
        res.validate()?;
        Ok(res)
    }
}

/// Static routing table from task kind to perceptor, with a call counter.
#[derive(Default)]
pub struct PerceptorRegistry {
    routes: BTreeMap<TaskKind, Box<dyn Perceptor>>,
    calls: u64,
    limit: Option<u64>,
}

impl PerceptorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, kind: TaskKind, p: Box<dyn Perceptor>) {
        self.routes.insert(kind, p);
    }

    pub fn calls(&self) -> u64 {
        self.calls
    }

    pub fn set_limit(&mut self, limit: Option<u64>) {
        self.limit = limit;
    }

    pub fn limit(&self) -> Option<u64> {
        self.limit
    }

    /// Rolls the call counter back after a failed composite operation.
    pub(crate) fn restore_calls(&mut self, calls: u64) {
        self.calls = calls;
    }

    /// Routes the query, counts one call, and stores every result as an agent
    /// memory entry stamped `t`.
    pub fn perceive(
        &mut self,
        query: &PerceptionQuery,
        memory: &mut MemoryStore,
        t: TimeStamp,
    ) -> Result<Vec<PerceptionResult>> {
        if query.patches.is_empty() {
            return Err(Error::NoPatches);
        }
        let kind = query.task.kind();
        let p = self
            .routes
            .get(&kind)
            .ok_or_else(|| Error::UnknownTask(format!("{kind:?}")))?;
        if let Some(limit) = self.limit {
            if self.calls >= limit {
                return Err(Error::CallBudgetExhausted(limit));
            }
        }
        let mut results = Vec::with_capacity(query.patches.len());
        for patch in &query.patches {
            memory.check_geometry(&patch.bbox.to_polygon())?;
            let r = p.perceive_patch(patch, &query.task, &query.question)?;
            r.validate()?;
            results.push(r);
        }
        self.calls += 1;
        for (patch, r) in query.patches.iter().zip(&results) {
            memory.write(
                patch.bbox.to_polygon(),
                t,
                query.question.clone(),
                r.label.as_ref().map(|l| format!("label:{l}")),
                r.note.clone(),
                Author::Agent,
            )?;
        }
        Ok(results)
    }
}

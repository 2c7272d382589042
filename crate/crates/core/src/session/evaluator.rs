//! The only code path that opens the sealed reference. It reports aggregate
//! scores and never per-item correctness.

use crate::error::Result;
use crate::geometry::Polygon;
use crate::raster::{CellId, Grid};
use crate::vector::{LabelStatus, VectorLayer};

use super::metrics::{quality_f1, quality_iou, JudgedLabel, MetricKind};
use super::world::{EvaluatorKey, SealedReference, World};
use super::{SessionSpec, SessionTask};

pub struct Evaluator {
    reference: SealedReference,
    key: EvaluatorKey,
    grid: Grid,
    class: String,
    negative: String,
    metric: MetricKind,
    /// Cells inside the session ROI.
    roi: Vec<bool>,
    evaluations: u64,
}

impl Evaluator {
    pub(crate) fn new(world: &World, spec: &SessionSpec, roi: &Polygon) -> Self {
        let grid = world.grid;
        let mut mask = vec![false; grid.len()];
        for c in grid.cells_in_polygon(roi) {
            mask[grid.index(c)] = true;
        }
        let (class, metric) = match &spec.task {
            SessionTask::BinaryClassify { class } => (class.clone(), MetricKind::F1),
            SessionTask::Segment { class } => (class.clone(), MetricKind::Iou),
        };
        Self {
            reference: world.seal_reference(),
            key: EvaluatorKey::new(),
            grid,
            class,
            negative: spec.negative_label.clone(),
            metric,
            roi: mask,
            evaluations: 0,
        }
    }

    pub fn metric(&self) -> MetricKind {
        self.metric
    }

    /// Reference reads so far; the audit expects one per evaluation.
    pub fn reference_reads(&self) -> u64 {
        self.reference.reads()
    }

    pub fn evaluations(&self) -> u64 {
        self.evaluations
    }

    fn predicted(&self, layer: &VectorLayer) -> Vec<bool> {
        let mut pred = vec![false; self.grid.len()];
        for f in layer.iter() {
            if f.status != LabelStatus::Committed || f.label.as_deref() != Some(self.class.as_str()) {
                continue;
            }
            if let Some(c) = f.cell.filter(|c| self.grid.contains_cell(*c)) {
                pred[self.grid.index(c)] = true;
            }
        }
        pred
    }

    /// Q over committed labels in the ROI.
    pub fn quality(&mut self, layer: &VectorLayer) -> Result<f64> {
        self.evaluations += 1;
        let truth = self.reference.open(&self.key);
        let all = self.predicted(layer);
        let (mut pred, mut reference) = (Vec::new(), Vec::new());
        for (i, inside) in self.roi.iter().enumerate() {
            if *inside {
                pred.push(all[i]);
                reference.push(truth[i] == self.class);
            }
        }
        match self.metric {
            MetricKind::F1 => quality_f1(&pred, &reference),
            MetricKind::Iou => quality_iou(&pred, &reference),
        }
    }

    /// Committed cell labels paired with the reference, in the task's binary
    /// label space.
    pub fn judged(&mut self, layer: &VectorLayer) -> Vec<JudgedLabel> {
        self.evaluations += 1;
        let truth = self.reference.open(&self.key);
        layer
            .iter()
            .filter(|f| f.status == LabelStatus::Committed)
            .filter_map(|f| {
                let c = f.cell.filter(|c| self.grid.contains_cell(*c))?;
                let t = if truth[self.grid.index(c)] == self.class { &self.class } else { &self.negative };
                Some(JudgedLabel { origin: f.label_origin, assigned: f.label.clone().unwrap_or_default(), truth: t.clone() })
            })
            .collect()
    }

    /// Cells whose reference class is the task class, for aggregate checks
    /// such as building damage recounts.
    pub fn positive_share(&mut self, cells: &[CellId]) -> f64 {
        self.evaluations += 1;
        if cells.is_empty() {
            return 0.0;
        }
        let truth = self.reference.open(&self.key);
        let n = cells.iter().filter(|c| truth[self.grid.index(**c)] == self.class).count();
        n as f64 / cells.len() as f64
    }
}

//! Rebuilds a session from its log alone and recomputes its metrics.
//!
//! The label layer is reconstructed from edit events, and quality is
//! re-evaluated at every logged sample time from that reconstruction.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::time::TimeStamp;
use crate::vector::{Feature, LabelOrigin, LabelStatus, VectorLayer};

use super::engine::compute_metrics;
use super::evaluator::Evaluator;
use super::ledger::{EditEvent, EditKind, LogRecord};
use super::metrics::{MetricsReport, QualitySample};
use super::world::{generate_world, LABELS_LAYER};
use super::SessionSpec;

#[derive(Debug, Clone, PartialEq)]
pub struct Replayed {
    pub spec: SessionSpec,
    pub metrics: MetricsReport,
    pub samples: Vec<QualitySample>,
    pub ledger: Vec<EditEvent>,
    pub layer: VectorLayer,
}

fn apply_event(layer: &mut VectorLayer, e: &EditEvent, grid: &crate::raster::Grid) -> Result<()> {
    let cell = || e.cell.ok_or_else(|| Error::Schema(format!("event on `{}` lacks a cell", e.target)));
    match e.kind {
        EditKind::Create | EditKind::Suggest => {
            let c = cell()?;
            layer.insert(Feature {
                id: e.target.clone(),
                geometry: grid.cell_polygon(c),
                attributes: BTreeMap::new(),
                label: e.label.clone(),
                label_origin: e.origin,
                status: if e.kind == EditKind::Create { LabelStatus::Committed } else { LabelStatus::Suggested },
                cell: Some(c),
            })?;
        }
        EditKind::Overwrite => {
            let f = layer.get_mut(&e.target)?;
            f.label = e.label.clone();
            f.label_origin = LabelOrigin::Manual;
            f.transition(LabelStatus::Committed)?;
        }
        EditKind::Delete => {
            layer.features.remove(&e.target).ok_or_else(|| Error::NotFound(e.target.clone()))?;
        }
        EditKind::Accept => layer.get_mut(&e.target)?.transition(LabelStatus::Accepted)?,
        EditKind::Reject => layer.get_mut(&e.target)?.transition(LabelStatus::Rejected)?,
        EditKind::Commit => layer.get_mut(&e.target)?.transition(LabelStatus::Committed)?,
        EditKind::Attribute => {}
    }
    Ok(())
}

pub fn replay(log: &[LogRecord]) -> Result<Replayed> {
    let Some(LogRecord::Header { spec, .. }) = log.first() else {
        return Err(Error::Schema("log does not start with a header".into()));
    };
    let spec: SessionSpec = (**spec).clone();
    let world = generate_world(&spec.world, spec.seed)?;
    let roi = spec.roi.clone().unwrap_or_else(|| world.grid.extent().to_polygon());
    let mut evaluator = Evaluator::new(&world, &spec, &roi);
    let mut layer = VectorLayer::new(LABELS_LAYER);
    let mut samples = Vec::new();
    let mut ledger = Vec::new();
    let mut cost = 0;
    let mut end = None;
    let mut last_t = TimeStamp(0);
    for rec in &log[1..] {
        if rec.t() < last_t {
            return Err(Error::Schema("log time goes backwards".into()));
        }
        last_t = rec.t();
        match rec {
            LogRecord::Header { .. } => return Err(Error::Schema("second header in log".into())),
            LogRecord::Action { .. } => {}
            LogRecord::Event(e) => {
                apply_event(&mut layer, e, &world.grid)?;
                ledger.push(e.clone());
            }
            LogRecord::Quality(s) => {
                let q = evaluator.quality(&layer)?;
                samples.push(QualitySample { t: s.t, q, metric: evaluator.metric() });
            }
            LogRecord::Compute { units, .. } => cost += units,
            LogRecord::End { t, .. } => end = Some(*t),
        }
    }
    let end = end.unwrap_or(last_t);
    let metrics = compute_metrics(&spec, &samples, &ledger, &layer, &world.workspace.crs, &mut evaluator, cost, end)?;
    Ok(Replayed { spec, metrics, samples, ledger, layer })
}

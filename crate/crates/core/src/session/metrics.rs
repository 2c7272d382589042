//! Productivity metrics over a session's quality curve and edit ledger.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::time::TimeStamp;
use crate::vector::LabelOrigin;

use super::ledger::{EditEvent, EditKind};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MetricKind {
    F1,
    Iou,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QualitySample {
    pub t: TimeStamp,
    pub q: f64,
    pub metric: MetricKind,
}

impl QualitySample {
    pub fn new(t: i64, q: f64) -> Self {
        Self { t: TimeStamp(t), q, metric: MetricKind::F1 }
    }
}

fn check_ordered(samples: &[QualitySample]) -> Result<()> {
    if samples.is_empty() {
        return Err(Error::EmptySamples);
    }
    if samples.windows(2).any(|w| w[1].t < w[0].t) {
        return Err(Error::InvalidParams("quality samples are not time-ordered".into()));
    }
    Ok(())
}

/// Earliest sampled time with `Q >= tau`; only sampled points count.
pub fn compute_time_to_threshold(samples: &[QualitySample], tau: f64) -> Result<Option<TimeStamp>> {
    check_ordered(samples)?;
    Ok(samples.iter().find(|s| s.q >= tau).map(|s| s.t))
}

/// Trapezoidal area under Q over `[0, t_max]` divided by `t_max`. Q is held at
/// its first sample before it and at its last sample after it, and is linear
/// in between. With `t_max == 0` the curve is a single point and the result
/// is that Q.
pub fn compute_progress_auc(samples: &[QualitySample], t_max: i64) -> Result<f64> {
    check_ordered(samples)?;
    if t_max <= 0 {
        return Ok(samples[0].q);
    }
    let t_end = t_max as f64;
    let mut pts: Vec<(f64, f64)> = Vec::with_capacity(samples.len() + 2);
    pts.push((0.0, samples[0].q));
    for s in samples {
        let t = s.t.0 as f64;
        if t > 0.0 && t < t_end {
            pts.push((t, s.q));
        } else if t <= 0.0 {
            // later samples at or before zero win
            pts[0].1 = s.q;
        }
    }
    // the curve is linear between samples, so a budget ending between two
    // samples cuts the last segment
    let after = samples.partition_point(|s| s.t.0 <= t_max);
    let at_end = match (after.checked_sub(1).map(|i| samples[i]), samples.get(after)) {
        (None, _) => samples[0].q,
        (Some(a), None) => a.q,
        (Some(a), Some(_)) if a.t.0 == t_max => a.q,
        (Some(a), Some(b)) => {
            let (ta, tb) = (a.t.0 as f64, b.t.0 as f64);
            a.q + (b.q - a.q) * (t_end - ta) / (tb - ta)
        }
    };
    pts.push((t_end, at_end));
    let mut area = 0.0;
    for w in pts.windows(2) {
        let ((t0, q0), (t1, q1)) = (w[0], w[1]);
        area += (t1 - t0) * (q0 + q1) / 2.0;
    }
    Ok(area / t_end)
}

/// Fraction of edits that revise committed work.
pub fn compute_rework_rate(ledger: &[EditEvent]) -> f64 {
    let mut edits = 0u64;
    let mut revisions = 0u64;
    for e in ledger {
        if e.kind.is_edit() {
            edits += 1;
        }
        if e.is_revision() {
            revisions += 1;
        }
    }
    if edits == 0 {
        0.0
    } else {
        revisions as f64 / edits as f64
    }
}

/// One committed label as the evaluator sees it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JudgedLabel {
    pub origin: LabelOrigin,
    pub assigned: String,
    pub truth: String,
}

/// Total variation between the error-category histograms of suggestion-origin
/// and manual-origin labels. An error category is `(assigned, true)`.
pub fn compute_suggestion_bias(labels: &[JudgedLabel]) -> Option<f64> {
    let mut sugg: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    let mut manual: BTreeMap<(&str, &str), u64> = BTreeMap::new();
    for l in labels.iter().filter(|l| l.assigned != l.truth) {
        let h = if l.origin.is_suggestion() { &mut sugg } else { &mut manual };
        *h.entry((l.assigned.as_str(), l.truth.as_str())).or_default() += 1;
    }
    let (ns, nm) = (sugg.values().sum::<u64>(), manual.values().sum::<u64>());
    if ns == 0 || nm == 0 {
        return None;
    }
    let mut keys: Vec<_> = sugg.keys().chain(manual.keys()).copied().collect();
    keys.sort();
    keys.dedup();
    let tv: f64 = keys
        .iter()
        .map(|k| {
            let ps = *sugg.get(k).unwrap_or(&0) as f64 / ns as f64;
            let pm = *manual.get(k).unwrap_or(&0) as f64 / nm as f64;
            (ps - pm).abs()
        })
        .sum();
    Some(0.5 * tv)
}

fn check_shapes(pred: &[bool], reference: &[bool]) -> Result<()> {
    if pred.len() != reference.len() {
        return Err(Error::ShapeMismatch(pred.len(), reference.len()));
    }
    Ok(())
}

/// F1 of the positive class. No positives and no predictions scores 1.
pub fn quality_f1(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_shapes(pred, reference)?;
    let (mut tp, mut fp, mut fneg) = (0u64, 0u64, 0u64);
    for (&p, &r) in pred.iter().zip(reference) {
        match (p, r) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, true) => fneg += 1,
            _ => {}
        }
    }
    let denom = 2 * tp + fp + fneg;
    Ok(if denom == 0 { 1.0 } else { (2 * tp) as f64 / denom as f64 })
}

/// Intersection over union of positive masks; two empty masks score 1.
pub fn quality_iou(pred: &[bool], reference: &[bool]) -> Result<f64> {
    check_shapes(pred, reference)?;
    let inter = pred.iter().zip(reference).filter(|(p, r)| **p && **r).count();
    let union = pred.iter().zip(reference).filter(|(p, r)| **p || **r).count();
    Ok(if union == 0 { 1.0 } else { inter as f64 / union as f64 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Validity {
    pub geometry_valid: bool,
    pub crs_consistent: bool,
    pub schema_valid: bool,
}

impl Validity {
    pub fn all(&self) -> bool {
        self.geometry_valid && self.crs_consistent && self.schema_valid
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub time_to_threshold: Option<TimeStamp>,
    pub progress_auc: f64,
    pub rework_rate: f64,
    pub suggestion_bias: Option<f64>,
    /// Accepted share of reviewed suggestions; null without reviews.
    pub accept_rate: Option<f64>,
    pub reject_rate: Option<f64>,
    pub compute_cost: u64,
    pub validity: Validity,
    pub final_quality: f64,
    pub n_edits: u64,
    pub end_time: TimeStamp,
}

/// Accept and reject shares over all review decisions.
pub fn review_rates(ledger: &[EditEvent]) -> (Option<f64>, Option<f64>) {
    let acc = ledger.iter().filter(|e| e.kind == EditKind::Accept).count();
    let rej = ledger.iter().filter(|e| e.kind == EditKind::Reject).count();
    let n = acc + rej;
    if n == 0 {
        return (None, None);
    }
    (Some(acc as f64 / n as f64), Some(rej as f64 / n as f64))
}

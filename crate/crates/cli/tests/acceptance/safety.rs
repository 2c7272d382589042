//! Fuzzed suggestion traffic never touches committed labels.
//!
//! Sessions interleave 10,000 perceive, propagate and dual-loop steps with
//! reviews, commits, manual labels and deletions. Two independent audits run:
//! committed features are snapshotted around every suggestion step, and the
//! full ledger is replayed against a status machine in which only a manual
//! create or overwrite, or an accept followed by a commit, may produce a
//! committed label.

use std::collections::BTreeMap;

use agency_core::navigation::{cell_zoom, PatchRef};
use agency_core::perception::{PerceptionQuery, Task};
use agency_core::propagation::{Decision, ReviewBatch};
use agency_core::raster::CellId;
use agency_core::session::ledger::{EditKind, LogRecord};
use agency_core::session::{Action, CapabilityLevel, DualParams, Session, SessionSpec, Step};
use agency_core::time::TimeStamp;
use agency_core::vector::{Feature, LabelOrigin, LabelStatus};
use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{ensure, Check};

const SESSIONS: u64 = 20;
const OPS_PER_SESSION: usize = 500;

#[derive(Default)]
struct Tally {
    attempted: usize,
    applied: BTreeMap<&'static str, usize>,
    suggested: usize,
    committed_seen: usize,
}

fn committed(s: &Session) -> BTreeMap<String, Feature> {
    s.labels().iter().filter(|f| f.status == LabelStatus::Committed).map(|f| (f.id.clone(), f.clone())).collect()
}

fn ids_with(s: &Session, status: LabelStatus, label: Option<&str>) -> Vec<String> {
    s.labels()
        .iter()
        .filter(|f| f.status == status && label.is_none_or(|l| f.label.as_deref() == Some(l)))
        .map(|f| f.id.clone())
        .collect()
}

fn suggestion_op(rng: &mut ChaCha8Rng, s: &Session) -> Action {
    let grid = s.world().grid;
    let classes = s.world().spec.classes.clone();
    match rng.random_range(0..3) {
        0 => {
            // aim half the patches at cells that already carry a label
            let labeled: Vec<CellId> = s.labels().iter().filter_map(|f| f.cell).collect();
            let patches = (0..rng.random_range(1..=3))
                .map(|_| {
                    let c = match labeled.choose(rng) {
                        Some(c) if rng.random_bool(0.5) => *c,
                        _ => grid.cell_at_index(rng.random_range(0..grid.len())),
                    };
                    PatchRef {
                        bbox: grid.cell_bbox(c),
                        timestamp: TimeStamp(rng.random_range(0..100 * 86_400)),
                        layer_view: "rgb".into(),
                        cells: vec![c],
                        zoom: cell_zoom(&grid),
                    }
                })
                .collect();
            let map = classes.iter().map(|c| (c.clone(), if c == "maize" { c.clone() } else { "other".into() })).collect();
            Action::Perceive {
                query: PerceptionQuery { patches, task: Task::Classify { classes }, question: "crop?".into() },
                suggest: Some(map),
            }
        }
        1 => {
            let mut pos = ids_with(s, LabelStatus::Committed, Some("maize"));
            pos.extend(ids_with(s, LabelStatus::Accepted, Some("maize")));
            let neg = ids_with(s, LabelStatus::Committed, Some("other"));
            let take = |rng: &mut ChaCha8Rng, v: &[String], n: usize| -> Vec<String> {
                v.choose_multiple(rng, n).cloned().collect()
            };
            let (np, nn) = (rng.random_range(1..=3), rng.random_range(0..=2));
            Action::Propagate {
                label: "maize".into(),
                positives: take(rng, &pos, np),
                negatives: take(rng, &neg, nn),
                k: rng.random_range(1..=4),
                slice: rng.random_range(0..2),
                mask: None,
            }
        }
        _ => Action::DualLoopStep(DualParams {
            queue_len: rng.random_range(1..=8),
            suggest: Some(["maize", "other"][rng.random_range(0..2)].into()),
            max_suggestions: Some(rng.random_range(1..=4)),
            mask: None,
            slice: rng.random_range(0..2),
        }),
    }
}

fn housekeeping(rng: &mut ChaCha8Rng, s: &Session) -> Option<Action> {
    let grid = s.world().grid;
    match rng.random_range(0..5) {
        0 | 1 => {
            let pending = ids_with(s, LabelStatus::Suggested, None);
            if pending.is_empty() {
                return None;
            }
            let n = rng.random_range(1..=pending.len().min(6));
            let decisions = pending
                .choose_multiple(rng, n)
                .map(|id| (id.clone(), if rng.random_bool(0.6) { Decision::Accept } else { Decision::Reject }))
                .collect();
            Some(Action::Review { batch: ReviewBatch::Each { decisions } })
        }
        2 => Some(Action::Commit { ids: None }),
        3 => {
            let c = grid.cell_at_index(rng.random_range(0..grid.len()));
            let label = if rng.random_bool(0.4) { "maize" } else { "other" };
            Some(Action::ManualLabel { cell: c, label: label.into() })
        }
        _ => {
            let live: Vec<String> = s.labels().iter().filter(|f| f.status.is_live()).map(|f| f.id.clone()).collect();
            live.choose(rng).map(|id| Action::DeleteFeature { id: id.clone() })
        }
    }
}

/// Status machine over the ledger. Returns the number of violations.
fn ledger_audit(log: &[LogRecord]) -> Result<usize, String> {
    let mut status: BTreeMap<String, LabelStatus> = BTreeMap::new();
    let mut current_op = "";
    let mut violations = 0;
    for rec in log {
        match rec {
            LogRecord::Action { op, .. } => current_op = op.name(),
            LogRecord::Event(e) => {
                let prior = status.get(&e.target).copied();
                let suggestion_step = matches!(current_op, "perceive" | "propagate" | "dual_loop_step");
                let ok = match e.kind {
                    // tools may only add brand-new suggestions
                    EditKind::Suggest => prior.is_none() && e.origin.is_suggestion(),
                    EditKind::Create => !suggestion_step && prior.is_none() && e.origin == LabelOrigin::Manual,
                    EditKind::Overwrite => !suggestion_step && prior == Some(LabelStatus::Committed),
                    EditKind::Accept | EditKind::Reject => !suggestion_step && prior == Some(LabelStatus::Suggested),
                    EditKind::Commit => !suggestion_step && prior == Some(LabelStatus::Accepted),
                    EditKind::Delete => !suggestion_step && prior.is_some_and(LabelStatus::is_live),
                    EditKind::Attribute => !suggestion_step,
                };
                violations += usize::from(!ok);
                match e.kind {
                    EditKind::Suggest => status.insert(e.target.clone(), LabelStatus::Suggested),
                    EditKind::Create | EditKind::Overwrite | EditKind::Commit => {
                        status.insert(e.target.clone(), LabelStatus::Committed)
                    }
                    EditKind::Accept => status.insert(e.target.clone(), LabelStatus::Accepted),
                    EditKind::Reject => status.insert(e.target.clone(), LabelStatus::Rejected),
                    EditKind::Delete => status.remove(&e.target),
                    EditKind::Attribute => None,
                };
            }
            _ => {}
        }
    }
    Ok(violations)
}

fn one_session(seed: u64, tally: &mut Tally) -> Result<usize, String> {
    let spec = SessionSpec {
        capability: CapabilityLevel::PlusAgent,
        t_max: 10_000_000,
        eval_interval: 600,
        seed,
        ..SessionSpec::default()
    };
    let mut s = Session::new(spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5afe);
    let mut violations = 0;

    // a committed base of both labels
    let grid = s.world().grid;
    for i in 0..16 {
        let c = grid.cell_at_index((i * 61 + seed as usize * 7) % grid.len());
        let label = if i % 2 == 0 { "maize" } else { "other" };
        let _ = s.apply(&Step::new(1, Action::ManualLabel { cell: c, label: label.into() }));
    }

    let mut done = 0;
    while done < OPS_PER_SESSION {
        if rng.random_bool(0.5) {
            if let Some(op) = housekeeping(&mut rng, &s) {
                let _ = s.apply(&Step::new(1, op));
            }
            continue;
        }
        let op = suggestion_op(&mut rng, &s);
        let name = op.name();
        let before = committed(&s);
        let ledger_len = s.ledger().len();
        let result = s.apply(&Step::new(1, op));
        done += 1;
        tally.attempted += 1;
        let after = committed(&s);
        for (id, f) in &before {
            if after.get(id) != Some(f) {
                violations += 1;
            }
        }
        // a suggestion step cannot create committed labels either
        violations += after.keys().filter(|id| !before.contains_key(*id)).count();
        if let Ok(out) = result {
            *tally.applied.entry(name).or_default() += 1;
            tally.suggested += out.created.len();
            ensure!(
                out.created.iter().all(|f| f.status == LabelStatus::Suggested && f.origin.is_suggestion()),
                "seed {seed}: {name} created a non-suggestion"
            );
        } else {
            ensure!(s.ledger().len() == ledger_len, "seed {seed}: failed {name} wrote to the ledger");
        }
        tally.committed_seen = tally.committed_seen.max(after.len());
    }
    violations += ledger_audit(s.log())?;
    Ok(violations)
}

pub fn run() -> Check {
    let mut tally = Tally::default();
    let mut violations = 0;
    for seed in 0..SESSIONS {
        violations += one_session(seed, &mut tally)?;
    }
    ensure!(tally.attempted == 10_000, "ran {} operations", tally.attempted);
    ensure!(violations == 0, "{violations} committed-label violations");
    let applied: Vec<String> = tally.applied.iter().map(|(k, v)| format!("{k}={v}")).collect();
    ensure!(tally.applied.len() == 3, "not every operation kind succeeded: {applied:?}");
    Ok(format!(
        "{} ops ({}), {} suggestions, up to {} committed labels, 0 violations",
        tally.attempted,
        applied.join(" "),
        tally.suggested,
        tally.committed_seen
    ))
}

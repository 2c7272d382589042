//! Hand-computed cases for the four productivity metrics.

use agency_core::session::ledger::{EditEvent, EditKind};
use agency_core::session::metrics::{
    compute_progress_auc, compute_rework_rate, compute_suggestion_bias, compute_time_to_threshold, JudgedLabel,
};
use agency_core::session::QualitySample;
use agency_core::time::TimeStamp;
use agency_core::vector::{LabelOrigin, LabelStatus};

use super::{ensure, Check};

const TOL: f64 = 1e-12;

fn curve(points: &[(i64, f64)]) -> Vec<QualitySample> {
    points.iter().map(|&(t, q)| QualitySample::new(t, q)).collect()
}

fn close(got: f64, want: f64) -> bool {
    (got - want).abs() <= TOL
}

const RAMP: &[(i64, f64)] = &[(0, 0.0), (10, 0.4), (20, 0.7), (30, 0.9)];

fn threshold_cases() -> Result<usize, String> {
    let cases: &[(&[(i64, f64)], f64, Option<i64>)] = &[
        (RAMP, 0.7, Some(20)),
        (RAMP, 0.95, None),
        (RAMP, 0.4, Some(10)),
        (RAMP, 0.9, Some(30)),
        (&[(0, 0.7)], 0.7, Some(0)),
        (&[(0, 0.5)], 0.8, None),
        // not monotone: the first crossing counts even if Q dips later
        (&[(0, 0.0), (5, 0.8), (10, 0.6), (15, 0.85)], 0.8, Some(5)),
        (&[(0, 0.0), (5, 0.8), (10, 0.6), (15, 0.85)], 0.85, Some(15)),
        // only sampled points count, no interpolation
        (&[(0, 0.0), (10, 0.5), (20, 1.0)], 0.75, Some(20)),
        (&[(0, 0.0), (10, 0.5), (10, 0.9)], 0.9, Some(10)),
        (&[(0, 0.0), (100, 1.0)], 1.0, Some(100)),
        (&[(3, 0.81)], 0.8, Some(3)),
    ];
    for (pts, tau, want) in cases {
        let got = compute_time_to_threshold(&curve(pts), *tau).map_err(|e| e.to_string())?;
        ensure!(got == want.map(TimeStamp), "T_tau({pts:?}, {tau}) = {got:?}, want {want:?}");
    }
    ensure!(compute_time_to_threshold(&[], 0.5).is_err(), "empty curve accepted");
    ensure!(compute_time_to_threshold(&curve(&[(10, 0.1), (5, 0.2)]), 0.5).is_err(), "unordered curve accepted");
    Ok(cases.len() + 2)
}

fn auc_cases() -> Result<usize, String> {
    let cases: &[(&[(i64, f64)], i64, f64)] = &[
        (&[(0, 1.0), (10, 1.0)], 10, 1.0),
        (&[(0, 0.0), (10, 0.0)], 10, 0.0),
        (&[(0, 0.0), (10, 1.0)], 10, 0.5),
        // 2 + 5.5 + 8
        (RAMP, 30, 15.5 / 30.0),
        // then 0.9 held for 10 s
        (RAMP, 40, 24.5 / 40.0),
        (RAMP, 20, 7.5 / 20.0),
        // the segment 20..30 cut at 25 where Q = 0.8
        (RAMP, 25, 11.25 / 25.0),
        (&[(0, 0.0), (10, 1.0)], 5, 0.25),
        (&[(0, 0.0), (10, 1.0)], 20, 0.75),
        (&[(0, 0.6)], 100, 0.6),
        (&[(0, 0.3)], 0, 0.3),
        // the first sample is held back to t=0
        (&[(10, 0.5), (20, 1.0)], 20, 12.5 / 20.0),
        // a jump at t=10
        (&[(0, 0.0), (10, 0.0), (10, 1.0), (20, 1.0)], 20, 0.5),
    ];
    for (pts, t_max, want) in cases {
        let got = compute_progress_auc(&curve(pts), *t_max).map_err(|e| e.to_string())?;
        ensure!(close(got, *want), "AUC({pts:?}, {t_max}) = {got}, want {want}");
    }
    ensure!(compute_progress_auc(&[], 10).is_err(), "empty curve accepted");
    Ok(cases.len() + 1)
}

fn ev(kind: EditKind, prior: Option<LabelStatus>) -> EditEvent {
    EditEvent {
        t: TimeStamp(0),
        kind,
        target: "f".into(),
        origin: LabelOrigin::Manual,
        label: Some("a".into()),
        prior_label: None,
        prior_status: prior,
        cell: None,
    }
}

fn rework_cases() -> Result<usize, String> {
    use EditKind::*;
    use LabelStatus::{Accepted, Committed, Suggested};
    let c = |k| ev(k, None);
    let rep = |k, n| vec![c(k); n];
    let cat = |parts: Vec<Vec<EditEvent>>| parts.concat();
    let cases: Vec<(Vec<EditEvent>, f64)> = vec![
        (vec![], 0.0),
        (rep(Create, 5), 0.0),
        (cat(vec![rep(Create, 7), rep(Overwrite, 3)]), 0.3),
        (vec![c(Create), ev(Delete, Some(Committed))], 0.5),
        (vec![c(Create), ev(Delete, Some(Suggested))], 0.0),
        (vec![c(Accept), c(Reject), c(Overwrite), c(Create)], 0.25),
        // tool events are not edits
        (cat(vec![rep(Suggest, 3), rep(Commit, 2), rep(Attribute, 4)]), 0.0),
        (cat(vec![rep(Suggest, 3), vec![c(Accept), c(Overwrite)]]), 0.5),
        (rep(Overwrite, 4), 1.0),
        (
            cat(vec![
                rep(Create, 3),
                vec![c(Overwrite), ev(Delete, Some(Committed)), ev(Delete, Some(Accepted))],
            ]),
            2.0 / 6.0,
        ),
        (cat(vec![rep(Commit, 4), vec![c(Create)]]), 0.0),
    ];
    for (ledger, want) in &cases {
        let got = compute_rework_rate(ledger);
        let kinds: Vec<EditKind> = ledger.iter().map(|e| e.kind).collect();
        ensure!(close(got, *want), "rework({kinds:?}) = {got}, want {want}");
    }
    Ok(cases.len())
}

fn judged(origin: LabelOrigin, assigned: &str, truth: &str, n: usize) -> Vec<JudgedLabel> {
    vec![JudgedLabel { origin, assigned: assigned.into(), truth: truth.into() }; n]
}

fn bias_cases() -> Result<usize, String> {
    use LabelOrigin::*;
    let p = |a, t, n| judged(Propagation, a, t, n);
    let m = |a, t, n| judged(Manual, a, t, n);
    let cases: Vec<(Vec<Vec<JudgedLabel>>, Option<f64>)> = vec![
        (vec![p("a", "b", 1), m("a", "b", 1)], Some(0.0)),
        (vec![p("a", "b", 3), m("a", "b", 5)], Some(0.0)),
        (vec![p("a", "b", 1), m("b", "a", 1)], Some(1.0)),
        (vec![p("a", "b", 2), p("b", "a", 2), m("a", "b", 4)], Some(0.5)),
        // correct labels do not enter either histogram
        (vec![p("a", "b", 2), p("b", "a", 2), m("a", "b", 4), p("a", "a", 9), m("b", "b", 3)], Some(0.5)),
        (vec![p("a", "a", 3), m("a", "b", 2)], None),
        (vec![p("a", "b", 3), m("a", "a", 2)], None),
        (vec![], None),
        // (1/3, 2/3, 0) against (1/2, 1/4, 1/4)
        (vec![p("a", "b", 1), p("a", "c", 2), m("a", "b", 2), m("a", "c", 1), m("b", "a", 1)], Some(5.0 / 12.0)),
        (
            vec![judged(Perceptor, "a", "b", 1), judged(DualModel, "a", "b", 1), m("a", "b", 1), m("b", "a", 1)],
            Some(0.5),
        ),
        (vec![p("x", "y", 3), m("x", "y", 1), m("y", "x", 2)], Some(2.0 / 3.0)),
        (vec![p("a", "b", 1), p("c", "d", 1), m("a", "b", 2)], Some(0.5)),
    ];
    for (parts, want) in &cases {
        let labels = parts.concat();
        let got = compute_suggestion_bias(&labels);
        let ok = match (got, want) {
            (None, None) => true,
            (Some(g), Some(w)) => close(g, *w),
            _ => false,
        };
        ensure!(ok, "bias over {} labels = {got:?}, want {want:?}", labels.len());
    }
    Ok(cases.len())
}

pub fn run() -> Check {
    let t = threshold_cases()?;
    let a = auc_cases()?;
    let r = rework_cases()?;
    let b = bias_cases()?;
    Ok(format!("T_tau {t}, AUC {a}, rework {r}, bias {b} cases"))
}

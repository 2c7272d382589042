//! Runs many independent sim-user sessions and tabulates their metrics.

use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::seed;

use super::engine::Session;
use super::ledger::LogRecord;
use super::metrics::MetricsReport;
use super::simuser::{SimUser, SimUserPolicy};
use super::{CapabilityLevel, SessionSpec};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HarnessConfig {
    /// Number of simulated users; each runs one session per seed and level.
    pub users: u32,
    /// World seeds; every level sees the same worlds.
    pub seeds: Vec<u64>,
    pub capabilities: Vec<CapabilityLevel>,
    /// Template; `seed` and `capability` are overridden per session.
    pub session: SessionSpec,
    pub policy: SimUserPolicy,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            users: 1,
            seeds: (1..=5).collect(),
            capabilities: CapabilityLevel::ALL.to_vec(),
            session: SessionSpec::default(),
            policy: SimUserPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SessionRun {
    pub session_id: String,
    pub user: u32,
    pub seed: u64,
    pub capability: CapabilityLevel,
    pub metrics: MetricsReport,
    pub log: Vec<LogRecord>,
}

#[derive(Debug, Clone, PartialEq)]
struct Job {
    user: u32,
    seed: u64,
    capability: CapabilityLevel,
}

impl HarnessConfig {
    fn jobs(&self) -> Vec<Job> {
        let mut out = Vec::new();
        for user in 0..self.users {
            for &seed in &self.seeds {
                for &capability in &self.capabilities {
                    out.push(Job { user, seed, capability });
                }
            }
        }
        out
    }
}

/// Seed the sim user's eyes from the user and world so users differ but each
/// is stable across levels.
pub fn user_seed(user: u32, world_seed: u64) -> u64 {
    seed::mix(&[0x05e7, user as u64, world_seed])
}

pub fn run_one(spec: SessionSpec, policy: &SimUserPolicy, user: u32) -> Result<(MetricsReport, Vec<LogRecord>)> {
    let mut s = Session::new(spec)?;
    let us = user_seed(user, s.spec().seed);
    SimUser::new(&mut s, policy.clone(), us)?.run()?;
    let m = s.metrics()?;
    Ok((m, s.log().to_vec()))
}

/// Runs every (user, seed, level) session, `jobs` at a time. Output order is
/// independent of `jobs`.
pub fn run_bench(cfg: &HarnessConfig, jobs: usize) -> Result<Vec<SessionRun>> {
    if cfg.users == 0 || cfg.seeds.is_empty() || cfg.capabilities.is_empty() {
        return Err(Error::InvalidParams("bench needs users, seeds and capability levels".into()));
    }
    cfg.policy.validate()?;
    let work = cfg.jobs();
    let results: Mutex<Vec<Option<Result<SessionRun>>>> = Mutex::new((0..work.len()).map(|_| None).collect());
    let next = Mutex::new(0usize);
    std::thread::scope(|scope| {
        for _ in 0..jobs.max(1).min(work.len()) {
            scope.spawn(|| loop {
                let i = {
                    let mut n = next.lock().expect("job counter");
                    let i = *n;
                    *n += 1;
                    i
                };
                let Some(job) = work.get(i) else { break };
                let mut spec = cfg.session.clone();
                spec.seed = job.seed;
                spec.capability = job.capability;
                let r = run_one(spec, &cfg.policy, job.user).map(|(metrics, log)| SessionRun {
                    session_id: format!("u{}-s{}-{}", job.user, job.seed, job.capability),
                    user: job.user,
                    seed: job.seed,
                    capability: job.capability,
                    metrics,
                    log,
                });
                results.lock().expect("results")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("results")
        .into_iter()
        .map(|r| r.expect("every job ran"))
        .collect()
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

pub const SUMMARY_HEADER: &str = "session_id,capability,T_tau,auc,rework,bias,accept_rate,cost";

/// `summary.csv` rows; empty fields mean null.
pub fn summary_csv(runs: &[SessionRun]) -> String {
    let mut out = String::from(SUMMARY_HEADER);
    out.push('\n');
    for r in runs {
        let m = &r.metrics;
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            r.session_id,
            r.capability,
            m.time_to_threshold.map(|t| t.0.to_string()).unwrap_or_default(),
            m.progress_auc,
            m.rework_rate,
            opt(m.suggestion_bias),
            opt(m.accept_rate),
            m.compute_cost
        ));
    }
    out
}

/// Median of the present values; `None` counts as larger than any value.
pub fn median_time(values: &[Option<i64>]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v: Vec<Option<i64>> = values.to_vec();
    v.sort_by(|a, b| match (a, b) {
        (Some(x), Some(y)) => x.cmp(y),
        (Some(_), None) => std::cmp::Ordering::Less,
        (None, Some(_)) => std::cmp::Ordering::Greater,
        (None, None) => std::cmp::Ordering::Equal,
    });
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2].map(|x| x as f64)
    } else {
        match (v[n / 2 - 1], v[n / 2]) {
            (Some(a), Some(b)) => Some((a + b) as f64 / 2.0),
            _ => None,
        }
    }
}

pub fn median(values: &[f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    let mut v = values.to_vec();
    v.sort_by(|a, b| a.total_cmp(b));
    let n = v.len();
    Some(if n % 2 == 1 { v[n / 2] } else { (v[n / 2 - 1] + v[n / 2]) / 2.0 })
}

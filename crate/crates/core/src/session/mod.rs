//! Benchmark sessions: a simulated clock, a suggest-review-commit edit
//! ledger, a background quality evaluator and capability gating.
//!
//! A session owns a generated world. Actors submit [`Step`]s, each taking a
//! whole number of simulated seconds. The evaluator samples quality every
//! `eval_interval` seconds against reference labels the actor cannot reach.

pub mod actions;
pub mod dual_run;
mod engine;
pub mod evaluator;
pub mod harness;
pub mod ledger;
pub mod metrics;
pub mod replay;
pub mod scenario;
pub mod simuser;
pub mod world;

pub use actions::*;
pub use engine::{Session, SessionDriver};
pub use ledger::{EditEvent, EditKind, EndReason, LogRecord};
pub use metrics::{MetricsReport, QualitySample, Validity};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::Polygon;
use crate::time::TimeWindow;
use world::WorldSpec;

/// Feature tiers compared by the benchmark. Each level includes the ones below.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CapabilityLevel {
    #[default]
    Baseline,
    PlusPropagation,
    PlusScaling,
    PlusAgent,
}

impl CapabilityLevel {
    pub const ALL: [CapabilityLevel; 4] = [
        CapabilityLevel::Baseline,
        CapabilityLevel::PlusPropagation,
        CapabilityLevel::PlusScaling,
        CapabilityLevel::PlusAgent,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CapabilityLevel::Baseline => "baseline",
            CapabilityLevel::PlusPropagation => "plus_propagation",
            CapabilityLevel::PlusScaling => "plus_scaling",
            CapabilityLevel::PlusAgent => "plus_agent",
        }
    }
}

impl std::fmt::Display for CapabilityLevel {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for CapabilityLevel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| Error::InvalidParams(format!("unknown capability level `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SessionTask {
    /// Per-cell labels scored by F1 of `class`.
    BinaryClassify { class: String },
    /// Per-cell masks scored by IoU of `class`.
    Segment { class: String },
}

impl SessionTask {
    pub fn class(&self) -> &str {
        match self {
            SessionTask::BinaryClassify { class } | SessionTask::Segment { class } => class,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SessionSpec {
    pub task: SessionTask,
    /// Defaults to the world extent.
    pub roi: Option<Polygon>,
    /// Defaults to the world's time window.
    pub window: Option<TimeWindow>,
    pub tau: f64,
    pub t_max: i64,
    pub capability: CapabilityLevel,
    pub eval_interval: i64,
    pub seed: u64,
    pub world: WorldSpec,
    /// Label flip rate of the session's mock perceptor.
    pub perceptor_noise: f64,
    /// Label for cells outside the task class.
    pub negative_label: String,
}

impl Default for SessionSpec {
    fn default() -> Self {
        Self {
            task: SessionTask::BinaryClassify { class: "maize".into() },
            roi: None,
            window: None,
            tau: 0.8,
            t_max: 3600,
            capability: CapabilityLevel::Baseline,
            eval_interval: 30,
            seed: 0,
            world: WorldSpec::default(),
            perceptor_noise: 0.1,
            negative_label: "other".into(),
        }
    }
}

impl SessionSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau <= 1.0) {
            return Err(Error::InvalidParams(format!("threshold {} outside (0, 1]", self.tau)));
        }
        if self.t_max < 0 {
            return Err(Error::InvalidParams("time budget must be non-negative".into()));
        }
        if self.eval_interval <= 0 {
            return Err(Error::InvalidParams("evaluation interval must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.perceptor_noise) {
            return Err(Error::InvalidParams("perceptor noise outside [0, 1)".into()));
        }
        if self.negative_label.is_empty() || self.negative_label == self.task.class() {
            return Err(Error::InvalidParams("negative label must differ from the task class".into()));
        }
        self.world.validate()?;
        self.world.class_index(self.task.class())?;
        if let Some(r) = &self.roi {
            r.validate()?;
        }
        Ok(())
    }
}

//! Actor actions and what they return.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::attribution::AttributeKind;
use crate::geomemory::{CurateAction, EntryId, MemoryEntry, MemoryQuery};
use crate::geometry::Polygon;
use crate::graph::{Budget, ExecutionReport, GraphSpec};
use crate::navigation::{ContextBundle, NavParams, QueryKind};
use crate::perception::{PerceptionQuery, PerceptionResult};
use crate::propagation::{Candidate, ReviewBatch};
use crate::raster::CellId;
use crate::time::TimeStamp;
use crate::vector::{Feature, LabelOrigin, LabelStatus};

use super::world::LABELS_LAYER;
use super::CapabilityLevel;

/// Raster band used to restrict a pool of cells.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MaskRef {
    pub layer: String,
    #[serde(default = "default_mask_band")]
    pub band: String,
}

fn default_mask_band() -> String {
    "mask".into()
}

fn default_queue() -> usize {
    10
}

fn default_labels() -> String {
    LABELS_LAYER.into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DualParams {
    #[serde(default = "default_queue")]
    pub queue_len: usize,
    /// Suggest this class on unlabeled cells the model assigns to it.
    #[serde(default)]
    pub suggest: Option<String>,
    #[serde(default)]
    pub max_suggestions: Option<usize>,
    #[serde(default)]
    pub mask: Option<MaskRef>,
    #[serde(default)]
    pub slice: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Action {
    ManualLabel {
        cell: CellId,
        label: String,
    },
    DeleteFeature {
        id: String,
    },
    Propagate {
        label: String,
        /// Feature ids of reviewed positive seeds.
        positives: Vec<String>,
        #[serde(default)]
        negatives: Vec<String>,
        k: usize,
        #[serde(default)]
        slice: usize,
        #[serde(default)]
        mask: Option<MaskRef>,
    },
    Review {
        batch: ReviewBatch,
    },
    /// Commits the listed Accepted features, or all of them.
    Commit {
        #[serde(default)]
        ids: Option<Vec<String>>,
    },
    DualLoopStep(DualParams),
    Navigate {
        kind: QueryKind,
        budget: usize,
        #[serde(default)]
        params: NavParams,
    },
    Perceive {
        query: PerceptionQuery,
        /// Perceptor label to layer label; mapped answers become suggestions.
        #[serde(default)]
        suggest: Option<BTreeMap<String, String>>,
    },
    RunGraph {
        spec: GraphSpec,
        #[serde(default)]
        budget: Budget,
    },
    ResumeGraph {
        hash: String,
        #[serde(default)]
        budget: Budget,
    },
    Attribute {
        #[serde(default = "default_labels")]
        layer: String,
        feature_id: String,
        kinds: Vec<AttributeKind>,
    },
    MemoryWrite {
        geometry: Polygon,
        query: String,
        #[serde(default)]
        output_ref: Option<String>,
        #[serde(default)]
        notes: String,
    },
    MemoryRetrieve {
        query: MemoryQuery,
    },
    MemoryCurate {
        id: EntryId,
        action: CurateAction,
    },
    SetBudget {
        perceptor_calls: Option<u64>,
    },
    Wait,
    Done,
}

impl Action {
    pub fn name(&self) -> &'static str {
        match self {
            Action::ManualLabel { .. } => "manual_label",
            Action::DeleteFeature { .. } => "delete_feature",
            Action::Propagate { .. } => "propagate",
            Action::Review { .. } => "review",
            Action::Commit { .. } => "commit",
            Action::DualLoopStep(_) => "dual_loop_step",
            Action::Navigate { .. } => "navigate",
            Action::Perceive { .. } => "perceive",
            Action::RunGraph { .. } => "run_graph",
            Action::ResumeGraph { .. } => "resume_graph",
            Action::Attribute { .. } => "attribute",
            Action::MemoryWrite { .. } => "memory_write",
            Action::MemoryRetrieve { .. } => "memory_retrieve",
            Action::MemoryCurate { .. } => "memory_curate",
            Action::SetBudget { .. } => "set_budget",
            Action::Wait => "wait",
            Action::Done => "done",
        }
    }

    /// Lowest capability level allowed to run this action.
    pub fn required_level(&self) -> CapabilityLevel {
        use CapabilityLevel::*;
        match self {
            Action::ManualLabel { .. }
            | Action::DeleteFeature { .. }
            | Action::Review { .. }
            | Action::Commit { .. }
            | Action::Wait
            | Action::Done => Baseline,
            Action::Propagate { .. } => PlusPropagation,
            Action::DualLoopStep(_) | Action::RunGraph { .. } | Action::ResumeGraph { .. } => PlusScaling,
            Action::Navigate { .. }
            | Action::Perceive { .. }
            | Action::Attribute { .. }
            | Action::MemoryWrite { .. }
            | Action::MemoryRetrieve { .. }
            | Action::MemoryCurate { .. }
            | Action::SetBudget { .. } => PlusAgent,
        }
    }
}

/// An action plus the simulated seconds it takes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Step {
    pub dt: u64,
    pub op: Action,
}

impl Step {
    pub fn new(dt: u64, op: Action) -> Self {
        Self { dt, op }
    }
}

/// What the actor may see of a label.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureView {
    pub id: String,
    pub cell: Option<CellId>,
    pub label: Option<String>,
    pub status: LabelStatus,
    pub origin: LabelOrigin,
}

impl From<&Feature> for FeatureView {
    fn from(f: &Feature) -> Self {
        Self { id: f.id.clone(), cell: f.cell, label: f.label.clone(), status: f.status, origin: f.label_origin }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DualOutcome {
    pub iteration: u32,
    pub training_digest: String,
    /// Least certain unlabeled cells, most uncertain first.
    pub queue: Vec<CellId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum OutcomeDetail {
    None,
    Candidates(Vec<Candidate>),
    Dual(DualOutcome),
    Context(ContextBundle),
    Perception(Vec<PerceptionResult>),
    Graph(ExecutionReport),
    Memory(Vec<MemoryEntry>),
    MemoryEntry(MemoryEntry),
    Feature(Box<Feature>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionOutcome {
    /// False when the action would have overrun the time budget; the session
    /// then ended without applying it.
    pub applied: bool,
    pub clock: TimeStamp,
    pub finished: bool,
    /// Features created by this action.
    pub created: Vec<FeatureView>,
    pub detail: OutcomeDetail,
}

/// Actor-facing session state; never includes reference labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionView {
    pub clock: TimeStamp,
    pub t_max: i64,
    pub finished: bool,
    pub capability: CapabilityLevel,
    pub features: Vec<FeatureView>,
}

impl SessionView {
    pub fn live_at(&self, cell: CellId) -> Option<&FeatureView> {
        self.features.iter().find(|f| f.cell == Some(cell) && f.status.is_live())
    }
}

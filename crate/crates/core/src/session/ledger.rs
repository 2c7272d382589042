//! Append-only edit ledger and the `log.jsonl` interaction log.

use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::raster::CellId;
use crate::time::TimeStamp;
use crate::vector::{LabelOrigin, LabelStatus};

use super::actions::Action;
use super::metrics::QualitySample;
use super::SessionSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EditKind {
    Create,
    Overwrite,
    Delete,
    Accept,
    Reject,
    Attribute,
    /// A provisional label proposed by a tool.
    Suggest,
    /// Accepted to Committed.
    Commit,
}

impl EditKind {
    /// Kinds counted as user edits by the rework rate.
    pub fn is_edit(self) -> bool {
        matches!(self, EditKind::Create | EditKind::Overwrite | EditKind::Delete | EditKind::Accept | EditKind::Reject)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EditEvent {
    pub t: TimeStamp,
    pub kind: EditKind,
    pub target: String,
    pub origin: LabelOrigin,
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prior_status: Option<LabelStatus>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<CellId>,
}

impl EditEvent {
    /// Overwrites and deletions of committed labels revise earlier work.
    pub fn is_revision(&self) -> bool {
        self.kind == EditKind::Overwrite
            || (self.kind == EditKind::Delete && self.prior_status == Some(LabelStatus::Committed))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EndReason {
    Done,
    TimeBudget,
}

pub const LOG_FORMAT: &str = "agency-log";
pub const LOG_VERSION: u32 = 1;

/// One line of `log.jsonl`. Records appear in non-decreasing `t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "record", rename_all = "snake_case")]
pub enum LogRecord {
    Header {
        t: TimeStamp,
        format: String,
        version: u32,
        spec: Box<SessionSpec>,
    },
    /// An applied action; `t` is when it finished.
    Action {
        t: TimeStamp,
        start: TimeStamp,
        dt: u64,
        op: Box<Action>,
    },
    Event(EditEvent),
    Quality(QualitySample),
    Compute {
        t: TimeStamp,
        op: String,
        units: u64,
    },
    End {
        t: TimeStamp,
        reason: EndReason,
    },
}

impl LogRecord {
    pub fn t(&self) -> TimeStamp {
        match self {
            LogRecord::Header { t, .. }
            | LogRecord::Action { t, .. }
            | LogRecord::Compute { t, .. }
            | LogRecord::End { t, .. } => *t,
            LogRecord::Event(e) => e.t,
            LogRecord::Quality(q) => q.t,
        }
    }
}

pub fn write_log<W: Write>(records: &[LogRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_log<R: BufRead>(r: R) -> Result<Vec<LogRecord>> {
    let mut out: Vec<LogRecord> = Vec::new();
    for (i, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line).map_err(|e| Error::Schema(format!("log line {}: {e}", i + 1)))?;
        if out.last().is_some_and(|p| p.t() > rec.t()) {
            return Err(Error::Schema(format!("log line {}: time goes backwards", i + 1)));
        }
        out.push(rec);
    }
    Ok(out)
}

//! Geo-referenced memory of agent and user observations.
//!
//! Entries are appended by [`MemoryStore::write`], found by
//! [`MemoryStore::retrieve`] (spatial, temporal and keyword filters) and
//! edited only through [`MemoryStore::curate`]. Spatial lookups go through an
//! R-tree over entry bounding boxes and temporal lookups through an ordered
//! `(timestamp, id)` set. Indexes are rebuilt on load, never persisted.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{polygon_intersects_bbox, polygons_intersect, BBox, Polygon};
use crate::rtree::RTree;
use crate::time::{TimeStamp, TimeWindow};

pub type EntryId = u64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryStatus {
    Suggested,
    Confirmed,
    Deleted,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Author {
    Agent,
    User,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub id: EntryId,
    pub geometry: Polygon,
    pub timestamp: TimeStamp,
    pub query: String,
    pub output_ref: Option<String>,
    pub notes: String,
    pub status: MemoryStatus,
    pub author: Author,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpatialFilter {
    BBox(BBox),
    Polygon(Polygon),
}

impl SpatialFilter {
    fn bbox(&self) -> BBox {
        match self {
            SpatialFilter::BBox(b) => *b,
            SpatialFilter::Polygon(p) => p.bbox(),
        }
    }

    fn matches(&self, geometry: &Polygon) -> bool {
        match self {
            SpatialFilter::BBox(b) => polygon_intersects_bbox(geometry, b),
            SpatialFilter::Polygon(p) => polygons_intersect(geometry, p),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MemoryQuery {
    pub spatial: Option<SpatialFilter>,
    pub temporal: Option<TimeWindow>,
    pub keyword: Option<String>,
    pub limit: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CurateAction {
    Delete,
    Correct {
        notes: Option<String>,
        geometry: Option<Polygon>,
    },
    Confirm,
}

#[derive(Debug, Clone)]
pub struct MemoryStore {
    roi: Polygon,
    entries: Vec<MemoryEntry>,
    spatial: RTree<EntryId>,
    temporal: BTreeSet<(TimeStamp, EntryId)>,
}

impl PartialEq for MemoryStore {
    fn eq(&self, other: &Self) -> bool {
        self.roi == other.roi && self.entries == other.entries
    }
}

impl MemoryStore {
    pub fn new(roi: Polygon) -> Self {
        Self {
            roi,
            entries: Vec::new(),
            spatial: RTree::new(),
            temporal: BTreeSet::new(),
        }
    }

    /// All entries in append order, deleted ones included.
    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn get(&self, id: EntryId) -> Result<&MemoryEntry> {
        self.entries
            .get(id as usize)
            .ok_or_else(|| Error::NotFound(format!("memory entry {id}")))
    }

    pub fn live_count(&self) -> usize {
        self.spatial.len()
    }

    fn index(&mut self, id: EntryId) {
        let e = &self.entries[id as usize];
        self.spatial.insert(e.geometry.bbox(), id);
        self.temporal.insert((e.timestamp, id));
    }

    fn unindex(&mut self, id: EntryId) {
        let e = &self.entries[id as usize];
        let (bbox, t) = (e.geometry.bbox(), e.timestamp);
        self.spatial.remove(&bbox, &id);
        self.temporal.remove(&(t, id));
    }

    /// Checks that `g` could be written (valid and touching the ROI).
    pub fn check_geometry(&self, g: &Polygon) -> Result<()> {
        g.validate()?;
        if !polygons_intersect(g, &self.roi) {
            return Err(Error::OutOfRoi);
        }
        Ok(())
    }

    /// Appends an entry. Agent entries start as suggestions; user entries are confirmed.
    pub fn write(
        &mut self,
        geometry: Polygon,
        timestamp: TimeStamp,
        query: impl Into<String>,
        output_ref: Option<String>,
        notes: impl Into<String>,
        author: Author,
    ) -> Result<EntryId> {
        self.check_geometry(&geometry)?;
        let id = self.entries.len() as EntryId;
        self.entries.push(MemoryEntry {
            id,
            geometry,
            timestamp,
            query: query.into(),
            output_ref,
            notes: notes.into(),
            status: match author {
                Author::Agent => MemoryStatus::Suggested,
                Author::User => MemoryStatus::Confirmed,
            },
            author,
        });
        self.index(id);
        Ok(id)
    }

    /// Ids whose boxes intersect `b`, straight from the R-tree.
    pub fn spatial_candidates(&self, b: &BBox) -> Vec<EntryId> {
        self.spatial.search(b).into_iter().copied().collect()
    }

    /// Ids with timestamps inside `w`, straight from the temporal index.
    pub fn temporal_candidates(&self, w: &TimeWindow) -> Vec<EntryId> {
        self.temporal
            .range((w.start, EntryId::MIN)..=(w.end, EntryId::MAX))
            .map(|&(_, id)| id)
            .collect()
    }

    /// Conjunction of the given filters, newest first (ties by id).
    pub fn retrieve(&self, q: &MemoryQuery) -> Result<Vec<MemoryEntry>> {
        if q.spatial.is_none() && q.temporal.is_none() && q.keyword.is_none() {
            return Err(Error::EmptyQuery);
        }
        let candidates: Vec<EntryId> = match (&q.spatial, &q.temporal) {
            (Some(s), _) => self.spatial_candidates(&s.bbox()),
            (None, Some(w)) => self.temporal_candidates(w),
            (None, None) => self
                .entries
                .iter()
                .filter(|e| e.status != MemoryStatus::Deleted)
                .map(|e| e.id)
                .collect(),
        };
        let needle = q.keyword.as_ref().map(|k| k.to_lowercase());
        let mut hits: Vec<MemoryEntry> = candidates
            .into_iter()
            .map(|id| &self.entries[id as usize])
            .filter(|e| e.status != MemoryStatus::Deleted)
            .filter(|e| q.spatial.as_ref().is_none_or(|s| s.matches(&e.geometry)))
            .filter(|e| q.temporal.as_ref().is_none_or(|w| w.contains(e.timestamp)))
            .filter(|e| {
                needle.as_ref().is_none_or(|k| {
                    e.query.to_lowercase().contains(k.as_str()) || e.notes.to_lowercase().contains(k.as_str())
                })
            })
            .cloned()
            .collect();
        hits.sort_by(|a, b| b.timestamp.cmp(&a.timestamp).then(a.id.cmp(&b.id)));
        if let Some(limit) = q.limit {
            hits.truncate(limit);
        }
        Ok(hits)
    }

    pub fn curate(&mut self, id: EntryId, action: CurateAction) -> Result<MemoryEntry> {
        let status = self.get(id)?.status;
        if status == MemoryStatus::Deleted {
            return Err(Error::AlreadyDeleted(id));
        }
        match action {
            CurateAction::Delete => {
                self.unindex(id);
                self.entries[id as usize].status = MemoryStatus::Deleted;
            }
            CurateAction::Correct { notes, geometry } => {
                if let Some(g) = &geometry {
                    self.check_geometry(g)?;
                }
                self.unindex(id);
                let e = &mut self.entries[id as usize];
                if let Some(n) = notes {
                    e.notes = n;
                }
                if let Some(g) = geometry {
                    e.geometry = g;
                }
                e.status = MemoryStatus::Confirmed;
                self.index(id);
            }
            CurateAction::Confirm => {
                self.entries[id as usize].status = MemoryStatus::Confirmed;
            }
        }
        Ok(self.entries[id as usize].clone())
    }

    /// One JSON object per line, append order.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for e in &self.entries {
            serde_json::to_writer(&mut w, e)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(roi: Polygon, r: R) -> Result<Self> {
        let mut store = MemoryStore::new(roi);
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let e: MemoryEntry = serde_json::from_str(&line)?;
            if e.id != store.entries.len() as EntryId {
                return Err(Error::Schema(format!("memory entry {} out of order", e.id)));
            }
            let live = e.status != MemoryStatus::Deleted;
            let id = e.id;
            store.entries.push(e);
            if live {
                store.index(id);
            }
        }
        Ok(store)
    }
}

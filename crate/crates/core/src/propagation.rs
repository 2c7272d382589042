//! "Find more like this": rank unlabeled items by similarity to seed labels.
//!
//! An item's score is its best cosine similarity to any positive seed, minus
//! its best similarity to any negative seed when negatives are given.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::embeddings::{cmp_score, cosine_similarity, EmbeddingIndex, EmbeddingVector};
use crate::error::{Error, Result};
use crate::vector::{LabelStatus, VectorLayer};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedSet {
    pub label: String,
    pub positives: Vec<String>,
    #[serde(default)]
    pub negatives: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    /// Item id in the embedding index (a cell id for grid tasks).
    pub id: String,
    pub score: f64,
    /// 1-based.
    pub rank: usize,
}

/// Score of one item against seed embeddings.
pub fn score(item: &EmbeddingVector, positives: &[&EmbeddingVector], negatives: &[&EmbeddingVector]) -> Result<f64> {
    let best = |seeds: &[&EmbeddingVector]| -> Result<f64> {
        let mut m = f64::NEG_INFINITY;
        for s in seeds {
            m = m.max(cosine_similarity(item, s)?);
        }
        Ok(m)
    };
    let pos = best(positives)?;
    if negatives.is_empty() {
        return Ok(pos);
    }
    Ok(pos - best(negatives)?)
}

/// Top-`k` pool items, ties by ascending id. `pool` must already exclude
/// seeds and labeled items.
pub fn rank(
    positives: &[&EmbeddingVector],
    negatives: &[&EmbeddingVector],
    pool: &[(&str, &EmbeddingVector)],
    k: usize,
) -> Result<Vec<Candidate>> {
    if positives.is_empty() {
        return Err(Error::EmptySeedSet);
    }
    if pool.is_empty() {
        return Err(Error::EmptyPool);
    }
    if k == 0 {
        return Err(Error::KZero);
    }
    let mut scored = pool
        .iter()
        .map(|(id, v)| Ok((score(v, positives, negatives)?, *id)))
        .collect::<Result<Vec<_>>>()?;
    scored.sort_by(|a, b| cmp_score(b.0, a.0).then_with(|| a.1.cmp(b.1)));
    Ok(scored
        .into_iter()
        .take(k)
        .enumerate()
        .map(|(i, (score, id))| Candidate { id: id.to_string(), score, rank: i + 1 })
        .collect())
}

/// Seeds are features of `layer` with Committed or Accepted status. The pool
/// is `pool` minus every item that already carries a feature of any status.
pub fn propagate(
    seeds: &SeedSet,
    layer: &VectorLayer,
    index: &EmbeddingIndex,
    pool: &[String],
    k: usize,
) -> Result<Vec<Candidate>> {
    if seeds.positives.is_empty() {
        return Err(Error::EmptySeedSet);
    }
    let resolve = |ids: &[String]| -> Result<Vec<&EmbeddingVector>> {
        ids.iter()
            .map(|id| {
                let f = layer.get(id)?;
                if !matches!(f.status, LabelStatus::Committed | LabelStatus::Accepted) {
                    return Err(Error::InvalidParams(format!("seed `{id}` is not reviewed")));
                }
                let cell = f.cell.ok_or_else(|| Error::InvalidParams(format!("seed `{id}` has no cell")))?;
                index
                    .get(&cell.to_string())
                    .ok_or_else(|| Error::NotFound(format!("embedding for {cell}")))
            })
            .collect()
    };
    let pos = resolve(&seeds.positives)?;
    let neg = resolve(&seeds.negatives)?;
    let taken: BTreeSet<String> = layer.iter().filter_map(|f| f.cell.map(|c| c.to_string())).collect();
    let items = pool
        .iter()
        .filter(|id| !taken.contains(*id))
        .map(|id| {
            index
                .get(id)
                .map(|v| (id.as_str(), v))
                .ok_or_else(|| Error::NotFound(format!("embedding for {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    rank(&pos, &neg, &items, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decision {
    Accept,
    Reject,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum ReviewBatch {
    Each { decisions: Vec<(String, Decision)> },
    AcceptAll { ids: Vec<String> },
    RejectAll { ids: Vec<String> },
}

impl ReviewBatch {
    pub fn decisions(&self) -> Vec<(String, Decision)> {
        match self {
            ReviewBatch::Each { decisions } => decisions.clone(),
            ReviewBatch::AcceptAll { ids } => ids.iter().map(|i| (i.clone(), Decision::Accept)).collect(),
            ReviewBatch::RejectAll { ids } => ids.iter().map(|i| (i.clone(), Decision::Reject)).collect(),
        }
    }
}

/// Applies a batch atomically: every target must still be Suggested, or
/// nothing changes.
pub fn batch_review(layer: &mut VectorLayer, batch: &ReviewBatch) -> Result<Vec<(String, Decision)>> {
    let decisions = batch.decisions();
    if decisions.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let mut seen = BTreeSet::new();
    for (id, _) in &decisions {
        if !seen.insert(id.as_str()) {
            return Err(Error::InvalidParams(format!("`{id}` appears twice in the batch")));
        }
        let f = layer.get(id)?;
        if f.status != LabelStatus::Suggested {
            return Err(Error::StaleCandidate(id.clone()));
        }
    }
    for (id, d) in &decisions {
        let to = match d {
            Decision::Accept => LabelStatus::Accepted,
            Decision::Reject => LabelStatus::Rejected,
        };
        layer.get_mut(id)?.transition(to)?;
    }
    Ok(decisions)
}

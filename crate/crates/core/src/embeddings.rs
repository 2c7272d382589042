//! Embedding vectors, providers and an exact similarity index.
//!
//! Similarity search uses cosine similarity; diversity sampling uses greedy
//! farthest-point selection in Euclidean distance.

use std::io::{Read, Write};

use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::GeoPoint;
use crate::raster::{CellId, Grid};
use crate::seed;

pub const DEFAULT_DIMENSION: usize = 32;
pub const EMBD_MAGIC: &str = "EMBD";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EmbeddingVector(pub Vec<f64>);

impl EmbeddingVector {
    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn norm(&self) -> f64 {
        self.0.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.0.iter().all(|v| v.is_finite())
    }

    pub fn bits_eq(&self, other: &Self) -> bool {
        self.0.len() == other.0.len()
            && self.0.iter().zip(&other.0).all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

fn check_dims(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: a.dim(),
            got: b.dim(),
        });
    }
    Ok(())
}

pub fn cosine_similarity(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    let (na, nb) = (a.norm(), b.norm());
    if na == 0.0 || nb == 0.0 {
        return Err(Error::ZeroVector);
    }
    let dot: f64 = a.0.iter().zip(&b.0).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

/// Numeric order for scores: `-0.0` and `0.0` tie, so the caller's
/// tie-break decides between them.
pub fn cmp_score(a: f64, b: f64) -> std::cmp::Ordering {
    a.partial_cmp(&b).unwrap_or_else(|| a.total_cmp(&b))
}

pub fn squared_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    check_dims(a, b)?;
    Ok(a.0.iter().zip(&b.0).map(|(x, y)| (x - y) * (x - y)).sum())
}

pub fn euclidean_distance(a: &EmbeddingVector, b: &EmbeddingVector) -> Result<f64> {
    squared_distance(a, b).map(f64::sqrt)
}

/// What a provider can be asked to embed.
#[derive(Debug, Clone, PartialEq)]
pub enum EmbedInput {
    /// A grid cell (patch) at a time-slice index.
    Cell { cell: CellId, slice: usize },
    /// Location-level priors; providers may decline.
    Location(GeoPoint),
}

pub trait EmbeddingProvider: Send + Sync {
    fn name(&self) -> &str;
    fn dimension(&self) -> usize;
    fn slices(&self) -> usize;
    fn embed(&self, input: &EmbedInput) -> Result<EmbeddingVector>;
}

/// Stand-in foundation model over a synthetic scene: each cell embeds to its
/// latent class prototype plus seeded Gaussian noise, independently per slice.
#[derive(Debug, Clone)]
pub struct SyntheticProvider {
    grid: Grid,
    prototypes: Vec<EmbeddingVector>,
    /// Latent scene class per slice, row-major.
    scene: Vec<Vec<u16>>,
    sigma: f64,
    seed: u64,
}

impl SyntheticProvider {
    pub fn new(
        grid: Grid,
        prototypes: Vec<EmbeddingVector>,
        scene: Vec<Vec<u16>>,
        sigma: f64,
        seed: u64,
    ) -> Result<Self> {
        let dim = prototypes.first().map(EmbeddingVector::dim).unwrap_or(0);
        if dim == 0 || prototypes.iter().any(|p| p.dim() != dim) {
            return Err(Error::SpecInvalid("prototypes must share a positive dimension".into()));
        }
        if scene.is_empty() || scene.iter().any(|s| s.len() != grid.len()) {
            return Err(Error::SpecInvalid("scene does not match grid".into()));
        }
        Ok(Self {
            grid,
            prototypes,
            scene,
            sigma,
            seed,
        })
    }

    pub fn grid(&self) -> Grid {
        self.grid
    }
}

impl EmbeddingProvider for SyntheticProvider {
    fn name(&self) -> &str {
        "synthetic-prototype"
    }

    fn dimension(&self) -> usize {
        self.prototypes[0].dim()
    }

    fn slices(&self) -> usize {
        self.scene.len()
    }

    fn embed(&self, input: &EmbedInput) -> Result<EmbeddingVector> {
        let (cell, slice) = match input {
            EmbedInput::Cell { cell, slice } => (*cell, *slice),
            EmbedInput::Location(_) => {
                return Err(Error::UnsupportedInput(
                    "location-level embeddings are not provided by the synthetic model".into(),
                ))
            }
        };
        if !self.grid.contains_cell(cell) || slice >= self.scene.len() {
            return Err(Error::NotFound(format!("cell {cell} slice {slice}")));
        }
        let idx = self.grid.index(cell);
        let proto = &self.prototypes[self.scene[slice][idx] as usize];
        if self.sigma == 0.0 {
            return Ok(proto.clone());
        }
        let mut rng = seed::rng(&[self.seed, 0xe3bd, slice as u64, idx as u64]);
        Ok(EmbeddingVector(
            proto
                .0
                .iter()
                .map(|p| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    p + self.sigma * z
                })
                .collect(),
        ))
    }
}

/// Exact index; items are kept sorted by id so scans visit ids in ascending order.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingIndex {
    dim: usize,
    ids: Vec<String>,
    vectors: Vec<EmbeddingVector>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub id: String,
    pub score: f64,
}

impl EmbeddingIndex {
    pub fn new(dim: usize) -> Self {
        Self {
            dim,
            ids: Vec::new(),
            vectors: Vec::new(),
        }
    }

    pub fn from_items(dim: usize, items: impl IntoIterator<Item = (String, EmbeddingVector)>) -> Result<Self> {
        let mut items: Vec<_> = items.into_iter().collect();
        items.sort_by(|a, b| a.0.cmp(&b.0));
        let mut idx = Self::new(dim);
        for (id, v) in items {
            if idx.ids.last() == Some(&id) {
                return Err(Error::DuplicateId(id));
            }
            idx.check(&v)?;
            idx.ids.push(id);
            idx.vectors.push(v);
        }
        Ok(idx)
    }

    /// Index of one time slice of a provider over every grid cell.
    pub fn from_provider(p: &dyn EmbeddingProvider, grid: &Grid, slice: usize) -> Result<Self> {
        let items = grid
            .cells()
            .map(|c| Ok((c.to_string(), p.embed(&EmbedInput::Cell { cell: c, slice })?)))
            .collect::<Result<Vec<_>>>()?;
        Self::from_items(p.dimension(), items)
    }

    fn check(&self, v: &EmbeddingVector) -> Result<()> {
        if v.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: v.dim(),
            });
        }
        if !v.is_finite() {
            return Err(Error::InvalidParams("non-finite embedding".into()));
        }
        Ok(())
    }

    pub fn insert(&mut self, id: String, v: EmbeddingVector) -> Result<()> {
        self.check(&v)?;
        match self.ids.binary_search(&id) {
            Ok(_) => Err(Error::DuplicateId(id)),
            Err(pos) => {
                self.ids.insert(pos, id);
                self.vectors.insert(pos, v);
                Ok(())
            }
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&EmbeddingVector> {
        self.ids
            .binary_search_by(|probe| probe.as_str().cmp(id))
            .ok()
            .map(|i| &self.vectors[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &EmbeddingVector)> {
        self.ids.iter().map(String::as_str).zip(&self.vectors)
    }

    /// Top-`k` by cosine similarity, ties broken by ascending id.
    pub fn knn(&self, query: &EmbeddingVector, k: usize) -> Result<Vec<Scored>> {
        if k == 0 {
            return Err(Error::KZero);
        }
        if self.is_empty() {
            return Err(Error::EmptyIndex);
        }
        let mut scored = self
            .iter()
            .map(|(id, v)| {
                Ok(Scored {
                    id: id.to_string(),
                    score: cosine_similarity(query, v)?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        // ids are already ascending; a stable sort on score keeps that tie order
        scored.sort_by(|a, b| cmp_score(b.score, a.score));
        scored.truncate(k);
        Ok(scored)
    }

    /// Greedy k-center selection: start from the point farthest from the
    /// mean, then repeatedly add the point farthest from the chosen set.
    pub fn diversity_sample(&self, k: usize) -> Result<Vec<String>> {
        if k == 0 {
            return Err(Error::KZero);
        }
        if k > self.len() {
            return Err(Error::KTooLarge { k, size: self.len() });
        }
        let n = self.len() as f64;
        let mut mean = vec![0.0; self.dim];
        for v in &self.vectors {
            for (m, x) in mean.iter_mut().zip(&v.0) {
                *m += x;
            }
        }
        let mean = EmbeddingVector(mean.into_iter().map(|m| m / n).collect());

        let mut min_dist: Vec<f64> = self
            .vectors
            .iter()
            .map(|v| squared_distance(v, &mean))
            .collect::<Result<_>>()?;
        let mut chosen = vec![false; self.len()];
        let mut picks = Vec::with_capacity(k);
        for round in 0..k {
            let mut best: Option<usize> = None;
            for i in 0..self.len() {
                if chosen[i] {
                    continue;
                }
                if best.is_none_or(|b| min_dist[i] > min_dist[b]) {
                    best = Some(i);
                }
            }
            let b = best.expect("k <= len leaves a candidate");
            chosen[b] = true;
            picks.push(self.ids[b].clone());
            if round == 0 {
                // distances to the mean only seed the first pick
                for (i, v) in self.vectors.iter().enumerate() {
                    min_dist[i] = squared_distance(v, &self.vectors[b])?;
                }
            } else {
                for (i, v) in self.vectors.iter().enumerate() {
                    let d = squared_distance(v, &self.vectors[b])?;
                    if d < min_dist[i] {
                        min_dist[i] = d;
                    }
                }
            }
        }
        Ok(picks)
    }

    /// `embeddings.bin`: JSON header line `{magic, D, count}` followed by
    /// records of (u32-LE id length, id bytes, D little-endian f64).
    pub fn write_embd<W: Write>(&self, mut w: W) -> Result<()> {
        serde_json::to_writer(
            &mut w,
            &serde_json::json!({"magic": EMBD_MAGIC, "D": self.dim, "count": self.len()}),
        )?;
        w.write_all(b"\n")?;
        for (id, v) in self.iter() {
            w.write_all(&(id.len() as u32).to_le_bytes())?;
            w.write_all(id.as_bytes())?;
            for x in &v.0 {
                w.write_all(&x.to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_embd<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Schema("EMBD header not terminated".into()))?;
        #[derive(Deserialize)]
        struct Header {
            magic: String,
            #[serde(rename = "D")]
            dim: usize,
            count: usize,
        }
        let h: Header = serde_json::from_slice(&bytes[..nl])?;
        if h.magic != EMBD_MAGIC {
            return Err(Error::Schema(format!("bad magic `{}`", h.magic)));
        }
        let mut pos = nl + 1;
        let mut take = |n: usize| -> Result<&[u8]> {
            let s = bytes
                .get(pos..pos + n)
                .ok_or_else(|| Error::Schema("EMBD truncated".into()))?;
            pos += n;
            Ok(s)
        };
        let mut items = Vec::with_capacity(h.count);
        for _ in 0..h.count {
            let len = u32::from_le_bytes(take(4)?.try_into().expect("4 bytes")) as usize;
            let id = String::from_utf8(take(len)?.to_vec())
                .map_err(|_| Error::Schema("EMBD id is not utf-8".into()))?;
            let raw = take(h.dim * 8)?;
            let v = raw
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            items.push((id, EmbeddingVector(v)));
        }
        if pos != bytes.len() {
            return Err(Error::Schema("trailing bytes after EMBD records".into()));
        }
        Self::from_items(h.dim, items)
    }
}

//! Dual modeling: a cheap learner fitted on reviewed labels predicts over the
//! whole ROI, and its least certain cells are queued for review.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::embeddings::{euclidean_distance, EmbedInput, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::navigation::{sample_uncertainty, PatchRef};
use crate::raster::{Band, CellId, Grid, GridRaster, DEFAULT_NODATA};
use crate::vector::{HexF64, LabelStatus, VectorLayer};
use crate::workspace::json_digest;

pub trait LightweightModel {
    /// Fits on `(embedding, class)` pairs; the result must not depend on their order.
    fn fit(&mut self, examples: &[(EmbeddingVector, String)]) -> Result<()>;
    fn classes(&self) -> &[String];
    fn predict_proba(&self, x: &EmbeddingVector) -> Result<Vec<f64>>;
}

/// Softmax over negative distances to per-class centroids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NearestCentroidModel {
    pub temperature: f64,
    classes: Vec<String>,
    centroids: Vec<EmbeddingVector>,
}

impl Default for NearestCentroidModel {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl NearestCentroidModel {
    pub fn new(temperature: f64) -> Self {
        Self { temperature, classes: Vec::new(), centroids: Vec::new() }
    }

    pub fn centroids(&self) -> &[EmbeddingVector] {
        &self.centroids
    }
}

fn lex_cmp(a: &EmbeddingVector, b: &EmbeddingVector) -> std::cmp::Ordering {
    a.0.iter()
        .zip(&b.0)
        .map(|(x, y)| x.total_cmp(y))
        .find(|o| o.is_ne())
        .unwrap_or(a.dim().cmp(&b.dim()))
}

impl LightweightModel for NearestCentroidModel {
    fn fit(&mut self, examples: &[(EmbeddingVector, String)]) -> Result<()> {
        let mut by_class: BTreeMap<&str, Vec<&EmbeddingVector>> = BTreeMap::new();
        for (v, c) in examples {
            by_class.entry(c.as_str()).or_default().push(v);
        }
        if by_class.len() < 2 {
            return Err(Error::SingleClass);
        }
        let dim = examples[0].0.dim();
        let mut classes = Vec::new();
        let mut centroids = Vec::new();
        for (c, mut vs) in by_class {
            // a canonical summation order makes the fit permutation-invariant
            vs.sort_by(|a, b| lex_cmp(a, b));
            let mut acc = vec![0.0; dim];
            for v in &vs {
                if v.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: v.dim() });
                }
                for (a, x) in acc.iter_mut().zip(&v.0) {
                    *a += x;
                }
            }
            let n = vs.len() as f64;
            classes.push(c.to_string());
            centroids.push(EmbeddingVector(acc.into_iter().map(|a| a / n).collect()));
        }
        self.classes = classes;
        self.centroids = centroids;
        Ok(())
    }

    fn classes(&self) -> &[String] {
        &self.classes
    }

    fn predict_proba(&self, x: &EmbeddingVector) -> Result<Vec<f64>> {
        if self.centroids.is_empty() {
            return Err(Error::SingleClass);
        }
        let d = self
            .centroids
            .iter()
            .map(|c| euclidean_distance(x, c))
            .collect::<Result<Vec<_>>>()?;
        let dmin = d.iter().cloned().fold(f64::INFINITY, f64::min);
        let w: Vec<f64> = d.iter().map(|di| (-(di - dmin) / self.temperature).exp()).collect();
        let z: f64 = w.iter().sum();
        Ok(w.into_iter().map(|wi| wi / z).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilitySurface {
    /// One band per class, nodata outside the predicted cells.
    pub raster: GridRaster,
    pub training_digest: String,
}

impl ProbabilitySurface {
    /// Class with the highest probability at `cell`, lowest class index on ties.
    pub fn argmax(&self, cell: CellId) -> Option<usize> {
        let i = self.raster.grid().index(cell);
        let v0 = self.raster.bands.first()?.values[i];
        if self.raster.is_nodata(v0) {
            return None;
        }
        let mut best = 0;
        for (k, b) in self.raster.bands.iter().enumerate() {
            if b.values[i] > self.raster.bands[best].values[i] {
                best = k;
            }
        }
        Some(best)
    }

    pub fn max_probability(&self, cell: CellId) -> Option<f64> {
        self.argmax(cell)
            .map(|k| self.raster.bands[k].values[self.raster.grid().index(cell)])
    }
}

/// Digest of a training set independent of example order.
pub fn training_digest(examples: &[(EmbeddingVector, String)]) -> String {
    let mut rows: Vec<(String, Vec<HexF64>)> = examples
        .iter()
        .map(|(v, c)| (c.clone(), v.0.iter().map(|x| HexF64(*x)).collect()))
        .collect();
    rows.sort_by(|a, b| {
        a.0.cmp(&b.0).then_with(|| {
            a.1.iter()
                .zip(&b.1)
                .map(|(x, y)| x.0.total_cmp(&y.0))
                .find(|o| o.is_ne())
                .unwrap_or(std::cmp::Ordering::Equal)
        })
    });
    json_digest(&rows)
}

/// Cells with a nonzero, non-nodata mask value (all cells when no mask).
pub fn mask_cells(grid: &Grid, mask: Option<(&GridRaster, &str)>) -> Result<Vec<bool>> {
    let Some((m, band)) = mask else {
        return Ok(vec![true; grid.len()]);
    };
    if m.grid() != *grid {
        return Err(Error::BandMismatch("mask is not on the prediction grid".into()));
    }
    let b = m.band(band)?;
    Ok(b.values.iter().map(|&v| !m.is_nodata(v) && v != 0.0).collect())
}

/// Fits `model` and predicts every pool cell allowed by the mask.
pub fn fit_and_predict(
    model: &mut dyn LightweightModel,
    examples: &[(EmbeddingVector, String)],
    pool: &[CellId],
    provider: &dyn EmbeddingProvider,
    slice: usize,
    grid: &Grid,
    mask: Option<(&GridRaster, &str)>,
) -> Result<ProbabilitySurface> {
    model.fit(examples)?;
    predict_surface(&*model, pool, provider, slice, grid, mask)
        .map(|raster| ProbabilitySurface { raster, training_digest: training_digest(examples) })
}

/// Probability raster for an already fitted model.
pub fn predict_surface(
    model: &dyn LightweightModel,
    pool: &[CellId],
    provider: &dyn EmbeddingProvider,
    slice: usize,
    grid: &Grid,
    mask: Option<(&GridRaster, &str)>,
) -> Result<GridRaster> {
    let allowed = mask_cells(grid, mask)?;
    let k = model.classes().len();
    let mut bands: Vec<Band> = model
        .classes()
        .iter()
        .map(|c| Band { name: c.clone(), values: vec![DEFAULT_NODATA; grid.len()] })
        .collect();
    let mut any = false;
    for &cell in pool {
        if !grid.contains_cell(cell) {
            return Err(Error::NotFound(format!("cell {cell}")));
        }
        let i = grid.index(cell);
        if !allowed[i] {
            continue;
        }
        let p = model.predict_proba(&provider.embed(&EmbedInput::Cell { cell, slice })?)?;
        for j in 0..k {
            bands[j].values[i] = p[j];
        }
        any = true;
    }
    if !any {
        return Err(Error::EmptyPool);
    }
    GridRaster::from_bands(*grid, bands, DEFAULT_NODATA)
}

/// Reviewed labels (Committed or Accepted, with a cell) as training examples.
pub fn labeled_examples(
    layer: &VectorLayer,
    provider: &dyn EmbeddingProvider,
    slice: usize,
) -> Result<Vec<(CellId, EmbeddingVector, String)>> {
    let mut out = Vec::new();
    for f in layer.iter() {
        if !matches!(f.status, LabelStatus::Committed | LabelStatus::Accepted) {
            continue;
        }
        let (Some(cell), Some(label)) = (f.cell, f.label.as_ref()) else {
            continue;
        };
        out.push((cell, provider.embed(&EmbedInput::Cell { cell, slice })?, label.clone()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LoopState {
    pub iteration: u32,
    pub labeled: Vec<CellId>,
    pub last_surface: Option<String>,
    pub review_queue: Vec<CellId>,
}

pub struct LoopStep {
    pub surface: ProbabilitySurface,
    /// 1 - max class probability; nodata on labeled and masked-out cells.
    pub uncertainty: GridRaster,
    pub review_queue: Vec<PatchRef>,
}

/// One round: fit on reviewed labels, predict the unlabeled pool, and queue
/// the `queue_len` least certain cells.
#[allow(clippy::too_many_arguments)]
pub fn dual_loop_step(
    state: &mut LoopState,
    layer: &VectorLayer,
    provider: &dyn EmbeddingProvider,
    slice: usize,
    grid: &Grid,
    mask: Option<(&GridRaster, &str)>,
    queue_len: usize,
    model: &mut dyn LightweightModel,
) -> Result<LoopStep> {
    let labeled = labeled_examples(layer, provider, slice)?;
    let mut labeled_cells: Vec<CellId> = labeled.iter().map(|(c, _, _)| *c).collect();
    labeled_cells.sort();
    labeled_cells.dedup();
    if labeled_cells.len() < state.labeled.len() {
        return Err(Error::InvalidParams("labeled set shrank between iterations".into()));
    }
    let examples: Vec<_> = labeled.into_iter().map(|(_, v, l)| (v, l)).collect();
    let all: Vec<CellId> = grid.cells().collect();
    let surface = fit_and_predict(model, &examples, &all, provider, slice, grid, mask)?;

    let mut conf = GridRaster::filled(*grid, &["confidence"], DEFAULT_NODATA, DEFAULT_NODATA);
    let mut unc = GridRaster::filled(*grid, &["uncertainty"], DEFAULT_NODATA, DEFAULT_NODATA);
    let is_labeled = {
        let mut v = vec![false; grid.len()];
        for c in &labeled_cells {
            v[grid.index(*c)] = true;
        }
        v
    };
    for cell in grid.cells() {
        let i = grid.index(cell);
        if is_labeled[i] {
            continue;
        }
        if let Some(p) = surface.max_probability(cell) {
            conf.bands[0].values[i] = p;
            unc.bands[0].values[i] = 1.0 - p;
        }
    }
    // the most uncertain cells are the least confident ones
    let queue = if queue_len == 0 {
        Vec::new()
    } else {
        match sample_uncertainty(&conf, queue_len) {
            Ok(q) => q,
            Err(Error::AllNoData) => Vec::new(),
            Err(e) => return Err(e),
        }
    };
    state.iteration += 1;
    state.labeled = labeled_cells;
    state.last_surface = Some(surface.training_digest.clone());
    state.review_queue = queue.iter().map(|p| p.cells[0]).collect();
    Ok(LoopStep { surface, uncertainty: unc, review_queue: queue })
}

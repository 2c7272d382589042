//! Context bundles: which sub-regions, times, zoom and layer views to look at.
//!
//! Zoom is a power-of-two tiling of the reference grid. Level 0 is one tile
//! over the whole grid; each level halves the tile side. Tiles are addressed
//! by their tile row/column formatted like a [`CellId`], so at cell zoom the
//! tile id equals the cell id.

use serde::{Deserialize, Serialize};

use crate::embeddings::{cmp_score, EmbedInput, EmbeddingIndex, EmbeddingProvider, EmbeddingVector};
use crate::error::{Error, Result};
use crate::geometry::BBox;
use crate::raster::{CellId, Grid, GridRaster};
use crate::time::TimeStamp;
use crate::workspace::Workspace;

pub const DEFAULT_LAYER_VIEW: &str = "rgb";

/// Named band combinations a patch can be viewed through.
pub fn layer_view_bands(view: &str) -> Option<&'static [&'static str]> {
    match view {
        "rgb" => Some(&["B4", "B3", "B2"]),
        "false-color" => Some(&["B8", "B4", "B3"]),
        "ndvi" => Some(&["ndvi"]),
        "confidence" => Some(&["confidence"]),
        _ => None,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QueryKind {
    Explore,
    QualityControl,
    Map,
    ChangeDetect,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum SamplingStrategy {
    Diversity { k: usize, slice: usize },
    Uncertainty { k: usize, confidence_layer: String },
    Coverage { stride: u32 },
    TemporalContrast { k: usize, from: usize, to: usize },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PatchRef {
    pub bbox: BBox,
    pub timestamp: TimeStamp,
    pub layer_view: String,
    pub cells: Vec<CellId>,
    pub zoom: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContextBundle {
    pub sub_rois: Vec<BBox>,
    pub time_slices: Vec<TimeStamp>,
    pub zoom_level: u32,
    pub layer_views: Vec<String>,
    pub strategy: SamplingStrategy,
    pub patches: Vec<PatchRef>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NavParams {
    pub zoom: Option<u32>,
    pub layer_view: Option<String>,
    /// Raster layer holding confidences in its first band.
    pub confidence_layer: Option<String>,
    /// Tile side in cells for coverage.
    pub stride: Option<u32>,
    /// Slice indices compared by temporal contrast.
    pub time_pair: Option<(usize, usize)>,
    /// Slice used for diversity sampling.
    pub slice: Option<usize>,
}

/// Read-only inputs for navigation.
pub struct NavContext<'a> {
    pub workspace: &'a Workspace,
    pub provider: Option<&'a dyn EmbeddingProvider>,
}

/// A block of cells at some zoom level.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tile {
    pub id: CellId,
    pub start: CellId,
    pub rows: u32,
    pub cols: u32,
}

impl Tile {
    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.rows).flat_map(move |r| {
            (0..self.cols).map(move |c| CellId::new(self.start.row + r, self.start.col + c))
        })
    }
}

/// Smallest zoom at which tiles are single cells.
pub fn cell_zoom(grid: &Grid) -> u32 {
    let n = grid.width.max(grid.height).max(1);
    n.next_power_of_two().trailing_zeros()
}

fn span_at_zoom(n: u32, z: u32) -> u32 {
    let parts = 1u64 << z.min(40);
    (n as u64).div_ceil(parts).max(1) as u32
}

/// Smallest zoom whose tiles are no larger than `span` cells.
fn zoom_for_span(grid: &Grid, span: u32) -> u32 {
    let n = grid.width.max(grid.height);
    (0..=cell_zoom(grid))
        .find(|&z| span_at_zoom(n, z) <= span)
        .unwrap_or(cell_zoom(grid))
}

/// Non-empty tiles of `rows_span x cols_span` cells in row-major tile order.
pub fn tiles_with_span(grid: &Grid, rows_span: u32, cols_span: u32) -> Vec<Tile> {
    let (rs, cs) = (rows_span.max(1), cols_span.max(1));
    let mut out = Vec::new();
    for tr in 0..grid.height.div_ceil(rs) {
        for tc in 0..grid.width.div_ceil(cs) {
            let start = CellId::new(tr * rs, tc * cs);
            out.push(Tile {
                id: CellId::new(tr, tc),
                start,
                rows: rs.min(grid.height - start.row),
                cols: cs.min(grid.width - start.col),
            });
        }
    }
    out
}

pub fn tiles_at_zoom(grid: &Grid, z: u32) -> Vec<Tile> {
    tiles_with_span(grid, span_at_zoom(grid.height, z), span_at_zoom(grid.width, z))
}

fn patch_for_tile(grid: &Grid, t: &Tile, timestamp: TimeStamp, view: &str, zoom: u32) -> PatchRef {
    PatchRef {
        bbox: grid.block_bbox(t.start, t.rows, t.cols),
        timestamp,
        layer_view: view.to_string(),
        cells: t.cells().collect(),
        zoom,
    }
}

/// Grid of the first raster layer, which all navigation is expressed in.
pub fn reference_grid(ws: &Workspace) -> Result<Grid> {
    ws.rasters.values().next().map(GridRaster::grid).ok_or(Error::NoLayers)
}

/// Distinct raster timestamps in increasing order, or the window start if none.
pub fn time_slices(ws: &Workspace) -> Vec<TimeStamp> {
    let mut ts: Vec<TimeStamp> = ws.rasters.values().filter_map(|r| r.timestamp).collect();
    ts.sort();
    ts.dedup();
    if ts.is_empty() {
        ts.push(ws.time_window.start);
    }
    ts
}

fn tile_mean(p: &dyn EmbeddingProvider, t: &Tile, slice: usize) -> Result<EmbeddingVector> {
    let mut acc = vec![0.0; p.dimension()];
    let mut n = 0.0;
    for cell in t.cells() {
        let v = p.embed(&EmbedInput::Cell { cell, slice })?;
        for (a, x) in acc.iter_mut().zip(&v.0) {
            *a += x;
        }
        n += 1.0;
    }
    Ok(EmbeddingVector(acc.into_iter().map(|a| a / n).collect()))
}

fn need_provider<'a>(ctx: &NavContext<'a>) -> Result<&'a dyn EmbeddingProvider> {
    ctx.provider
        .ok_or_else(|| Error::InvalidParams("strategy needs an embedding provider".into()))
}

fn check_slice(p: &dyn EmbeddingProvider, times: &[TimeStamp], s: usize) -> Result<()> {
    if s >= p.slices() || s >= times.len() {
        return Err(Error::InvalidParams(format!("time slice {s} out of range")));
    }
    Ok(())
}

pub fn build_context(
    kind: QueryKind,
    ctx: &NavContext<'_>,
    patch_budget: usize,
    params: &NavParams,
) -> Result<ContextBundle> {
    if patch_budget == 0 {
        return Err(Error::BudgetZero);
    }
    let grid = reference_grid(ctx.workspace)?;
    let times = time_slices(ctx.workspace);
    let view = params.layer_view.clone().unwrap_or_else(|| DEFAULT_LAYER_VIEW.into());
    if layer_view_bands(&view).is_none() {
        return Err(Error::InvalidParams(format!("unknown layer view `{view}`")));
    }
    let max_zoom = cell_zoom(&grid);
    let zoom = params.zoom.unwrap_or(max_zoom);
    if zoom > max_zoom {
        return Err(Error::InvalidParams(format!("zoom {zoom} finer than cell zoom {max_zoom}")));
    }

    let (strategy, zoom, patches, slices) = match kind {
        QueryKind::Explore => {
            let p = need_provider(ctx)?;
            let slice = params.slice.unwrap_or(0);
            check_slice(p, &times, slice)?;
            let tiles = tiles_at_zoom(&grid, zoom);
            let index = EmbeddingIndex::from_items(
                p.dimension(),
                tiles
                    .iter()
                    .map(|t| Ok((t.id.to_string(), tile_mean(p, t, slice)?)))
                    .collect::<Result<Vec<_>>>()?,
            )?;
            let k = patch_budget.min(index.len());
            let picks = index.diversity_sample(k)?;
            let patches = picks
                .iter()
                .map(|id| {
                    let tid: CellId = id.parse()?;
                    let t = tiles.iter().find(|t| t.id == tid).expect("picked tile exists");
                    Ok(patch_for_tile(&grid, t, times[slice], &view, zoom))
                })
                .collect::<Result<Vec<_>>>()?;
            (SamplingStrategy::Diversity { k, slice }, zoom, patches, vec![times[slice]])
        }
        QueryKind::QualityControl => {
            let layer = params
                .confidence_layer
                .clone()
                .ok_or_else(|| Error::InvalidParams("quality control needs confidence_layer".into()))?;
            let conf = ctx.workspace.raster(&layer)?;
            let mut patches = sample_uncertainty(conf, patch_budget)?;
            for p in &mut patches {
                p.layer_view = view.clone();
            }
            let t = vec![conf.timestamp.unwrap_or(ctx.workspace.time_window.start)];
            let k = patches.len();
            (
                SamplingStrategy::Uncertainty { k, confidence_layer: layer },
                cell_zoom(&conf.grid()),
                patches,
                t,
            )
        }
        QueryKind::Map => {
            let stride = match params.stride {
                Some(0) => return Err(Error::InvalidParams("stride must be >= 1".into())),
                Some(s) => s,
                None => (1..=grid.width.max(grid.height).max(1))
                    .find(|&s| (grid.width.div_ceil(s) as usize) * (grid.height.div_ceil(s) as usize) <= patch_budget)
                    .unwrap_or(grid.width.max(grid.height)),
            };
            let z = zoom_for_span(&grid, stride);
            let t = *times.last().expect("at least one slice");
            let patches = tiles_with_span(&grid, stride, stride)
                .iter()
                .take(patch_budget)
                .map(|tile| patch_for_tile(&grid, tile, t, &view, z))
                .collect();
            (SamplingStrategy::Coverage { stride }, z, patches, vec![t])
        }
        QueryKind::ChangeDetect => {
            let p = need_provider(ctx)?;
            let last = p.slices().min(times.len()).saturating_sub(1);
            let (from, to) = params.time_pair.unwrap_or((0, last));
            check_slice(p, &times, from)?;
            check_slice(p, &times, to)?;
            let tiles = tiles_at_zoom(&grid, zoom);
            let mut scored = tiles
                .iter()
                .map(|t| {
                    let a = tile_mean(p, t, from)?;
                    let b = tile_mean(p, t, to)?;
                    Ok((crate::embeddings::euclidean_distance(&a, &b)?, t))
                })
                .collect::<Result<Vec<_>>>()?;
            // stable sort keeps row-major order among equal scores
            scored.sort_by(|a, b| cmp_score(b.0, a.0));
            let patches: Vec<_> = scored
                .iter()
                .take(patch_budget)
                .map(|(_, t)| patch_for_tile(&grid, t, times[to], &view, zoom))
                .collect();
            let k = patches.len();
            (
                SamplingStrategy::TemporalContrast { k, from, to },
                zoom,
                patches,
                vec![times[from], times[to]],
            )
        }
    };

    Ok(ContextBundle {
        sub_rois: vec![grid.extent()],
        time_slices: slices,
        zoom_level: zoom,
        layer_views: vec![view],
        strategy,
        patches,
    })
}

/// Single-cell patches at the lowest-confidence cells of the first band,
/// ties by (row, col); nodata cells are skipped.
pub fn sample_uncertainty(conf: &GridRaster, patch_budget: usize) -> Result<Vec<PatchRef>> {
    if patch_budget == 0 {
        return Err(Error::BudgetZero);
    }
    let band = conf
        .bands
        .first()
        .ok_or_else(|| Error::BandMismatch("confidence map has no bands".into()))?;
    let grid = conf.grid();
    let mut cand = Vec::new();
    for (i, &v) in band.values.iter().enumerate() {
        if conf.is_nodata(v) {
            continue;
        }
        if !(0.0..=1.0).contains(&v) {
            return Err(Error::InvalidParams(format!("confidence {v} outside [0,1]")));
        }
        cand.push((v, i));
    }
    if cand.is_empty() {
        return Err(Error::AllNoData);
    }
    cand.sort_by(|a, b| cmp_score(a.0, b.0).then(a.1.cmp(&b.1)));
    let zoom = cell_zoom(&grid);
    let t = conf.timestamp.unwrap_or(TimeStamp(0));
    Ok(cand
        .into_iter()
        .take(patch_budget)
        .map(|(_, i)| {
            let c = grid.cell_at_index(i);
            PatchRef {
                bbox: grid.cell_bbox(c),
                timestamp: t,
                layer_view: "confidence".into(),
                cells: vec![c],
                zoom,
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::GeoPoint;
    use crate::raster::DEFAULT_NODATA;

    fn grid(w: u32, h: u32) -> Grid {
        Grid { origin: GeoPoint::new(0., 0.), cell_size: 10.0, width: w, height: h }
    }

    #[test]
    fn tiling_covers_each_cell_once() {
        for (w, h) in [(16, 16), (10, 7), (1, 1), (33, 5)] {
            let g = grid(w, h);
            for z in 0..=cell_zoom(&g) {
                let mut seen = vec![0u32; g.len()];
                for t in tiles_at_zoom(&g, z) {
                    assert!(t.rows > 0 && t.cols > 0);
                    for c in t.cells() {
                        seen[g.index(c)] += 1;
                    }
                }
                assert!(seen.iter().all(|&n| n == 1), "{w}x{h} z{z}");
            }
            assert_eq!(tiles_at_zoom(&g, cell_zoom(&g)).len(), g.len());
            assert_eq!(tiles_at_zoom(&g, 0).len(), 1);
        }
    }

    fn conf(values: Vec<f64>, w: u32, h: u32) -> GridRaster {
        let mut r = GridRaster::filled(grid(w, h), &["confidence"], 0.0, DEFAULT_NODATA);
        r.bands[0].values = values;
        r
    }

    #[test]
    fn uncertainty_uniform_is_row_major() {
        let r = conf(vec![0.5; 12], 4, 3);
        let p = sample_uncertainty(&r, 5).unwrap();
        let cells: Vec<_> = p.iter().map(|p| p.cells[0]).collect();
        let expect: Vec<_> = grid(4, 3).cells().take(5).collect();
        assert_eq!(cells, expect);
    }

    #[test]
    fn uncertainty_single_low_cell_and_nodata() {
        let mut v = vec![0.9; 12];
        v[7] = 0.01;
        v[2] = DEFAULT_NODATA;
        let p = sample_uncertainty(&conf(v, 4, 3), 1).unwrap();
        assert_eq!(p[0].cells, vec![CellId::new(1, 3)]);
        assert_eq!(sample_uncertainty(&conf(vec![DEFAULT_NODATA; 4], 2, 2), 3), Err(Error::AllNoData));
        assert_eq!(sample_uncertainty(&conf(vec![0.5; 4], 2, 2), 0), Err(Error::BudgetZero));
        // fewer valid cells than the budget
        let mut v = vec![DEFAULT_NODATA; 4];
        v[3] = 0.2;
        assert_eq!(sample_uncertainty(&conf(v, 2, 2), 3).unwrap().len(), 1);
    }
}

//! Layer payloads: vectors as GeoJSON, rasters as base64 GRIDR tiles.

use agency_core::raster::{Band, GridRaster};
use agency_core::workspace::Workspace;
use agency_core::{Error, Result};
use base64::Engine;
use serde_json::{json, Value};

/// Longest tile side in cells.
pub const MAX_TILE: u32 = 256;

/// Nearest-cell downsampling by a whole stride so neither side exceeds
/// [`MAX_TILE`]. Returns the stride used.
pub fn downsample(r: &GridRaster, band: Option<&str>) -> Result<(GridRaster, u32)> {
    let stride = r.width.max(r.height).div_ceil(MAX_TILE).max(1);
    let bands: Vec<&Band> = match band {
        Some(b) => vec![r.band(b)?],
        None => r.bands.iter().collect(),
    };
    let w = r.width.div_ceil(stride);
    let h = r.height.div_ceil(stride);
    let mut grid = r.grid();
    grid.width = w;
    grid.height = h;
    grid.cell_size *= stride as f64;
    let picked = bands
        .into_iter()
        .map(|b| Band {
            name: b.name.clone(),
            values: (0..h)
                .flat_map(|row| (0..w).map(move |col| (row * stride, col * stride)))
                .map(|(row, col)| b.values[(row * r.width + col) as usize])
                .collect(),
        })
        .collect();
    let mut out = GridRaster::from_bands(grid, picked, r.nodata)?;
    out.timestamp = r.timestamp;
    Ok((out, stride))
}

pub fn layer_payload(ws: &Workspace, name: &str, band: Option<&str>) -> Result<Value> {
    if let Ok(v) = ws.vector(name) {
        if band.is_some() {
            return Err(Error::InvalidParams(format!("`{name}` is a vector layer and has no bands")));
        }
        return Ok(v.to_geojson());
    }
    let r = ws.raster(name)?;
    let (tile, stride) = downsample(r, band)?;
    let bytes = tile.to_gridr_bytes()?;
    Ok(json!({
        "type": "raster",
        "name": name,
        "format": "gridr",
        "encoding": "base64",
        "stride": stride,
        "width": tile.width,
        "height": tile.height,
        "data": base64::engine::general_purpose::STANDARD.encode(bytes),
    }))
}

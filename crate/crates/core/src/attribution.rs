//! Evidence attributes for a geometry.
//!
//! Keys are namespaced: `shape.*` for geometry metrics, `computed.*` for
//! values derived from workspace rasters and `ext.<source>.<field>` for
//! external sources. External sources are fixture-backed: a JSON file
//! `{"source": name, "entries": {<geometry key>: {<field>: AttributeValue}}}`
//! where the geometry key is [`geometry_key`] of the feature's polygon.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{compactness, polygon_area, Polygon};
use crate::graph::op_zonal_stats;
use crate::raster::GridRaster;
use crate::time::{TimeStamp, TimeWindow};
use crate::vector::{AttributeValue, Feature};
use crate::workspace::{json_digest, Workspace};

/// What to compute for a feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum AttributeKind {
    ShapeArea,
    ShapePerimeter,
    ShapeCompactness,
    /// Zonal mean of `band` in raster `layer`, stored as `computed.<band>_mean`.
    ZonalMean { layer: String, band: String },
    /// Per-date zonal means, stored as `computed.<band>_series`.
    Series { layers: Vec<String>, band: String },
    /// Every field a source knows about this geometry.
    External { source: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttributionRequest {
    pub layer: String,
    pub feature_id: String,
    pub kinds: Vec<AttributeKind>,
}

pub trait ExternalSource: Send + Sync {
    fn name(&self) -> &str;
    fn lookup(&self, geometry: &Polygon, window: &TimeWindow) -> Result<BTreeMap<String, AttributeValue>>;
}

/// Stable key for a polygon, used to address fixture entries.
pub fn geometry_key(p: &Polygon) -> String {
    json_digest(p)[..16].to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FixtureSource {
    pub source: String,
    pub entries: BTreeMap<String, BTreeMap<String, AttributeValue>>,
}

impl FixtureSource {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(serde_json::from_str(&text)?)
    }

    /// Loads every `*.json` fixture in a directory, keyed by source name.
    pub fn load_dir(dir: &Path) -> Result<BTreeMap<String, FixtureSource>> {
        let mut out = BTreeMap::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|e| e == "json"))
            .collect();
        paths.sort();
        for p in paths {
            let f = Self::load(&p)?;
            out.insert(f.source.clone(), f);
        }
        Ok(out)
    }
}

impl ExternalSource for FixtureSource {
    fn name(&self) -> &str {
        &self.source
    }

    fn lookup(&self, geometry: &Polygon, _window: &TimeWindow) -> Result<BTreeMap<String, AttributeValue>> {
        let key = geometry_key(geometry);
        self.entries.get(&key).cloned().ok_or(Error::FixtureMiss {
            source_name: self.source.clone(),
            key,
        })
    }
}

/// Zonal mean per raster of a time-ordered stack.
pub fn extract_time_series(stack: &[&GridRaster], band: &str, polygon: &Polygon) -> Result<Vec<(TimeStamp, f64)>> {
    if stack.len() < 2 {
        return Err(Error::UnsortedStack);
    }
    let grid = stack[0].grid();
    let mut out: Vec<(TimeStamp, f64)> = Vec::with_capacity(stack.len());
    for r in stack {
        if r.grid() != grid {
            return Err(Error::BandMismatch("stack rasters are on different grids".into()));
        }
        let t = r.timestamp.ok_or(Error::UnsortedStack)?;
        if out.last().is_some_and(|(prev, _)| *prev >= t) {
            return Err(Error::UnsortedStack);
        }
        out.push((t, op_zonal_stats(r, band, polygon)?.mean));
    }
    Ok(out)
}

/// Computes the requested attributes for one geometry.
pub fn compute_attributes(
    ws: &Workspace,
    geometry: &Polygon,
    kinds: &[AttributeKind],
    sources: &BTreeMap<String, Box<dyn ExternalSource>>,
) -> Result<BTreeMap<String, AttributeValue>> {
    let raster = |name: &str| {
        ws.rasters
            .get(name)
            .ok_or_else(|| Error::MissingSourceLayer(name.to_string()))
    };
    let mut out = BTreeMap::new();
    for k in kinds {
        match k {
            AttributeKind::ShapeArea => {
                out.insert("shape.area".into(), AttributeValue::number(polygon_area(geometry)?, Some("m2")));
            }
            AttributeKind::ShapePerimeter => {
                out.insert("shape.perimeter".into(), AttributeValue::number(geometry.perimeter(), Some("m")));
            }
            AttributeKind::ShapeCompactness => {
                out.insert("shape.compactness".into(), AttributeValue::number(compactness(geometry)?, None));
            }
            AttributeKind::ZonalMean { layer, band } => {
                let s = op_zonal_stats(raster(layer)?, band, geometry)?;
                out.insert(format!("computed.{band}_mean"), AttributeValue::number(s.mean, None));
            }
            AttributeKind::Series { layers, band } => {
                let stack = layers.iter().map(|l| raster(l)).collect::<Result<Vec<_>>>()?;
                let series = extract_time_series(&stack, band, geometry)?;
                out.insert(format!("computed.{band}_series"), AttributeValue::series(band, &series)?);
            }
            AttributeKind::External { source } => {
                let s = sources
                    .get(source)
                    .ok_or_else(|| Error::MissingSourceLayer(format!("ext.{source}")))?;
                for (field, v) in s.lookup(geometry, &ws.time_window)? {
                    out.insert(format!("ext.{source}.{field}"), v);
                }
            }
        }
    }
    Ok(out)
}

/// Merges computed attributes into a feature; nothing else on it changes.
/// Either every attribute is attached or the feature is left untouched.
pub fn attach_attributes(
    ws: &mut Workspace,
    req: &AttributionRequest,
    sources: &BTreeMap<String, Box<dyn ExternalSource>>,
) -> Result<Feature> {
    let geometry = ws.vector(&req.layer)?.get(&req.feature_id)?.geometry.clone();
    let attrs = compute_attributes(ws, &geometry, &req.kinds, sources)?;
    let f = ws.vector_mut(&req.layer)?.get_mut(&req.feature_id)?;
    f.attributes.extend(attrs);
    Ok(f.clone())
}

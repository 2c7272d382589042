//! Synthetic worlds: a Voronoi class map, per-class embedding prototypes,
//! phenology-driven imagery and sealed reference labels.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicU64, Ordering};

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attribution::{geometry_key, FixtureSource};
use crate::embeddings::{cosine_similarity, EmbeddingVector, SyntheticProvider};
use crate::error::{Error, Result};
use crate::geometry::{GeoPoint, Polygon};
use crate::perception::SceneTruth;
use crate::raster::{Band, CellId, Grid, GridRaster, DEFAULT_NODATA};
use crate::seed;
use crate::time::{TimeStamp, TimeWindow};
use crate::vector::{AttributeValue, Feature, LabelOrigin, LabelStatus, VectorLayer};
use crate::workspace::{json_digest, Workspace};

pub const DAY: i64 = 86_400;
pub const LABELS_LAYER: &str = "labels";
pub const BUILDINGS_LAYER: &str = "buildings";
pub const CROPLAND_LAYER: &str = "cropland";

/// Quadrants of the grid: 0 south-west, 1 south-east, 2 north-west, 3 north-east.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Alteration {
    pub quadrant: u8,
    pub to_class: String,
    /// Only these classes change; all others when empty.
    #[serde(default)]
    pub from_classes: Vec<String>,
    pub from_slice: usize,
    /// The target class appears only through the alteration, never in the
    /// base map.
    #[serde(default)]
    pub exclusive: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldSpec {
    pub width: u32,
    pub height: u32,
    pub cell_size: f64,
    pub classes: Vec<String>,
    pub voronoi_sites: usize,
    pub dimension: usize,
    pub sigma: f64,
    pub slices: usize,
    pub slice_interval_days: i64,
    pub alteration: Option<Alteration>,
    /// Classes forming the cropland mask layer; no mask when empty.
    pub cropland: Vec<String>,
    /// Number of 2x2-cell building footprints placed on `building_class` cells.
    pub buildings: usize,
    pub building_class: String,
}

impl Default for WorldSpec {
    fn default() -> Self {
        Self {
            width: 32,
            height: 32,
            cell_size: 10.0,
            classes: ["maize", "other-crop", "forest", "urban"].map(String::from).to_vec(),
            voronoi_sites: 24,
            dimension: 32,
            sigma: 0.1,
            slices: 6,
            slice_interval_days: 16,
            alteration: None,
            cropland: vec!["maize".into(), "other-crop".into()],
            buildings: 0,
            building_class: "urban".into(),
        }
    }
}

impl WorldSpec {
    pub fn grid(&self) -> Grid {
        Grid { origin: GeoPoint::new(0.0, 0.0), cell_size: self.cell_size, width: self.width, height: self.height }
    }

    pub fn class_index(&self, name: &str) -> Result<usize> {
        self.classes
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::SpecInvalid(format!("unknown class `{name}`")))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::SpecInvalid(m.to_string()));
        if self.width == 0 || self.height == 0 || !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return bad("grid must be non-empty with a positive cell size");
        }
        if self.classes.len() < 2 || self.classes.len() > u16::MAX as usize {
            return bad("need at least two classes");
        }
        let mut names = self.classes.clone();
        names.sort();
        names.dedup();
        if names.len() != self.classes.len() || names.iter().any(|n| n.is_empty()) {
            return bad("class names must be unique and non-empty");
        }
        if self.voronoi_sites < self.classes.len() {
            return bad("need at least one Voronoi site per class");
        }
        if self.dimension < 2 {
            return bad("embedding dimension must be at least 2");
        }
        if !(self.sigma >= 0.0 && self.sigma.is_finite()) {
            return bad("noise must be finite and non-negative");
        }
        if self.slices == 0 || self.slice_interval_days <= 0 {
            return bad("need at least one time slice and a positive interval");
        }
        for c in &self.cropland {
            self.class_index(c)?;
        }
        if let Some(a) = &self.alteration {
            if a.quadrant > 3 || a.from_slice >= self.slices {
                return bad("alteration quadrant or slice out of range");
            }
            self.class_index(&a.to_class)?;
            for c in &a.from_classes {
                self.class_index(c)?;
            }
        }
        if self.buildings > 0 {
            self.class_index(&self.building_class)?;
        }
        Ok(())
    }

    pub fn slice_time(&self, i: usize) -> TimeStamp {
        TimeStamp(i as i64 * self.slice_interval_days * DAY)
    }
}

/// Smooth seasonal NDVI curve for a class: `base + amp * exp(-((day - peak) / width)^2)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Phenology {
    pub base: f64,
    pub amp: f64,
    pub peak_day: f64,
    pub width_days: f64,
}

impl Phenology {
    pub fn for_class(name: &str, index: usize) -> Self {
        let p = |base, amp, peak_day, width_days| Phenology { base, amp, peak_day, width_days };
        match name {
            "maize" => p(0.15, 0.7, 72.0, 22.0),
            "other-crop" => p(0.15, 0.55, 32.0, 18.0),
            "forest" => p(0.7, 0.1, 50.0, 60.0),
            "grassland" => p(0.3, 0.3, 24.0, 30.0),
            "urban" => p(0.1, 0.02, 40.0, 40.0),
            "water" => p(-0.3, 0.0, 0.0, 1.0),
            "damaged" | "bare" => p(0.02, 0.0, 0.0, 1.0),
            _ => p(0.2, 0.3 + 0.05 * (index % 4) as f64, 20.0 + 12.0 * index as f64, 25.0),
        }
    }

    pub fn ndvi(&self, day: f64) -> f64 {
        let z = (day - self.peak_day) / self.width_days;
        self.base + self.amp * (-z * z).exp()
    }
}

/// Reference labels only the evaluator may open. Every read is counted.
#[derive(Debug)]
pub struct SealedReference {
    classes: Vec<u16>,
    class_names: Vec<String>,
    reads: AtomicU64,
}

/// Capability to read a [`SealedReference`]; only the evaluator can mint one.
pub struct EvaluatorKey(());

impl EvaluatorKey {
    pub(crate) fn new() -> Self {
        EvaluatorKey(())
    }
}

impl SealedReference {
    pub fn new(classes: Vec<u16>, class_names: Vec<String>) -> Self {
        Self { classes, class_names, reads: AtomicU64::new(0) }
    }

    pub fn reads(&self) -> u64 {
        self.reads.load(Ordering::Relaxed)
    }

    /// True class name per cell, row-major.
    pub fn open(&self, _key: &EvaluatorKey) -> Vec<&str> {
        self.reads.fetch_add(1, Ordering::Relaxed);
        self.classes.iter().map(|&c| self.class_names[c as usize].as_str()).collect()
    }

    pub fn len(&self) -> usize {
        self.classes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.classes.is_empty()
    }
}

impl Clone for SealedReference {
    fn clone(&self) -> Self {
        Self::new(self.classes.clone(), self.class_names.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub id: String,
    pub footprint: Polygon,
    pub cells: Vec<CellId>,
}

pub struct World {
    pub spec: WorldSpec,
    pub seed: u64,
    pub grid: Grid,
    pub prototypes: Vec<EmbeddingVector>,
    /// Latent scene per slice; drives imagery, embeddings and mock perception.
    pub scene: SceneTruth,
    pub provider: SyntheticProvider,
    pub workspace: Workspace,
    pub buildings: Vec<Building>,
    pub ext_sources: BTreeMap<String, FixtureSource>,
}

impl World {
    pub fn last_slice(&self) -> usize {
        self.scene.slices.len() - 1
    }

    /// Class index per cell at the final slice.
    pub fn final_classes(&self) -> &[u16] {
        &self.scene.slices[self.last_slice()].1
    }

    /// Reference labels for a task evaluated at the final slice.
    pub fn seal_reference(&self) -> SealedReference {
        SealedReference::new(self.final_classes().to_vec(), self.spec.classes.clone())
    }

    /// Digest over everything generated, for determinism checks.
    pub fn digest(&self) -> String {
        json_digest(&serde_json::json!({
            "prototypes": self.prototypes,
            "scene": self.scene.slices,
            "rasters": self.workspace.rasters.iter()
                .map(|(k, r)| (k.clone(), r.to_gridr_bytes().map(|b| crate::workspace::digest_hex(&b)).unwrap_or_default()))
                .collect::<BTreeMap<_, _>>(),
            "buildings": self.buildings,
        }))
    }
}

fn random_unit(rng: &mut impl Rng, d: usize) -> EmbeddingVector {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return EmbeddingVector(v.into_iter().map(|x| x / n).collect());
        }
    }
}

fn prototypes(spec: &WorldSpec, seed: u64) -> Result<Vec<EmbeddingVector>> {
    let mut rng = seed::rng(&[seed, 0x9307]);
    let mut out: Vec<EmbeddingVector> = Vec::new();
    let mut attempts = 0;
    while out.len() < spec.classes.len() {
        attempts += 1;
        if attempts > 100_000 {
            return Err(Error::SpecInvalid("cannot separate prototypes in this dimension".into()));
        }
        let v = random_unit(&mut rng, spec.dimension);
        let ok = out.iter().all(|p| cosine_similarity(p, &v).map(|c| c < 0.5).unwrap_or(false));
        if ok {
            out.push(v);
        }
    }
    Ok(out)
}

fn voronoi(spec: &WorldSpec, grid: &Grid, seed: u64) -> Vec<u16> {
    let mut rng = seed::rng(&[seed, 0x7e55]);
    let excluded = spec.alteration.as_ref().filter(|a| a.exclusive).map(|a| a.to_class.as_str());
    let pool: Vec<u16> = (0..spec.classes.len() as u16)
        .filter(|&c| Some(spec.classes[c as usize].as_str()) != excluded)
        .collect();
    let ext = grid.extent();
    let sites: Vec<(GeoPoint, u16)> = (0..spec.voronoi_sites)
        .map(|i| {
            let p = GeoPoint::new(
                rng.random_range(ext.min_x..ext.max_x),
                rng.random_range(ext.min_y..ext.max_y),
            );
            (p, pool[i % pool.len()])
        })
        .collect();
    grid.cells()
        .map(|c| {
            let center = grid.cell_center(c);
            let mut best = (f64::INFINITY, 0u16);
            for (p, class) in &sites {
                let d = center.distance(p);
                if d < best.0 {
                    best = (d, *class);
                }
            }
            best.1
        })
        .collect()
}

fn in_quadrant(grid: &Grid, c: CellId, q: u8) -> bool {
    let east = c.col >= grid.width / 2;
    let north = c.row >= grid.height / 2;
    match q {
        0 => !east && !north,
        1 => east && !north,
        2 => !east && north,
        _ => east && north,
    }
}

pub fn generate_world(spec: &WorldSpec, seed: u64) -> Result<World> {
    spec.validate()?;
    let grid = spec.grid();
    let protos = prototypes(spec, seed)?;
    let base = voronoi(spec, &grid, seed);

    let mut slices = Vec::with_capacity(spec.slices);
    for i in 0..spec.slices {
        let mut map = base.clone();
        if let Some(a) = spec.alteration.as_ref().filter(|a| i >= a.from_slice) {
            let to = spec.class_index(&a.to_class)? as u16;
            let from: Vec<u16> = a
                .from_classes
                .iter()
                .map(|c| spec.class_index(c).map(|x| x as u16))
                .collect::<Result<_>>()?;
            for (idx, class) in map.iter_mut().enumerate() {
                let c = grid.cell_at_index(idx);
                if in_quadrant(&grid, c, a.quadrant) && (from.is_empty() || from.contains(class)) {
                    *class = to;
                }
            }
        }
        slices.push((spec.slice_time(i), map));
    }
    let scene = SceneTruth { grid, class_names: spec.classes.clone(), slices };

    let provider = SyntheticProvider::new(
        grid,
        protos.clone(),
        scene.slices.iter().map(|(_, m)| m.clone()).collect(),
        spec.sigma,
        seed,
    )?;

    let end = spec.slice_time(spec.slices - 1);
    let roi = grid.extent().to_polygon();
    let mut ws = Workspace::new(roi, TimeWindow::new(TimeStamp(0), end)?, seed)?;
    let phen: Vec<Phenology> = spec.classes.iter().enumerate().map(|(i, c)| Phenology::for_class(c, i)).collect();
    for (i, (t, map)) in scene.slices.iter().enumerate() {
        let day = (t.0 / DAY) as f64;
        let mut rng = seed::rng(&[seed, 0x1da7, i as u64]);
        let mut bands: Vec<Band> = ["B2", "B3", "B4", "B8"]
            .iter()
            .map(|n| Band { name: n.to_string(), values: Vec::with_capacity(grid.len()) })
            .collect();
        for class in map {
            let z: f64 = StandardNormal.sample(&mut rng);
            let ndvi = (phen[*class as usize].ndvi(day) + 0.02 * z).clamp(-0.95, 0.95);
            let s = 0.3;
            let red = s * (1.0 - ndvi) / 2.0;
            let nir = s * (1.0 + ndvi) / 2.0;
            bands[0].values.push(0.5 * red + 0.02);
            bands[1].values.push(0.6 * red + 0.03);
            bands[2].values.push(red);
            bands[3].values.push(nir);
        }
        ws.add_raster(format!("s2/t{i}"), GridRaster::from_bands(grid, bands, DEFAULT_NODATA)?.with_timestamp(*t))?;
    }
    if !spec.cropland.is_empty() {
        let crop: Vec<u16> = spec.cropland.iter().map(|c| spec.class_index(c).map(|x| x as u16)).collect::<Result<_>>()?;
        let last = &scene.slices[scene.slices.len() - 1].1;
        let values = last.iter().map(|c| if crop.contains(c) { 1.0 } else { 0.0 }).collect();
        ws.add_raster(
            CROPLAND_LAYER,
            GridRaster::from_bands(grid, vec![Band { name: "mask".into(), values }], DEFAULT_NODATA)?,
        )?;
    }
    ws.add_vector(VectorLayer::new(LABELS_LAYER))?;

    let buildings = place_buildings(spec, &grid, &scene.slices[0].1, seed)?;
    let mut ext_sources = BTreeMap::new();
    if !buildings.is_empty() {
        let mut layer = VectorLayer::new(BUILDINGS_LAYER);
        let mut osm = FixtureSource { source: "osm".into(), entries: BTreeMap::new() };
        let mut rng = seed::rng(&[seed, 0xb01d]);
        for b in &buildings {
            layer.insert(Feature {
                id: b.id.clone(),
                geometry: b.footprint.clone(),
                attributes: BTreeMap::new(),
                label: Some("building".into()),
                label_origin: LabelOrigin::Manual,
                status: LabelStatus::Committed,
                cell: None,
            })?;
            let levels = rng.random_range(1..=4);
            let mut fields = BTreeMap::new();
            fields.insert(
                "tags".to_string(),
                AttributeValue::Category { tags: vec!["building=yes".into(), format!("building:levels={levels}")] },
            );
            osm.entries.insert(geometry_key(&b.footprint), fields);
        }
        ws.add_vector(layer)?;
        ext_sources.insert("osm".to_string(), osm);
    }

    Ok(World { spec: spec.clone(), seed, grid, prototypes: protos, scene, provider, workspace: ws, buildings, ext_sources })
}

fn place_buildings(spec: &WorldSpec, grid: &Grid, classes: &[u16], seed: u64) -> Result<Vec<Building>> {
    if spec.buildings == 0 {
        return Ok(Vec::new());
    }
    let target = spec.class_index(&spec.building_class)? as u16;
    let mut anchors: Vec<CellId> = grid
        .cells()
        .filter(|c| c.row + 1 < grid.height && c.col + 1 < grid.width)
        .filter(|c| {
            (0..2).all(|dr| (0..2).all(|dc| classes[grid.index(CellId::new(c.row + dr, c.col + dc))] == target))
        })
        .collect();
    // seeded Fisher-Yates so placement does not favor the south-west
    let mut rng = seed::rng(&[seed, 0xb1d6]);
    for i in (1..anchors.len()).rev() {
        let j = rng.random_range(0..=i);
        anchors.swap(i, j);
    }
    let mut taken = vec![false; grid.len()];
    let mut out = Vec::new();
    for a in anchors {
        if out.len() == spec.buildings {
            break;
        }
        let cells: Vec<CellId> = (0..2)
            .flat_map(|dr| (0..2).map(move |dc| CellId::new(a.row + dr, a.col + dc)))
            .collect();
        // keep a one-cell gap so footprints never touch
        let blocked = (a.row.saturating_sub(1)..=(a.row + 2).min(grid.height - 1)).any(|r| {
            (a.col.saturating_sub(1)..=(a.col + 2).min(grid.width - 1)).any(|c| taken[grid.index(CellId::new(r, c))])
        });
        if blocked {
            continue;
        }
        for c in &cells {
            taken[grid.index(*c)] = true;
        }
        let b = grid.block_bbox(a, 2, 2);
        // inset so neighboring cells' centers stay outside
        let inset = spec.cell_size * 0.1;
        let footprint = Polygon::new(
            vec![
                GeoPoint::new(b.min_x + inset, b.min_y + inset),
                GeoPoint::new(b.max_x - inset, b.min_y + inset),
                GeoPoint::new(b.max_x - inset, b.max_y - inset),
                GeoPoint::new(b.min_x + inset, b.max_y - inset),
            ],
            vec![],
        )?;
        out.push(Building { id: format!("b{:04}", out.len()), footprint, cells });
    }
    out.sort_by(|a, b| a.id.cmp(&b.id));
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::embeddings::{EmbedInput, EmbeddingProvider};

    #[test]
    fn noiseless_embeddings_equal_prototypes() {
        let spec = WorldSpec { sigma: 0.0, ..WorldSpec::default() };
        let w = generate_world(&spec, 3).unwrap();
        for c in w.grid.cells().step_by(37) {
            let e = w.provider.embed(&EmbedInput::Cell { cell: c, slice: 0 }).unwrap();
            assert_eq!(e, w.prototypes[w.scene.slices[0].1[w.grid.index(c)] as usize]);
        }
    }

    #[test]
    fn same_seed_same_world() {
        let spec = WorldSpec::default();
        assert_eq!(generate_world(&spec, 11).unwrap().digest(), generate_world(&spec, 11).unwrap().digest());
        assert_ne!(generate_world(&spec, 11).unwrap().digest(), generate_world(&spec, 12).unwrap().digest());
    }

    #[test]
    fn prototypes_are_separated() {
        let w = generate_world(&WorldSpec { classes: (0..8).map(|i| format!("c{i}")).collect(), cropland: vec![], ..WorldSpec::default() }, 5).unwrap();
        for i in 0..8 {
            for j in 0..i {
                assert!(cosine_similarity(&w.prototypes[i], &w.prototypes[j]).unwrap() < 0.5);
            }
        }
    }

    #[test]
    fn invalid_specs_rejected() {
        let one = WorldSpec { classes: vec!["a".into()], cropland: vec![], ..WorldSpec::default() };
        assert!(matches!(generate_world(&one, 1), Err(Error::SpecInvalid(_))));
        let dup = WorldSpec { classes: vec!["a".into(), "a".into()], cropland: vec![], ..WorldSpec::default() };
        assert!(matches!(generate_world(&dup, 1), Err(Error::SpecInvalid(_))));
    }

    #[test]
    fn buildings_do_not_touch() {
        let spec = WorldSpec { buildings: 12, ..WorldSpec::default() };
        let w = generate_world(&spec, 4).unwrap();
        assert!(!w.buildings.is_empty());
        for (i, a) in w.buildings.iter().enumerate() {
            for b in &w.buildings[..i] {
                assert!(!crate::geometry::polygons_intersect(&a.footprint, &b.footprint));
            }
            assert_eq!(w.grid.cells_in_polygon(&a.footprint), a.cells);
        }
    }
}

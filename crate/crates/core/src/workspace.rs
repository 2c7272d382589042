//! Workspace state, artifact provenance and the on-disk bundle.
//!
//! A bundle is a directory:
//!
//! ```text
//! workspace.json        manifest
//! rasters/*.gridr       GRIDR v1 rasters
//! vectors/*.geojson     GeoJSON FeatureCollections
//! artifacts/*.json      artifact metadata + provenance (+ inline JSON payloads)
//! ```

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::geometry::{Polygon, LOCAL_CRS};
use crate::raster::GridRaster;
use crate::time::{TimeStamp, TimeWindow};
use crate::vector::VectorLayer;

pub const BUNDLE_FORMAT: &str = "agency-workspace";
pub const BUNDLE_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    Raster,
    Vector,
    Plot,
    Report,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactPayload {
    /// Name of a raster layer in the workspace.
    Raster(String),
    /// Name of a vector layer in the workspace.
    Vector(String),
    Json(Value),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceRecord {
    /// `graph:<hash>`, `manual`, `import`, or another producer tag.
    pub producer: String,
    pub inputs: Vec<String>,
    pub created: TimeStamp,
    pub param_digest: String,
}

impl ProvenanceRecord {
    pub fn import(created: TimeStamp) -> Self {
        Self {
            producer: "import".into(),
            inputs: Vec::new(),
            created,
            param_digest: String::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Artifact {
    pub id: String,
    pub kind: ArtifactKind,
    pub payload: ArtifactPayload,
    pub provenance: ProvenanceRecord,
}

/// Hex SHA-256 of arbitrary bytes.
pub fn digest_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Digest of a value's canonical JSON (object keys are sorted by `serde_json::Map`).
pub fn json_digest<T: Serialize>(v: &T) -> String {
    let canonical = serde_json::to_value(v).and_then(|v| serde_json::to_vec(&v));
    digest_hex(&canonical.expect("serializable value"))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Workspace {
    pub roi: Polygon,
    pub time_window: TimeWindow,
    pub crs: String,
    pub rasters: BTreeMap<String, GridRaster>,
    pub vectors: BTreeMap<String, VectorLayer>,
    pub artifacts: BTreeMap<String, Artifact>,
    rng_seed: u64,
}

impl Workspace {
    pub fn new(roi: Polygon, time_window: TimeWindow, rng_seed: u64) -> Result<Self> {
        roi.validate()?;
        Ok(Self {
            roi,
            time_window,
            crs: LOCAL_CRS.to_string(),
            rasters: BTreeMap::new(),
            vectors: BTreeMap::new(),
            artifacts: BTreeMap::new(),
            rng_seed,
        })
    }

    pub fn rng_seed(&self) -> u64 {
        self.rng_seed
    }

    pub fn add_raster(&mut self, name: impl Into<String>, r: GridRaster) -> Result<()> {
        let name = name.into();
        r.validate()?;
        if !r.grid().extent().intersects(&self.roi.bbox()) {
            return Err(Error::LayerOutsideRoi(name));
        }
        self.rasters.insert(name, r);
        Ok(())
    }

    pub fn add_vector(&mut self, layer: VectorLayer) -> Result<()> {
        if let Some(ext) = layer.extent() {
            if !ext.intersects(&self.roi.bbox()) {
                return Err(Error::LayerOutsideRoi(layer.name));
            }
        }
        self.vectors.insert(layer.name.clone(), layer);
        Ok(())
    }

    pub fn raster(&self, name: &str) -> Result<&GridRaster> {
        self.rasters
            .get(name)
            .ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn vector(&self, name: &str) -> Result<&VectorLayer> {
        self.vectors
            .get(name)
            .ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    pub fn vector_mut(&mut self, name: &str) -> Result<&mut VectorLayer> {
        self.vectors
            .get_mut(name)
            .ok_or_else(|| Error::MissingLayer(name.to_string()))
    }

    /// Registers an artifact. Inputs must already be registered, which keeps
    /// provenance chains acyclic; re-registering an id replaces it.
    pub fn put_artifact(&mut self, a: Artifact) -> Result<()> {
        if a.provenance.producer.is_empty() {
            return Err(Error::Schema(format!("artifact `{}` lacks provenance", a.id)));
        }
        for input in &a.provenance.inputs {
            if input == &a.id || !self.artifacts.contains_key(input) {
                return Err(Error::Schema(format!(
                    "artifact `{}` depends on unknown artifact `{input}`",
                    a.id
                )));
            }
        }
        match &a.payload {
            ArtifactPayload::Raster(l) if !self.rasters.contains_key(l) => {
                return Err(Error::MissingLayer(l.clone()))
            }
            ArtifactPayload::Vector(l) if !self.vectors.contains_key(l) => {
                return Err(Error::MissingLayer(l.clone()))
            }
            _ => {}
        }
        self.artifacts.insert(a.id.clone(), a);
        Ok(())
    }

    pub fn artifact(&self, id: &str) -> Result<&Artifact> {
        self.artifacts
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("artifact `{id}`")))
    }

    /// Fails if any provenance chain loops or dangles.
    pub fn check_provenance(&self) -> Result<()> {
        fn visit(
            ws: &Workspace,
            id: &str,
            on_path: &mut BTreeSet<String>,
            done: &mut BTreeSet<String>,
        ) -> Result<()> {
            if done.contains(id) {
                return Ok(());
            }
            if !on_path.insert(id.to_string()) {
                return Err(Error::Schema(format!("provenance cycle through `{id}`")));
            }
            let a = ws
                .artifacts
                .get(id)
                .ok_or_else(|| Error::Schema(format!("dangling provenance input `{id}`")))?;
            for input in &a.provenance.inputs {
                visit(ws, input, on_path, done)?;
            }
            on_path.remove(id);
            done.insert(id.to_string());
            Ok(())
        }
        let mut done = BTreeSet::new();
        for id in self.artifacts.keys() {
            visit(self, id, &mut BTreeSet::new(), &mut done)?;
        }
        Ok(())
    }
}

fn file_stem(name: &str) -> String {
    let safe: String = name
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' })
        .collect();
    // the digest suffix keeps distinct names from colliding after sanitizing
    format!("{safe}-{}", &digest_hex(name.as_bytes())[..8])
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    format: String,
    version: u32,
    roi: Polygon,
    time_window: TimeWindow,
    crs: String,
    rng_seed: u64,
    rasters: Vec<ManifestEntry>,
    vectors: Vec<ManifestEntry>,
    artifacts: Vec<ManifestEntry>,
}

#[derive(Serialize, Deserialize)]
struct ManifestEntry {
    name: String,
    file: String,
}

pub fn save_workspace(w: &Workspace, dir: &Path) -> Result<()> {
    for sub in ["rasters", "vectors", "artifacts"] {
        fs::create_dir_all(dir.join(sub))?;
    }
    let mut manifest = Manifest {
        format: BUNDLE_FORMAT.into(),
        version: BUNDLE_VERSION,
        roi: w.roi.clone(),
        time_window: w.time_window,
        crs: w.crs.clone(),
        rng_seed: w.rng_seed,
        rasters: Vec::new(),
        vectors: Vec::new(),
        artifacts: Vec::new(),
    };
    for (name, r) in &w.rasters {
        let file = format!("rasters/{}.gridr", file_stem(name));
        fs::write(dir.join(&file), r.to_gridr_bytes()?)?;
        manifest.rasters.push(ManifestEntry { name: name.clone(), file });
    }
    for (name, v) in &w.vectors {
        let file = format!("vectors/{}.geojson", file_stem(name));
        fs::write(dir.join(&file), serde_json::to_vec_pretty(&v.to_geojson())?)?;
        manifest.vectors.push(ManifestEntry { name: name.clone(), file });
    }
    for (id, a) in &w.artifacts {
        let file = format!("artifacts/{}.json", file_stem(id));
        fs::write(dir.join(&file), serde_json::to_vec_pretty(a)?)?;
        manifest.artifacts.push(ManifestEntry { name: id.clone(), file });
    }
    fs::write(dir.join("workspace.json"), serde_json::to_vec_pretty(&manifest)?)?;
    Ok(())
}

pub fn load_workspace(dir: &Path) -> Result<Workspace> {
    let manifest: Manifest = serde_json::from_slice(&fs::read(dir.join("workspace.json"))?)
        .map_err(|e| Error::Schema(format!("workspace.json: {e}")))?;
    if manifest.format != BUNDLE_FORMAT || manifest.version != BUNDLE_VERSION {
        return Err(Error::Schema(format!(
            "unsupported bundle {} v{}",
            manifest.format, manifest.version
        )));
    }
    let mut w = Workspace::new(manifest.roi, manifest.time_window, manifest.rng_seed)?;
    w.crs = manifest.crs;
    for e in manifest.rasters {
        let r = GridRaster::from_gridr_bytes(&fs::read(dir.join(&e.file))?)?;
        w.rasters.insert(e.name, r);
    }
    for e in manifest.vectors {
        let v: Value = serde_json::from_slice(&fs::read(dir.join(&e.file))?)
            .map_err(|err| Error::Schema(format!("{}: {err}", e.file)))?;
        let mut layer = VectorLayer::from_geojson(&v, None)?;
        layer.name = e.name.clone();
        w.vectors.insert(e.name, layer);
    }
    for e in manifest.artifacts {
        let a: Artifact = serde_json::from_slice(&fs::read(dir.join(&e.file))?)
            .map_err(|err| Error::Schema(format!("{}: {err}", e.file)))?;
        if a.id != e.name {
            return Err(Error::Schema(format!("artifact id mismatch in {}", e.file)));
        }
        w.artifacts.insert(e.name, a);
    }
    w.check_provenance()?;
    Ok(w)
}

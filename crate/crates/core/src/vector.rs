//! Labeled vector features, the label state machine and GeoJSON I/O.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

use crate::error::{Error, Result};
use crate::geometry::{GeoPoint, Polygon, LOCAL_CRS};
use crate::raster::CellId;
use crate::time::TimeStamp;

/// Review state of a label.
///
/// Legal moves: `Suggested -> Accepted | Rejected`, `Accepted -> Committed`,
/// `Committed -> Committed` (overwrite). `Rejected` is terminal.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelStatus {
    Suggested,
    Accepted,
    Rejected,
    Committed,
}

impl LabelStatus {
    pub const ALL: [LabelStatus; 4] = [
        LabelStatus::Suggested,
        LabelStatus::Accepted,
        LabelStatus::Rejected,
        LabelStatus::Committed,
    ];

    pub fn can_transition(self, to: LabelStatus) -> bool {
        use LabelStatus::*;
        matches!(
            (self, to),
            (Suggested, Accepted) | (Suggested, Rejected) | (Accepted, Committed) | (Committed, Committed)
        )
    }

    /// Live labels occupy their cell; rejected ones do not.
    pub fn is_live(self) -> bool {
        self != LabelStatus::Rejected
    }
}

/// Who produced a label. Fixed at creation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelOrigin {
    Manual,
    Perceptor,
    Propagation,
    DualModel,
}

impl LabelOrigin {
    pub fn is_suggestion(self) -> bool {
        self != LabelOrigin::Manual
    }
}

/// `f64` serialized as its IEEE-754 bit pattern in hex, so JSON round-trips are lossless.
#[derive(Debug, Clone, Copy)]
pub struct HexF64(pub f64);

impl PartialEq for HexF64 {
    fn eq(&self, other: &Self) -> bool {
        self.0.to_bits() == other.0.to_bits()
    }
}

impl Serialize for HexF64 {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(&format_args!("0x{:016x}", self.0.to_bits()))
    }
}

impl<'de> Deserialize<'de> for HexF64 {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        let digits = s
            .strip_prefix("0x")
            .ok_or_else(|| serde::de::Error::custom("expected 0x-prefixed hex float"))?;
        u64::from_str_radix(digits, 16)
            .map(|b| HexF64(f64::from_bits(b)))
            .map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum AttributeValue {
    Text {
        value: String,
    },
    Number {
        value: HexF64,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        unit: Option<String>,
    },
    Category {
        tags: Vec<String>,
    },
    Series {
        name: String,
        points: Vec<(TimeStamp, HexF64)>,
    },
    ImageRef {
        artifact: String,
    },
}

impl AttributeValue {
    pub fn number(value: f64, unit: Option<&str>) -> Self {
        AttributeValue::Number {
            value: HexF64(value),
            unit: unit.map(str::to_string),
        }
    }

    pub fn series(name: &str, points: &[(TimeStamp, f64)]) -> Result<Self> {
        if points.windows(2).any(|w| w[0].0 >= w[1].0) {
            return Err(Error::Schema("series timestamps must strictly increase".into()));
        }
        Ok(AttributeValue::Series {
            name: name.to_string(),
            points: points.iter().map(|&(t, v)| (t, HexF64(v))).collect(),
        })
    }

    pub fn as_number(&self) -> Option<f64> {
        match self {
            AttributeValue::Number { value, .. } => Some(value.0),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Feature {
    pub id: String,
    pub geometry: Polygon,
    #[serde(default)]
    pub attributes: BTreeMap<String, AttributeValue>,
    pub label: Option<String>,
    pub label_origin: LabelOrigin,
    pub status: LabelStatus,
    /// Grid cell the feature labels, for cell-based tasks.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cell: Option<CellId>,
}

impl Feature {
    pub fn validate(&self) -> Result<()> {
        self.geometry.validate()?;
        if self.status == LabelStatus::Committed && self.label.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Schema(format!(
                "committed feature `{}` has no label",
                self.id
            )));
        }
        Ok(())
    }

    pub fn transition(&mut self, to: LabelStatus) -> Result<()> {
        if !self.status.can_transition(to) {
            return Err(Error::IllegalTransition {
                from: self.status,
                to,
            });
        }
        if to == LabelStatus::Committed && self.label.as_deref().unwrap_or("").is_empty() {
            return Err(Error::Schema(format!("cannot commit unlabeled `{}`", self.id)));
        }
        self.status = to;
        Ok(())
    }
}

/// Named collection of features with unique ids.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VectorLayer {
    pub name: String,
    pub crs: String,
    pub features: BTreeMap<String, Feature>,
}

impl VectorLayer {
    pub fn new(name: impl Into<String>) -> Self {
        Self {
            name: name.into(),
            crs: LOCAL_CRS.to_string(),
            features: BTreeMap::new(),
        }
    }

    pub fn insert(&mut self, f: Feature) -> Result<()> {
        if self.features.contains_key(&f.id) {
            return Err(Error::DuplicateId(f.id));
        }
        self.features.insert(f.id.clone(), f);
        Ok(())
    }

    pub fn get(&self, id: &str) -> Result<&Feature> {
        self.features
            .get(id)
            .ok_or_else(|| Error::NotFound(format!("feature `{id}`")))
    }

    pub fn get_mut(&mut self, id: &str) -> Result<&mut Feature> {
        self.features
            .get_mut(id)
            .ok_or_else(|| Error::NotFound(format!("feature `{id}`")))
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Feature> {
        self.features.values()
    }

    pub fn extent(&self) -> Option<crate::geometry::BBox> {
        self.iter()
            .map(|f| f.geometry.bbox())
            .reduce(|a, b| a.union(&b))
    }

    pub fn to_geojson(&self) -> Value {
        let features: Vec<Value> = self.iter().map(feature_to_geojson).collect();
        json!({
            "type": "FeatureCollection",
            "name": self.name,
            "crs_tag": self.crs,
            "features": features,
        })
    }

    /// Parses and validates a FeatureCollection. Point geometries are
    /// buffered into squares of side `point_side` when given, rejected otherwise.
    pub fn from_geojson(v: &Value, point_side: Option<f64>) -> Result<Self> {
        let schema = |m: &str| Error::Schema(format!("geojson: {m}"));
        if v.get("type").and_then(Value::as_str) != Some("FeatureCollection") {
            return Err(schema("expected FeatureCollection"));
        }
        let name = v.get("name").and_then(Value::as_str).unwrap_or("layer");
        let mut layer = VectorLayer::new(name);
        if let Some(crs) = v.get("crs_tag").and_then(Value::as_str) {
            layer.crs = crs.to_string();
        }
        let feats = v
            .get("features")
            .and_then(Value::as_array)
            .ok_or_else(|| schema("missing features"))?;
        for (i, fv) in feats.iter().enumerate() {
            let f = feature_from_geojson(fv, i, point_side)?;
            f.validate()?;
            layer.insert(f)?;
        }
        Ok(layer)
    }
}

fn ring_coords(ring: &[GeoPoint]) -> Value {
    let mut pts: Vec<Value> = ring.iter().map(|p| json!([p.x, p.y])).collect();
    if let Some(first) = ring.first() {
        pts.push(json!([first.x, first.y]));
    }
    Value::Array(pts)
}

fn feature_to_geojson(f: &Feature) -> Value {
    let mut rings = vec![ring_coords(&f.geometry.exterior)];
    rings.extend(f.geometry.holes.iter().map(|h| ring_coords(h)));
    let mut agency = json!({
        "label": f.label,
        "status": f.status,
        "origin": f.label_origin,
    });
    if let Some(cell) = f.cell {
        agency["cell"] = json!(cell);
    }
    json!({
        "type": "Feature",
        "id": f.id,
        "geometry": {"type": "Polygon", "coordinates": rings},
        "properties": {
            "agency": agency,
            "attributes": f.attributes,
        },
    })
}

fn parse_ring(v: &Value) -> Result<Vec<GeoPoint>> {
    let arr = v
        .as_array()
        .ok_or_else(|| Error::Schema("geojson: ring is not an array".into()))?;
    let mut pts = arr
        .iter()
        .map(parse_point)
        .collect::<Result<Vec<_>>>()?;
    if pts.len() > 1 && pts.first() == pts.last() {
        pts.pop();
    }
    Ok(pts)
}

fn parse_point(v: &Value) -> Result<GeoPoint> {
    let xy = v
        .as_array()
        .filter(|a| a.len() >= 2)
        .ok_or_else(|| Error::Schema("geojson: bad position".into()))?;
    let num = |x: &Value| {
        x.as_f64()
            .ok_or_else(|| Error::Schema("geojson: non-numeric coordinate".into()))
    };
    Ok(GeoPoint::new(num(&xy[0])?, num(&xy[1])?))
}

fn feature_from_geojson(v: &Value, index: usize, point_side: Option<f64>) -> Result<Feature> {
    let schema = |m: String| Error::Schema(format!("geojson feature {index}: {m}"));
    let id = match v.get("id") {
        Some(Value::String(s)) => s.clone(),
        Some(Value::Number(n)) => n.to_string(),
        _ => format!("f{index:06}"),
    };
    let geom = v.get("geometry").ok_or_else(|| schema("no geometry".into()))?;
    let coords = geom
        .get("coordinates")
        .ok_or_else(|| schema("no coordinates".into()))?;
    let geometry = match geom.get("type").and_then(Value::as_str) {
        Some("Polygon") => {
            let rings = coords
                .as_array()
                .filter(|r| !r.is_empty())
                .ok_or_else(|| schema("empty polygon".into()))?;
            let exterior = parse_ring(&rings[0])?;
            let holes = rings[1..].iter().map(parse_ring).collect::<Result<_>>()?;
            Polygon { exterior, holes }
        }
        Some("Point") => {
            let side = point_side.ok_or_else(|| schema("point geometry without buffer size".into()))?;
            Polygon::square_around(parse_point(coords)?, side)
        }
        other => return Err(schema(format!("unsupported geometry {other:?}"))),
    };
    let props = v.get("properties").cloned().unwrap_or(Value::Null);
    let agency = props.get("agency").cloned().unwrap_or(Value::Null);
    let label = agency
        .get("label")
        .and_then(Value::as_str)
        .map(str::to_string);
    let status = match agency.get("status") {
        Some(s) => serde_json::from_value(s.clone())?,
        None if label.is_some() => LabelStatus::Committed,
        None => LabelStatus::Suggested,
    };
    let label_origin = match agency.get("origin") {
        Some(o) => serde_json::from_value(o.clone())?,
        None => LabelOrigin::Manual,
    };
    let cell = match agency.get("cell") {
        Some(c) if !c.is_null() => Some(serde_json::from_value(c.clone())?),
        _ => None,
    };
    let attributes = match props.get("attributes") {
        Some(a) if !a.is_null() => serde_json::from_value(a.clone())?,
        _ => BTreeMap::new(),
    };
    Ok(Feature {
        id,
        geometry,
        attributes,
        label,
        label_origin,
        status,
        cell,
    })
}

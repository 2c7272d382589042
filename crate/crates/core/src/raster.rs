//! Grid rasters and the GRIDR v1 container.
//!
//! Cells are addressed by `(row, col)` with row 0 at the bottom (the origin is
//! the lower-left corner). Band values are stored row-major.
//!
//! GRIDR v1 layout: one JSON header object terminated by `\n`, followed by
//! each band's values as little-endian IEEE-754 `f64`, band after band.

use std::fmt;
use std::io::{Read, Write};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, GeoPoint, Polygon};
use crate::time::TimeStamp;

pub const GRIDR_MAGIC: &str = "GRIDR";
pub const GRIDR_VERSION: u32 = 1;
pub const DEFAULT_NODATA: f64 = -9999.0;

/// Grid cell address. Displays as `r0003c0012` so lexicographic order is row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CellId {
    pub row: u32,
    pub col: u32,
}

impl CellId {
    pub const fn new(row: u32, col: u32) -> Self {
        Self { row, col }
    }
}

impl fmt::Display for CellId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "r{:04}c{:04}", self.row, self.col)
    }
}

impl FromStr for CellId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Schema(format!("bad cell id `{s}`"));
        let rest = s.strip_prefix('r').ok_or_else(bad)?;
        let (row, col) = rest.split_once('c').ok_or_else(bad)?;
        Ok(CellId {
            row: row.parse().map_err(|_| bad())?,
            col: col.parse().map_err(|_| bad())?,
        })
    }
}

impl Serialize for CellId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for CellId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Georeferencing of a regular grid without any values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub origin: GeoPoint,
    pub cell_size: f64,
    pub width: u32,
    pub height: u32,
}

impl Grid {
    pub fn len(&self) -> usize {
        self.width as usize * self.height as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn index(&self, cell: CellId) -> usize {
        cell.row as usize * self.width as usize + cell.col as usize
    }

    pub fn cell_at_index(&self, idx: usize) -> CellId {
        CellId::new(
            (idx / self.width as usize) as u32,
            (idx % self.width as usize) as u32,
        )
    }

    pub fn contains_cell(&self, cell: CellId) -> bool {
        cell.row < self.height && cell.col < self.width
    }

    /// All cells in row-major order.
    pub fn cells(&self) -> impl Iterator<Item = CellId> + '_ {
        (0..self.len()).map(|i| self.cell_at_index(i))
    }

    pub fn cell_center(&self, cell: CellId) -> GeoPoint {
        GeoPoint::new(
            self.origin.x + (cell.col as f64 + 0.5) * self.cell_size,
            self.origin.y + (cell.row as f64 + 0.5) * self.cell_size,
        )
    }

    pub fn cell_bbox(&self, cell: CellId) -> BBox {
        BBox {
            min_x: self.origin.x + cell.col as f64 * self.cell_size,
            min_y: self.origin.y + cell.row as f64 * self.cell_size,
            max_x: self.origin.x + (cell.col + 1) as f64 * self.cell_size,
            max_y: self.origin.y + (cell.row + 1) as f64 * self.cell_size,
        }
    }

    pub fn cell_polygon(&self, cell: CellId) -> Polygon {
        self.cell_bbox(cell).to_polygon()
    }

    /// Bounding box of the `rows x cols` block whose lower-left cell is `start`.
    pub fn block_bbox(&self, start: CellId, rows: u32, cols: u32) -> BBox {
        BBox {
            min_x: self.origin.x + start.col as f64 * self.cell_size,
            min_y: self.origin.y + start.row as f64 * self.cell_size,
            max_x: self.origin.x + (start.col + cols) as f64 * self.cell_size,
            max_y: self.origin.y + (start.row + rows) as f64 * self.cell_size,
        }
    }

    pub fn extent(&self) -> BBox {
        BBox {
            min_x: self.origin.x,
            min_y: self.origin.y,
            max_x: self.origin.x + self.width as f64 * self.cell_size,
            max_y: self.origin.y + self.height as f64 * self.cell_size,
        }
    }

    /// Cell containing `p`, if any (upper/right edges belong to the next cell).
    pub fn cell_at(&self, p: &GeoPoint) -> Option<CellId> {
        let col = ((p.x - self.origin.x) / self.cell_size).floor();
        let row = ((p.y - self.origin.y) / self.cell_size).floor();
        if col < 0.0 || row < 0.0 || col >= self.width as f64 || row >= self.height as f64 {
            return None;
        }
        Some(CellId::new(row as u32, col as u32))
    }

    /// Cells whose centers fall inside the polygon, in row-major order.
    pub fn cells_in_polygon(&self, polygon: &Polygon) -> Vec<CellId> {
        let b = polygon.bbox();
        let col_lo = (((b.min_x - self.origin.x) / self.cell_size) - 0.5).ceil().max(0.0) as u32;
        let row_lo = (((b.min_y - self.origin.y) / self.cell_size) - 0.5).ceil().max(0.0) as u32;
        let col_hi = ((b.max_x - self.origin.x) / self.cell_size - 0.5).floor();
        let row_hi = ((b.max_y - self.origin.y) / self.cell_size - 0.5).floor();
        if col_hi < 0.0 || row_hi < 0.0 {
            return Vec::new();
        }
        let col_hi = (col_hi as u32).min(self.width.saturating_sub(1));
        let row_hi = (row_hi as u32).min(self.height.saturating_sub(1));
        let mut out = Vec::new();
        for row in row_lo..=row_hi {
            for col in col_lo..=col_hi {
                let c = CellId::new(row, col);
                if polygon.contains_point(&self.cell_center(c)) {
                    out.push(c);
                }
            }
        }
        out
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Band {
    pub name: String,
    pub values: Vec<f64>,
}

/// Multi-band raster on a regular grid.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridRaster {
    pub origin: GeoPoint,
    pub cell_size: f64,
    pub width: u32,
    pub height: u32,
    pub bands: Vec<Band>,
    pub nodata: f64,
    pub timestamp: Option<TimeStamp>,
}

/// Bitwise equality: two rasters are equal only if every float has the same bits.
impl PartialEq for GridRaster {
    fn eq(&self, other: &Self) -> bool {
        let bits = |v: f64| v.to_bits();
        bits(self.origin.x) == bits(other.origin.x)
            && bits(self.origin.y) == bits(other.origin.y)
            && bits(self.cell_size) == bits(other.cell_size)
            && self.width == other.width
            && self.height == other.height
            && bits(self.nodata) == bits(other.nodata)
            && self.timestamp == other.timestamp
            && self.bands.len() == other.bands.len()
            && self.bands.iter().zip(&other.bands).all(|(a, b)| {
                a.name == b.name
                    && a.values.len() == b.values.len()
                    && a.values.iter().zip(&b.values).all(|(x, y)| bits(*x) == bits(*y))
            })
    }
}

impl GridRaster {
    /// A raster with the given bands, every value set to `fill`.
    pub fn filled(grid: Grid, band_names: &[&str], fill: f64, nodata: f64) -> Self {
        Self {
            origin: grid.origin,
            cell_size: grid.cell_size,
            width: grid.width,
            height: grid.height,
            bands: band_names
                .iter()
                .map(|n| Band {
                    name: n.to_string(),
                    values: vec![fill; grid.len()],
                })
                .collect(),
            nodata,
            timestamp: None,
        }
    }

    pub fn from_bands(grid: Grid, bands: Vec<Band>, nodata: f64) -> Result<Self> {
        let r = Self {
            origin: grid.origin,
            cell_size: grid.cell_size,
            width: grid.width,
            height: grid.height,
            bands,
            nodata,
            timestamp: None,
        };
        r.validate()?;
        Ok(r)
    }

    pub fn with_timestamp(mut self, t: TimeStamp) -> Self {
        self.timestamp = Some(t);
        self
    }

    pub fn grid(&self) -> Grid {
        Grid {
            origin: self.origin,
            cell_size: self.cell_size,
            width: self.width,
            height: self.height,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.cell_size > 0.0 && self.cell_size.is_finite()) {
            return Err(Error::Schema("cell_size must be positive".into()));
        }
        if !self.origin.is_finite() {
            return Err(Error::Schema("origin must be finite".into()));
        }
        let n = self.grid().len();
        for (i, b) in self.bands.iter().enumerate() {
            if b.values.len() != n {
                return Err(Error::Schema(format!(
                    "band `{}` has {} values, expected {n}",
                    b.name,
                    b.values.len()
                )));
            }
            if self.bands[..i].iter().any(|o| o.name == b.name) {
                return Err(Error::Schema(format!("duplicate band `{}`", b.name)));
            }
        }
        Ok(())
    }

    pub fn band(&self, name: &str) -> Result<&Band> {
        self.bands
            .iter()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::BandMismatch(format!("no band `{name}`")))
    }

    pub fn band_mut(&mut self, name: &str) -> Result<&mut Band> {
        self.bands
            .iter_mut()
            .find(|b| b.name == name)
            .ok_or_else(|| Error::BandMismatch(format!("no band `{name}`")))
    }

    pub fn is_nodata(&self, v: f64) -> bool {
        v.to_bits() == self.nodata.to_bits() || v.is_nan()
    }

    pub fn value(&self, band: &str, cell: CellId) -> Result<f64> {
        let g = self.grid();
        Ok(self.band(band)?.values[g.index(cell)])
    }

    pub fn write_gridr<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let header = serde_json::json!({
            "magic": GRIDR_MAGIC,
            "version": GRIDR_VERSION,
            "origin": [self.origin.x, self.origin.y],
            "cell_size": self.cell_size,
            "width": self.width,
            "height": self.height,
            "bands": self.bands.iter().map(|b| b.name.as_str()).collect::<Vec<_>>(),
            "nodata": nodata_to_json(self.nodata),
            "timestamp": self.timestamp,
        });
        serde_json::to_writer(&mut w, &header)?;
        w.write_all(b"\n")?;
        let mut buf = Vec::with_capacity(self.grid().len() * 8);
        for b in &self.bands {
            buf.clear();
            for v in &b.values {
                buf.extend_from_slice(&v.to_le_bytes());
            }
            w.write_all(&buf)?;
        }
        Ok(())
    }

    pub fn to_gridr_bytes(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        self.write_gridr(&mut out)?;
        Ok(out)
    }

    pub fn read_gridr<R: Read>(mut r: R) -> Result<Self> {
        let mut bytes = Vec::new();
        r.read_to_end(&mut bytes)?;
        Self::from_gridr_bytes(&bytes)
    }

    pub fn from_gridr_bytes(bytes: &[u8]) -> Result<Self> {
        let nl = bytes
            .iter()
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::Schema("GRIDR header not terminated".into()))?;
        let header: GridrHeader = serde_json::from_slice(&bytes[..nl])
            .map_err(|e| Error::Schema(format!("GRIDR header: {e}")))?;
        if header.magic != GRIDR_MAGIC {
            return Err(Error::Schema(format!("bad magic `{}`", header.magic)));
        }
        if header.version != GRIDR_VERSION {
            return Err(Error::Schema(format!(
                "unsupported GRIDR version {}",
                header.version
            )));
        }
        let n = header.width as usize * header.height as usize;
        let payload = &bytes[nl + 1..];
        if payload.len() != n * 8 * header.bands.len() {
            return Err(Error::Schema(format!(
                "GRIDR payload is {} bytes, expected {}",
                payload.len(),
                n * 8 * header.bands.len()
            )));
        }
        let bands = header
            .bands
            .iter()
            .enumerate()
            .map(|(bi, name)| Band {
                name: name.clone(),
                values: payload[bi * n * 8..(bi + 1) * n * 8]
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
                    .collect(),
            })
            .collect();
        let r = GridRaster {
            origin: GeoPoint::new(header.origin[0], header.origin[1]),
            cell_size: header.cell_size,
            width: header.width,
            height: header.height,
            bands,
            nodata: nodata_from_json(&header.nodata)?,
            timestamp: header.timestamp,
        };
        r.validate()?;
        Ok(r)
    }
}

#[derive(Deserialize)]
struct GridrHeader {
    magic: String,
    version: u32,
    origin: [f64; 2],
    cell_size: f64,
    width: u32,
    height: u32,
    bands: Vec<String>,
    nodata: serde_json::Value,
    timestamp: Option<TimeStamp>,
}

// JSON has no NaN/inf, so non-finite nodata is written as a string. NaNs
// other than the canonical one keep their payload as `nan:<hex bits>`.
fn nodata_to_json(v: f64) -> serde_json::Value {
    if v.is_finite() {
        serde_json::json!(v)
    } else if v.to_bits() == f64::NAN.to_bits() {
        serde_json::json!("nan")
    } else if v.is_nan() {
        serde_json::json!(format!("nan:{:016x}", v.to_bits()))
    } else if v > 0.0 {
        serde_json::json!("inf")
    } else {
        serde_json::json!("-inf")
    }
}

fn nodata_from_json(v: &serde_json::Value) -> Result<f64> {
    match v {
        serde_json::Value::Number(n) => n
            .as_f64()
            .ok_or_else(|| Error::Schema("GRIDR nodata out of range".into())),
        serde_json::Value::String(s) => match s.as_str() {
            "nan" => Ok(f64::NAN),
            "inf" => Ok(f64::INFINITY),
            "-inf" => Ok(f64::NEG_INFINITY),
            _ => s
                .strip_prefix("nan:")
                .and_then(|h| u64::from_str_radix(h, 16).ok())
                .map(f64::from_bits)
                .filter(|v| v.is_nan())
                .ok_or_else(|| Error::Schema(format!("GRIDR nodata `{s}`"))),
        },
        _ => Err(Error::Schema("GRIDR nodata must be a number".into())),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid(w: u32, h: u32) -> Grid {
        Grid {
            origin: GeoPoint::new(100.0, 200.0),
            cell_size: 10.0,
            width: w,
            height: h,
        }
    }

    #[test]
    fn cell_id_text_round_trip_and_order() {
        let c = CellId::new(3, 12);
        assert_eq!(c.to_string(), "r0003c0012");
        assert_eq!("r0003c0012".parse::<CellId>().unwrap(), c);
        assert!(CellId::new(0, 9).to_string() < CellId::new(1, 0).to_string());
        assert!("x1".parse::<CellId>().is_err());
    }

    #[test]
    fn gridr_round_trip_is_bitwise() {
        let mut r = GridRaster::filled(grid(3, 2), &["a", "b"], 0.0, DEFAULT_NODATA)
            .with_timestamp(TimeStamp(42));
        r.bands[0].values = vec![0.1, -0.0, f64::MIN_POSITIVE, 1e300, 3.0, DEFAULT_NODATA];
        r.bands[1].values = vec![1.0 / 3.0; 6];
        let bytes = r.to_gridr_bytes().unwrap();
        let back = GridRaster::from_gridr_bytes(&bytes).unwrap();
        assert_eq!(r, back);
        assert_eq!(back.bands[0].values[1].to_bits(), (-0.0f64).to_bits());
    }

    #[test]
    fn gridr_rejects_corruption() {
        let r = GridRaster::filled(grid(2, 2), &["a"], 1.0, DEFAULT_NODATA);
        let mut bytes = r.to_gridr_bytes().unwrap();
        bytes.truncate(bytes.len() - 3);
        assert!(matches!(GridRaster::from_gridr_bytes(&bytes), Err(Error::Schema(_))));
        let text = String::from_utf8_lossy(&r.to_gridr_bytes().unwrap()).replace("\"version\":1", "\"version\":2");
        assert!(matches!(GridRaster::from_gridr_bytes(text.as_bytes()), Err(Error::Schema(_))));
        assert!(GridRaster::from_gridr_bytes(b"garbage").is_err());
    }

    #[test]
    fn duplicate_band_names_rejected() {
        let mut r = GridRaster::filled(grid(1, 1), &["a", "a"], 1.0, DEFAULT_NODATA);
        assert!(r.validate().is_err());
        r.bands[1].name = "b".into();
        assert!(r.validate().is_ok());
    }

    #[test]
    fn cells_in_polygon_uses_centers() {
        let g = grid(4, 4);
        let all = g.extent().to_polygon();
        assert_eq!(g.cells_in_polygon(&all).len(), 16);
        // box spanning between centers of cells (0,0) and (0,1): no center inside
        let between = BBox::new(106.0, 201.0, 114.0, 209.0).unwrap().to_polygon();
        assert!(g.cells_in_polygon(&between).is_empty());
        let one = BBox::new(100.0, 200.0, 110.0, 210.0).unwrap().to_polygon();
        assert_eq!(g.cells_in_polygon(&one), vec![CellId::new(0, 0)]);
    }

    #[test]
    fn cell_lookup() {
        let g = grid(4, 3);
        assert_eq!(g.cell_at(&GeoPoint::new(125.0, 215.0)), Some(CellId::new(1, 2)));
        assert_eq!(g.cell_at(&GeoPoint::new(99.0, 215.0)), None);
        assert_eq!(g.index(CellId::new(2, 3)), 11);
        assert_eq!(g.cell_at_index(11), CellId::new(2, 3));
    }
}

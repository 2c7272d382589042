//! Planar geometry in a local metric CRS.
//!
//! Polygons are stored with an open ring (the closing vertex is implicit).
//! Validity is checked once when geometry enters the system
//! ([`Polygon::validate`]); the predicates below assume valid input.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// The only CRS tag this crate produces.
pub const LOCAL_CRS: &str = "LOCAL/METERS";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GeoPoint {
    pub x: f64,
    pub y: f64,
}

impl GeoPoint {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }

    pub fn distance(&self, other: &GeoPoint) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

/// Axis-aligned box; edges are inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl BBox {
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self> {
        let b = Self {
            min_x,
            min_y,
            max_x,
            max_y,
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.min_x, self.min_y, self.max_x, self.max_y]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.min_x > self.max_x || self.min_y > self.max_y {
            return Err(Error::InvalidGeometry(format!("bad bbox {self:?}")));
        }
        Ok(())
    }

    pub fn from_points<'a>(points: impl IntoIterator<Item = &'a GeoPoint>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = BBox {
            min_x: first.x,
            min_y: first.y,
            max_x: first.x,
            max_y: first.y,
        };
        for p in it {
            b.min_x = b.min_x.min(p.x);
            b.min_y = b.min_y.min(p.y);
            b.max_x = b.max_x.max(p.x);
            b.max_y = b.max_y.max(p.y);
        }
        Some(b)
    }

    pub fn intersects(&self, other: &BBox) -> bool {
        self.min_x <= other.max_x
            && other.min_x <= self.max_x
            && self.min_y <= other.max_y
            && other.min_y <= self.max_y
    }

    pub fn contains_point(&self, p: &GeoPoint) -> bool {
        p.x >= self.min_x && p.x <= self.max_x && p.y >= self.min_y && p.y <= self.max_y
    }

    pub fn contains(&self, other: &BBox) -> bool {
        other.min_x >= self.min_x
            && other.max_x <= self.max_x
            && other.min_y >= self.min_y
            && other.max_y <= self.max_y
    }

    pub fn union(&self, other: &BBox) -> BBox {
        BBox {
            min_x: self.min_x.min(other.min_x),
            min_y: self.min_y.min(other.min_y),
            max_x: self.max_x.max(other.max_x),
            max_y: self.max_y.max(other.max_y),
        }
    }

    pub fn area(&self) -> f64 {
        (self.max_x - self.min_x) * (self.max_y - self.min_y)
    }

    /// Area growth needed for `self` to also cover `other`.
    pub fn enlargement(&self, other: &BBox) -> f64 {
        self.union(other).area() - self.area()
    }

    pub fn center(&self) -> GeoPoint {
        GeoPoint::new(
            (self.min_x + self.max_x) / 2.0,
            (self.min_y + self.max_y) / 2.0,
        )
    }

    /// Corners in counterclockwise order starting at the lower-left.
    pub fn corners(&self) -> [GeoPoint; 4] {
        [
            GeoPoint::new(self.min_x, self.min_y),
            GeoPoint::new(self.max_x, self.min_y),
            GeoPoint::new(self.max_x, self.max_y),
            GeoPoint::new(self.min_x, self.max_y),
        ]
    }

    pub fn to_polygon(&self) -> Polygon {
        Polygon {
            exterior: self.corners().to_vec(),
            holes: Vec::new(),
        }
    }
}

/// Simple polygon with optional holes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Polygon {
    pub exterior: Vec<GeoPoint>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub holes: Vec<Vec<GeoPoint>>,
}

impl Polygon {
    /// Builds and validates a polygon.
    pub fn new(exterior: Vec<GeoPoint>, holes: Vec<Vec<GeoPoint>>) -> Result<Self> {
        let p = Self { exterior, holes };
        p.validate()?;
        Ok(p)
    }

    /// Axis-aligned square of side `side` centered on `center`. Used to
    /// buffer point observations into polygons.
    pub fn square_around(center: GeoPoint, side: f64) -> Self {
        let h = side / 2.0;
        BBox {
            min_x: center.x - h,
            min_y: center.y - h,
            max_x: center.x + h,
            max_y: center.y + h,
        }
        .to_polygon()
    }

    /// Regular n-gon inscribed in a circle, counterclockwise.
    pub fn regular(center: GeoPoint, radius: f64, n: usize) -> Self {
        let exterior = (0..n)
            .map(|i| {
                let a = std::f64::consts::TAU * i as f64 / n as f64;
                GeoPoint::new(center.x + radius * a.cos(), center.y + radius * a.sin())
            })
            .collect();
        Self {
            exterior,
            holes: Vec::new(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_ring(&self.exterior, "exterior")?;
        if !ring_is_simple(&self.exterior) {
            return Err(Error::InvalidGeometry("exterior ring self-intersects".into()));
        }
        if signed_area(&self.exterior) <= 0.0 {
            return Err(Error::InvalidGeometry(
                "exterior ring must be counterclockwise with positive area".into(),
            ));
        }
        for (i, hole) in self.holes.iter().enumerate() {
            check_ring(hole, &format!("hole {i}"))?;
            if signed_area(hole) == 0.0 {
                return Err(Error::InvalidGeometry(format!("hole {i} has zero area")));
            }
        }
        Ok(())
    }

    pub fn bbox(&self) -> BBox {
        BBox::from_points(&self.exterior).expect("polygon exterior is non-empty")
    }

    pub fn rings(&self) -> impl Iterator<Item = &[GeoPoint]> {
        std::iter::once(self.exterior.as_slice()).chain(self.holes.iter().map(Vec::as_slice))
    }

    /// Inclusive point-in-polygon: boundary points count as inside, points
    /// strictly inside a hole do not.
    pub fn contains_point(&self, p: &GeoPoint) -> bool {
        if !point_in_ring(&self.exterior, p) {
            return false;
        }
        for hole in &self.holes {
            if point_on_ring(hole, p) {
                return true;
            }
            if point_in_ring(hole, p) {
                return false;
            }
        }
        true
    }

    pub fn perimeter(&self) -> f64 {
        self.rings().map(ring_length).sum()
    }

    /// Area-weighted centroid of the exterior ring.
    pub fn centroid(&self) -> GeoPoint {
        let ring = &self.exterior;
        let Some(o) = ring.first().copied() else {
            return self.bbox().center();
        };
        // relative to the first vertex, as in signed_area
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..ring.len() {
            let (p, q) = (ring[i], ring[(i + 1) % ring.len()]);
            let (px, py, qx, qy) = (p.x - o.x, p.y - o.y, q.x - o.x, q.y - o.y);
            let cross = px * qy - qx * py;
            a2 += cross;
            cx += (px + qx) * cross;
            cy += (py + qy) * cross;
        }
        if a2 == 0.0 {
            return self.bbox().center();
        }
        GeoPoint::new(o.x + cx / (3.0 * a2), o.y + cy / (3.0 * a2))
    }
}

fn check_ring(ring: &[GeoPoint], what: &str) -> Result<()> {
    if ring.iter().any(|p| !p.is_finite()) {
        return Err(Error::InvalidGeometry(format!("{what}: non-finite vertex")));
    }
    if distinct_vertices(ring) < 3 {
        return Err(Error::InvalidGeometry(format!(
            "{what}: ring needs at least 3 distinct vertices"
        )));
    }
    if ring.first() == ring.last() {
        return Err(Error::InvalidGeometry(format!(
            "{what}: ring must be stored open (first vertex repeated as last)"
        )));
    }
    Ok(())
}

fn distinct_vertices(ring: &[GeoPoint]) -> usize {
    let mut seen: Vec<(u64, u64)> = ring
        .iter()
        .map(|p| (p.x.to_bits(), p.y.to_bits()))
        .collect();
    seen.sort_unstable();
    seen.dedup();
    seen.len()
}

/// Shoelace signed area; positive for counterclockwise rings.
///
/// Coordinates are taken relative to the first vertex, so small rings far
/// from the origin do not lose their area to cancellation.
pub fn signed_area(ring: &[GeoPoint]) -> f64 {
    let Some(o) = ring.first() else {
        return 0.0;
    };
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (p, q) = (ring[i], ring[(i + 1) % n]);
        let (px, py, qx, qy) = (p.x - o.x, p.y - o.y, q.x - o.x, q.y - o.y);
        acc += px * qy - qx * py;
    }
    acc / 2.0
}

fn ring_length(ring: &[GeoPoint]) -> f64 {
    (0..ring.len())
        .map(|i| ring[i].distance(&ring[(i + 1) % ring.len()]))
        .sum()
}

/// Area of the exterior minus the holes.
pub fn polygon_area(p: &Polygon) -> Result<f64> {
    for ring in p.rings() {
        if ring.len() < 3 || distinct_vertices(ring) < 3 {
            return Err(Error::InvalidGeometry("degenerate ring".into()));
        }
    }
    let outer = signed_area(&p.exterior).abs();
    let holes: f64 = p.holes.iter().map(|h| signed_area(h).abs()).sum();
    Ok((outer - holes).max(0.0))
}

/// Polsby-Popper compactness `4*pi*A / P^2`; 1.0 for a circle.
pub fn compactness(p: &Polygon) -> Result<f64> {
    let area = polygon_area(p)?;
    let perimeter = p.perimeter();
    if perimeter == 0.0 {
        return Err(Error::InvalidGeometry("zero perimeter".into()));
    }
    Ok(4.0 * std::f64::consts::PI * area / (perimeter * perimeter))
}

fn orient(a: &GeoPoint, b: &GeoPoint, c: &GeoPoint) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn on_segment(a: &GeoPoint, b: &GeoPoint, p: &GeoPoint) -> bool {
    orient(a, b, p) == 0.0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// Closed-segment intersection test (touching counts).
pub fn segments_intersect(a: &GeoPoint, b: &GeoPoint, c: &GeoPoint, d: &GeoPoint) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    on_segment(a, b, c) || on_segment(a, b, d) || on_segment(c, d, a) || on_segment(c, d, b)
}

fn edges(ring: &[GeoPoint]) -> impl Iterator<Item = (&GeoPoint, &GeoPoint)> {
    (0..ring.len()).map(move |i| (&ring[i], &ring[(i + 1) % ring.len()]))
}

fn ring_is_simple(ring: &[GeoPoint]) -> bool {
    let n = ring.len();
    for i in 0..n {
        let (a, b) = (&ring[i], &ring[(i + 1) % n]);
        for j in (i + 1)..n {
            let (c, d) = (&ring[j], &ring[(j + 1) % n]);
            let adjacent = j == i + 1 || (i == 0 && j == n - 1);
            if adjacent {
                // Adjacent edges share one vertex; they may only overlap there.
                let shared = if j == i + 1 { b } else { a };
                let (other_i, other_j) = if j == i + 1 { (a, d) } else { (b, c) };
                if orient(a, b, other_j) == 0.0 && on_segment(a, b, other_j) && other_j != shared
                {
                    return false;
                }
                if orient(c, d, other_i) == 0.0 && on_segment(c, d, other_i) && other_i != shared
                {
                    return false;
                }
            } else if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

fn point_on_ring(ring: &[GeoPoint], p: &GeoPoint) -> bool {
    edges(ring).any(|(a, b)| on_segment(a, b, p))
}

/// Inclusive point-in-ring via boundary check plus crossing number.
fn point_in_ring(ring: &[GeoPoint], p: &GeoPoint) -> bool {
    if point_on_ring(ring, p) {
        return true;
    }
    let mut inside = false;
    for (a, b) in edges(ring) {
        if (a.y > p.y) != (b.y > p.y) {
            let x_cross = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
            if p.x < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// True iff the polygon's area (boundary included) meets the box.
pub fn polygon_intersects_bbox(p: &Polygon, b: &BBox) -> bool {
    if !p.bbox().intersects(b) {
        return false;
    }
    if p.exterior.iter().any(|v| b.contains_point(v)) {
        return true;
    }
    let corners = b.corners();
    if corners.iter().any(|c| p.contains_point(c)) {
        return true;
    }
    let box_edges: Vec<_> = (0..4).map(|i| (corners[i], corners[(i + 1) % 4])).collect();
    p.rings().any(|ring| {
        edges(ring).any(|(a, c)| {
            box_edges
                .iter()
                .any(|(e0, e1)| segments_intersect(a, c, e0, e1))
        })
    })
}

/// True iff two polygons share any point.
pub fn polygons_intersect(a: &Polygon, b: &Polygon) -> bool {
    if !a.bbox().intersects(&b.bbox()) {
        return false;
    }
    if a.rings().flatten().any(|v| b.contains_point(v)) {
        return true;
    }
    if b.rings().flatten().any(|v| a.contains_point(v)) {
        return true;
    }
    a.rings().any(|ra| {
        edges(ra).any(|(p, q)| b.rings().any(|rb| edges(rb).any(|(r, s)| segments_intersect(p, q, r, s))))
    })
}

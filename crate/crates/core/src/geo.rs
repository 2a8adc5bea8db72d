//! Geodesic primitives shared by every other module.
//!
//! Distances are great-circle (haversine) on a sphere of radius
//! [`EARTH_RADIUS_M`]. Polygon membership and edge interpolation happen in a
//! local equirectangular projection centered on the polygon's vertex mean;
//! regions handled here span a few kilometres, where the projection error is
//! far below GPS noise.

use alloc::vec::Vec;
use core::fmt;
use core::str::FromStr;

use libm::{asin, cos, fabs, floor, round, sin, sqrt};
use thiserror::Error;

/// Mean Earth radius in metres.
pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

/// Side of the coarse distribution cells, in degrees.
pub const COARSE_CELL_DEG: f64 = 0.2;

/// Metres per degree of latitude on the reference sphere.
pub const METERS_PER_DEGREE: f64 = EARTH_RADIUS_M * core::f64::consts::PI / 180.0;

// Points closer than this to an edge (in projected metres) are on the boundary.
const BOUNDARY_EPS_M: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("latitude {0} outside [-90, 90]")]
    Latitude(f64),
    #[error("longitude {0} outside [-180, 180]")]
    Longitude(f64),
    #[error("polygon needs at least 3 vertices, got {0}")]
    TooFewVertices(usize),
    #[error("polygon has repeated consecutive vertex at index {0}")]
    RepeatedVertex(usize),
    #[error("polygon has zero area")]
    Degenerate,
    #[error("polygon ring self-intersects (edges {0} and {1})")]
    SelfIntersecting(usize, usize),
    #[error("polygon crosses the antimeridian")]
    Antimeridian,
    #[error("bounding box min exceeds max")]
    InvertedBox,
    #[error("malformed cell id {0:?}")]
    MalformedCell(alloc::string::String),
}

/// A validated latitude/longitude pair in degrees.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
}

impl GeoPoint {
    pub fn new(lat: f64, lon: f64) -> Result<Self, GeoError> {
        if !lat.is_finite() || !(-90.0..=90.0).contains(&lat) {
            return Err(GeoError::Latitude(lat));
        }
        if !lon.is_finite() || !(-180.0..=180.0).contains(&lon) {
            return Err(GeoError::Longitude(lon));
        }
        Ok(Self { lat, lon })
    }

    // Callers guarantee the range; used for values produced by clamping.
    fn clamped(lat: f64, lon: f64) -> Self {
        Self {
            lat: lat.clamp(-90.0, 90.0),
            lon: lon.clamp(-180.0, 180.0),
        }
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }
}

/// Great-circle distance in metres.
pub fn haversine(a: GeoPoint, b: GeoPoint) -> f64 {
    let lat1 = a.lat.to_radians();
    let lat2 = b.lat.to_radians();
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();
    let s1 = sin(dlat / 2.0);
    let s2 = sin(dlon / 2.0);
    let h = s1 * s1 + cos(lat1) * cos(lat2) * s2 * s2;
    2.0 * EARTH_RADIUS_M * asin(sqrt(h.clamp(0.0, 1.0)))
}

/// Equirectangular projection to metres around a fixed origin.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LocalProjection {
    origin: GeoPoint,
    cos_lat: f64,
}

impl LocalProjection {
    pub fn new(origin: GeoPoint) -> Self {
        Self {
            origin,
            cos_lat: cos(origin.lat.to_radians()),
        }
    }

    pub fn origin(&self) -> GeoPoint {
        self.origin
    }

    /// Returns `(east, north)` in metres.
    pub fn to_xy(&self, p: GeoPoint) -> (f64, f64) {
        let x = (p.lon - self.origin.lon) * self.cos_lat * METERS_PER_DEGREE;
        let y = (p.lat - self.origin.lat) * METERS_PER_DEGREE;
        (x, y)
    }

    pub fn to_geo(&self, x: f64, y: f64) -> GeoPoint {
        let lat = self.origin.lat + y / METERS_PER_DEGREE;
        let lon = self.origin.lon + x / (self.cos_lat * METERS_PER_DEGREE);
        GeoPoint::clamped(lat, lon)
    }
}

/// A simple, implicitly closed polygon ring.
#[derive(Debug, Clone, PartialEq)]
pub struct GeoPolygon {
    vertices: Vec<GeoPoint>,
    projection: LocalProjection,
    projected: Vec<(f64, f64)>,
}

impl GeoPolygon {
    pub fn new(vertices: Vec<GeoPoint>) -> Result<Self, GeoError> {
        let n = vertices.len();
        if n < 3 {
            return Err(GeoError::TooFewVertices(n));
        }
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(GeoError::RepeatedVertex(i));
            }
        }
        let (min_lon, max_lon) = vertices
            .iter()
            .fold((f64::MAX, f64::MIN), |(lo, hi), v| (lo.min(v.lon), hi.max(v.lon)));
        if max_lon - min_lon > 180.0 {
            return Err(GeoError::Antimeridian);
        }

        let inv = 1.0 / n as f64;
        let (slat, slon) = vertices
            .iter()
            .fold((0.0, 0.0), |(a, b), v| (a + v.lat, b + v.lon));
        let projection = LocalProjection::new(GeoPoint::clamped(slat * inv, slon * inv));
        let projected: Vec<(f64, f64)> = vertices.iter().map(|v| projection.to_xy(*v)).collect();

        for i in 0..n {
            for j in (i + 1)..n {
                // adjacent edges share a vertex
                if j == i + 1 || (i == 0 && j == n - 1) {
                    continue;
                }
                let (a, b) = (projected[i], projected[(i + 1) % n]);
                let (c, d) = (projected[j], projected[(j + 1) % n]);
                if segments_intersect(a, b, c, d) {
                    return Err(GeoError::SelfIntersecting(i, j));
                }
            }
        }

        // checked after simplicity so a bow-tie reports as self-intersecting
        let area = shoelace(&projected);
        if fabs(area) < 1e-6 {
            return Err(GeoError::Degenerate);
        }
        Ok(Self {
            vertices,
            projection,
            projected,
        })
    }

    pub fn vertices(&self) -> &[GeoPoint] {
        &self.vertices
    }

    pub fn projection(&self) -> &LocalProjection {
        &self.projection
    }

    /// Vertex mean, the origin of the local projection.
    pub fn centroid(&self) -> GeoPoint {
        self.projection.origin
    }

    pub fn bounding_box(&self) -> BoundingBox {
        BoundingBox::from_points(self.vertices.iter().copied()).expect("polygon has vertices")
    }

    /// Area in square metres in the local projection.
    pub fn area_m2(&self) -> f64 {
        fabs(shoelace(&self.projected))
    }

    fn edges(&self) -> impl Iterator<Item = ((f64, f64), (f64, f64))> + '_ {
        let n = self.projected.len();
        (0..n).map(move |i| (self.projected[i], self.projected[(i + 1) % n]))
    }
}

fn shoelace(ring: &[(f64, f64)]) -> f64 {
    let n = ring.len();
    let mut acc = 0.0;
    for i in 0..n {
        let (x1, y1) = ring[i];
        let (x2, y2) = ring[(i + 1) % n];
        acc += x1 * y2 - x2 * y1;
    }
    acc / 2.0
}

fn orient(a: (f64, f64), b: (f64, f64), c: (f64, f64)) -> f64 {
    (b.0 - a.0) * (c.1 - a.1) - (b.1 - a.1) * (c.0 - a.0)
}

fn on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> bool {
    p.0 >= a.0.min(b.0) && p.0 <= a.0.max(b.0) && p.1 >= a.1.min(b.1) && p.1 <= a.1.max(b.1)
}

fn segments_intersect(a: (f64, f64), b: (f64, f64), c: (f64, f64), d: (f64, f64)) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0))
        && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0))
    {
        return true;
    }
    (d1 == 0.0 && on_segment(c, d, a))
        || (d2 == 0.0 && on_segment(c, d, b))
        || (d3 == 0.0 && on_segment(a, b, c))
        || (d4 == 0.0 && on_segment(a, b, d))
}

/// Closest point on segment `ab` to `p`, all in projected metres.
fn closest_on_segment(a: (f64, f64), b: (f64, f64), p: (f64, f64)) -> (f64, f64) {
    let (dx, dy) = (b.0 - a.0, b.1 - a.1);
    let len2 = dx * dx + dy * dy;
    if len2 == 0.0 {
        return a;
    }
    let t = (((p.0 - a.0) * dx + (p.1 - a.1) * dy) / len2).clamp(0.0, 1.0);
    (a.0 + t * dx, a.1 + t * dy)
}

/// Even-odd membership; points on the boundary are inside.
pub fn point_in_polygon(p: GeoPoint, poly: &GeoPolygon) -> bool {
    let q = poly.projection.to_xy(p);
    let mut inside = false;
    for (a, b) in poly.edges() {
        let c = closest_on_segment(a, b, q);
        let (ex, ey) = (c.0 - q.0, c.1 - q.1);
        if sqrt(ex * ex + ey * ey) <= BOUNDARY_EPS_M {
            return true;
        }
        if (a.1 > q.1) != (b.1 > q.1) {
            let x_cross = a.0 + (q.1 - a.1) * (b.0 - a.0) / (b.1 - a.1);
            if q.0 < x_cross {
                inside = !inside;
            }
        }
    }
    inside
}

/// Zero inside the polygon, otherwise the haversine distance to the nearest
/// edge point (nearest point chosen in the local projection).
pub fn distance_to_polygon(p: GeoPoint, poly: &GeoPolygon) -> f64 {
    if point_in_polygon(p, poly) {
        return 0.0;
    }
    let q = poly.projection.to_xy(p);
    poly.edges()
        .map(|(a, b)| {
            let (x, y) = closest_on_segment(a, b, q);
            haversine(p, poly.projection.to_geo(x, y))
        })
        .fold(f64::INFINITY, f64::min)
}

fn snap(x: f64, cell: f64) -> f64 {
    let k = round(x / cell);
    // Dividing by an integral inverse gives the double nearest to k*cell, so
    // decimal cells print without trailing noise.
    let inv = 1.0 / cell;
    let inv_r = round(inv);
    if inv_r >= 1.0 && fabs(inv - inv_r) < 1e-9 {
        k / inv_r
    } else {
        k * cell
    }
}

/// Snaps each coordinate to the nearest multiple of `cell` degrees, rounding
/// halves away from zero.
pub fn grid_round(p: GeoPoint, cell: f64) -> GeoPoint {
    assert!(cell > 0.0, "grid cell must be positive");
    GeoPoint::clamped(snap(p.lat, cell), snap(p.lon, cell))
}

/// True when `x` is a multiple of `cell` up to float representation error.
pub fn is_on_grid(x: f64, cell: f64) -> bool {
    let r = x / cell;
    fabs(r - round(r)) < 1e-6
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub min_lat: f64,
    pub min_lon: f64,
    pub max_lat: f64,
    pub max_lon: f64,
}

impl BoundingBox {
    pub fn new(min_lat: f64, min_lon: f64, max_lat: f64, max_lon: f64) -> Result<Self, GeoError> {
        GeoPoint::new(min_lat, min_lon)?;
        GeoPoint::new(max_lat, max_lon)?;
        if min_lat > max_lat || min_lon > max_lon {
            return Err(GeoError::InvertedBox);
        }
        Ok(Self {
            min_lat,
            min_lon,
            max_lat,
            max_lon,
        })
    }

    pub fn from_points(points: impl IntoIterator<Item = GeoPoint>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Self {
            min_lat: first.lat,
            min_lon: first.lon,
            max_lat: first.lat,
            max_lon: first.lon,
        };
        for p in it {
            b.min_lat = b.min_lat.min(p.lat);
            b.min_lon = b.min_lon.min(p.lon);
            b.max_lat = b.max_lat.max(p.lat);
            b.max_lon = b.max_lon.max(p.lon);
        }
        Some(b)
    }

    pub fn diagonal_m(&self) -> f64 {
        haversine(
            GeoPoint::clamped(self.min_lat, self.min_lon),
            GeoPoint::clamped(self.max_lat, self.max_lon),
        )
    }
}

/// Haversine between the box's south-west and north-east corners.
pub fn bbox_diagonal(b: &BoundingBox) -> f64 {
    b.diagonal_m()
}

/// A cell of the coarse 0.2° lattice used to route call-to-action downloads.
/// Text form is `"<lat index>:<lon index>"`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct CoarseCell {
    pub lat_idx: i32,
    pub lon_idx: i32,
}

impl CoarseCell {
    pub fn containing(p: GeoPoint) -> Self {
        Self {
            lat_idx: floor(p.lat / COARSE_CELL_DEG) as i32,
            lon_idx: floor(p.lon / COARSE_CELL_DEG) as i32,
        }
    }

    /// All cells intersecting the box.
    pub fn covering(b: &BoundingBox) -> Vec<Self> {
        let lo = Self::containing(GeoPoint::clamped(b.min_lat, b.min_lon));
        let hi = Self::containing(GeoPoint::clamped(b.max_lat, b.max_lon));
        let mut out = Vec::new();
        for lat_idx in lo.lat_idx..=hi.lat_idx {
            for lon_idx in lo.lon_idx..=hi.lon_idx {
                out.push(Self { lat_idx, lon_idx });
            }
        }
        out
    }
}

impl fmt::Display for CoarseCell {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.lat_idx, self.lon_idx)
    }
}

impl FromStr for CoarseCell {
    type Err = GeoError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let bad = || GeoError::MalformedCell(s.into());
        let (a, b) = s.split_once(':').ok_or_else(bad)?;
        let lat_idx: i32 = a.trim().parse().map_err(|_| bad())?;
        let lon_idx: i32 = b.trim().parse().map_err(|_| bad())?;
        let max_lat = (90.0 / COARSE_CELL_DEG) as i32;
        let max_lon = (180.0 / COARSE_CELL_DEG) as i32;
        if !(-max_lat..=max_lat).contains(&lat_idx) || !(-max_lon..=max_lon).contains(&lon_idx) {
            return Err(bad());
        }
        Ok(Self { lat_idx, lon_idx })
    }
}

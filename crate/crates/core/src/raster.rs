//! Simple polygons and their even-odd rasterization onto pixel centers.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{Dims, Mask};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

fn cross(o: Point, a: Point, b: Point) -> f64 {
    (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
}

fn on_segment(p: Point, a: Point, b: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

/// Closed segments `ab` and `cd` share at least one point.
fn segments_touch(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = cross(c, d, a);
    let d2 = cross(c, d, b);
    let d3 = cross(a, b, c);
    let d4 = cross(a, b, d);
    if ((d1 > 0.0 && d2 < 0.0) || (d1 < 0.0 && d2 > 0.0)) && ((d3 > 0.0 && d4 < 0.0) || (d3 < 0.0 && d4 > 0.0)) {
        return true;
    }
    (d1 == 0.0 && on_segment(a, c, d))
        || (d2 == 0.0 && on_segment(b, c, d))
        || (d3 == 0.0 && on_segment(c, a, b))
        || (d4 == 0.0 && on_segment(d, a, b))
}

/// A simple closed polygon; the last vertex connects back to the first.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Validates and builds a polygon. Rejects fewer than three vertices,
    /// repeated consecutive vertices, zero area, and self-intersections.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        let n = vertices.len();
        if n < 3 {
            return Err(Error::validation(format!("polygon needs at least 3 vertices, got {n}")));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::validation("polygon has non-finite vertex"));
        }
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(Error::validation(format!(
                    "polygon has duplicate consecutive vertex at {i}"
                )));
            }
        }
        let poly = Polygon { vertices };
        if poly.signed_area() == 0.0 {
            return Err(Error::validation("polygon has zero area"));
        }
        if poly.is_self_intersecting() {
            return Err(Error::validation("polygon is self-intersecting"));
        }
        Ok(poly)
    }

    #[inline]
    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    fn edge(&self, i: usize) -> (Point, Point) {
        let n = self.vertices.len();
        (self.vertices[i], self.vertices[(i + 1) % n])
    }

    /// Positive for counter-clockwise orientation in a y-up frame.
    pub fn signed_area(&self) -> f64 {
        let n = self.vertices.len();
        let mut acc = 0.0;
        for i in 0..n {
            let (a, b) = self.edge(i);
            acc += a.x * b.y - b.x * a.y;
        }
        acc / 2.0
    }

    pub fn area(&self) -> f64 {
        self.signed_area().abs()
    }

    pub fn perimeter(&self) -> f64 {
        (0..self.vertices.len())
            .map(|i| {
                let (a, b) = self.edge(i);
                (b.x - a.x).hypot(b.y - a.y)
            })
            .sum()
    }

    /// Axis-aligned bounding box `(min, max)`.
    pub fn bounds(&self) -> (Point, Point) {
        let mut lo = self.vertices[0];
        let mut hi = self.vertices[0];
        for p in &self.vertices[1..] {
            lo.x = lo.x.min(p.x);
            lo.y = lo.y.min(p.y);
            hi.x = hi.x.max(p.x);
            hi.y = hi.y.max(p.y);
        }
        (lo, hi)
    }

    fn is_self_intersecting(&self) -> bool {
        let n = self.vertices.len();
        for i in 0..n {
            let (a, b) = self.edge(i);
            // adjacent edge folding back onto this one
            let (_, c) = self.edge((i + 1) % n);
            if cross(a, b, c) == 0.0 {
                let dot = (b.x - a.x) * (c.x - b.x) + (b.y - a.y) * (c.y - b.y);
                if dot < 0.0 {
                    return true;
                }
            }
            for j in i + 2..n {
                if i == 0 && j == n - 1 {
                    continue;
                }
                let (c, d) = self.edge(j);
                if segments_touch(a, b, c, d) {
                    return true;
                }
            }
        }
        false
    }

    /// Even-odd crossing test. Points on a left or bottom edge count as
    /// inside, points on a right or top edge as outside.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let (a, b) = self.edge(i);
            if (a.y > p.y) != (b.y > p.y) && p.x < crossing_x(a, b, p.y) {
                inside = !inside;
            }
        }
        inside
    }
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;

    fn try_from(vertices: Vec<Point>) -> Result<Self> {
        Polygon::new(vertices)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

#[inline]
fn crossing_x(a: Point, b: Point, y: f64) -> f64 {
    (b.x - a.x) * (y - a.y) / (b.y - a.y) + a.x
}

/// Pixels whose center lies inside `poly` under the even-odd rule.
///
/// Scanline form of [`Polygon::contains`] evaluated at every pixel center;
/// both use the same crossing arithmetic so they agree bit-for-bit.
pub fn rasterize_polygon(poly: &Polygon, dims: Dims) -> Result<Mask> {
    let mut mask = Mask::empty(dims);
    let n = poly.vertices.len();
    let mut xs: Vec<f64> = Vec::with_capacity(n);
    let (lo, hi) = poly.bounds();
    let row_lo = (lo.y - 0.5).floor().max(0.0) as usize;
    let row_hi = ((hi.y - 0.5).ceil().max(0.0) as usize).min(dims.height.saturating_sub(1));
    for row in row_lo..=row_hi {
        let py = row as f64 + 0.5;
        xs.clear();
        for i in 0..n {
            let (a, b) = poly.edge(i);
            if (a.y > py) != (b.y > py) {
                xs.push(crossing_x(a, b, py));
            }
        }
        if xs.is_empty() {
            continue;
        }
        xs.sort_by(f64::total_cmp);
        // inside iff xs[2k] <= center < xs[2k+1]
        for span in xs.chunks_exact(2) {
            let start = (span[0] - 0.5).ceil().max(0.0);
            let mut col = start as usize;
            while col < dims.width {
                let px = col as f64 + 0.5;
                if px >= span[1] {
                    break;
                }
                if px >= span[0] {
                    mask.set(dims.index(col, row), true);
                }
                col += 1;
            }
        }
    }
    Ok(mask)
}

/// Clips a convex polygon (given as a vertex ring) to the half-plane
/// `n·p >= c`.
pub(crate) fn clip_half_plane(ring: &[Point], nx: f64, ny: f64, c: f64) -> Vec<Point> {
    let mut out = Vec::with_capacity(ring.len() + 1);
    let n = ring.len();
    for i in 0..n {
        let a = ring[i];
        let b = ring[(i + 1) % n];
        let da = nx * a.x + ny * a.y - c;
        let db = nx * b.x + ny * b.y - c;
        if da >= 0.0 {
            out.push(a);
        }
        if (da >= 0.0) != (db >= 0.0) {
            let t = da / (da - db);
            out.push(Point::new(a.x + t * (b.x - a.x), a.y + t * (b.y - a.y)));
        }
    }
    out
}

/// Polygon from a clipped ring after dropping near-duplicate vertices;
/// `None` if nothing with positive area is left.
pub(crate) fn polygon_from_ring(ring: Vec<Point>) -> Option<Polygon> {
    let close = |p: &Point, q: &Point| (p.x - q.x).abs() <= 1e-9 && (p.y - q.y).abs() <= 1e-9;
    let mut clean: Vec<Point> = Vec::with_capacity(ring.len());
    for p in ring {
        if clean.last().is_none_or(|q| !close(&p, q)) {
            clean.push(p);
        }
    }
    while clean.len() > 1 && close(&clean[0], &clean[clean.len() - 1]) {
        clean.pop();
    }
    Polygon::new(clean).ok().filter(|p| p.area() > 1e-6)
}

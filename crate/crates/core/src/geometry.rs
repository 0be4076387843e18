//! Planar polygon kernel in a local meter frame.
//!
//! Everything here is a pure function of its inputs. Polygons are simple,
//! hole-free rings stored counter-clockwise without a repeated closing vertex.

use std::f64::consts::FRAC_PI_2;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Rings with less area than this are rejected as degenerate.
pub const MIN_AREA: f64 = 1e-9;

const EPS: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Default, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, o: Point) -> Point {
        Point::new(self.x - o.x, self.y - o.y)
    }

    pub fn add(self, o: Point) -> Point {
        Point::new(self.x + o.x, self.y + o.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn dot(self, o: Point) -> f64 {
        self.x * o.x + self.y * o.y
    }

    pub fn cross(self, o: Point) -> f64 {
        self.x * o.y - self.y * o.x
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }

    pub fn distance(self, o: Point) -> f64 {
        self.sub(o).norm()
    }

    /// Counter-clockwise quarter turn.
    pub fn perp(self) -> Point {
        Point::new(-self.y, self.x)
    }

    pub fn rotate(self, angle: f64) -> Point {
        let (s, c) = angle.sin_cos();
        Point::new(c * self.x - s * self.y, s * self.x + c * self.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from(v: [f64; 2]) -> Self {
        Point::new(v[0], v[1])
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

/// Signed shoelace area of a ring; positive when counter-clockwise.
pub fn signed_area(ring: &[Point]) -> f64 {
    if ring.len() < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..ring.len() {
        let a = ring[i];
        let b = ring[(i + 1) % ring.len()];
        acc += a.cross(b);
    }
    0.5 * acc
}

/// A simple, counter-clockwise polygon with at least three vertices.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<Point>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

impl Polygon {
    /// Validates and normalizes a ring: repeated vertices (including an
    /// explicit closing vertex) are dropped, self-intersecting and
    /// zero-area rings are rejected, orientation is made counter-clockwise.
    pub fn new(vertices: Vec<Point>) -> Result<Self> {
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(Error::DegenerateGeometry("non-finite coordinate".into()));
        }
        let mut ring: Vec<Point> = Vec::with_capacity(vertices.len());
        for p in vertices {
            if ring.last().is_none_or(|q| q.distance(p) > EPS) {
                ring.push(p);
            }
        }
        while ring.len() > 1 && ring[0].distance(ring[ring.len() - 1]) <= EPS {
            ring.pop();
        }
        if ring.len() < 3 {
            return Err(Error::DegenerateGeometry(format!(
                "ring has {} distinct vertices",
                ring.len()
            )));
        }
        let area = signed_area(&ring);
        if area.abs() < MIN_AREA {
            return Err(Error::DegenerateGeometry(format!(
                "ring area {area:e} below {MIN_AREA:e}"
            )));
        }
        if self_intersects(&ring) {
            return Err(Error::DegenerateGeometry("self-intersecting ring".into()));
        }
        if area < 0.0 {
            ring.reverse();
        }
        Ok(Self { vertices: ring })
    }

    /// Axis-aligned rectangle spanning the two corners.
    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self> {
        Polygon::new(vec![
            Point::new(x0, y0),
            Point::new(x1, y0),
            Point::new(x1, y1),
            Point::new(x0, y1),
        ])
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    pub fn len(&self) -> usize {
        self.vertices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.vertices.is_empty()
    }

    pub fn area(&self) -> f64 {
        signed_area(&self.vertices)
    }

    /// Area-weighted centroid.
    pub fn centroid(&self) -> Point {
        let v = &self.vertices;
        let origin = v[0];
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..v.len() {
            let p = v[i].sub(origin);
            let q = v[(i + 1) % v.len()].sub(origin);
            let c = p.cross(q);
            a2 += c;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point::new(origin.x + cx / (3.0 * a2), origin.y + cy / (3.0 * a2))
    }

    pub fn bbox(&self) -> (Point, Point) {
        bbox(&self.vertices)
    }

    pub fn is_convex(&self) -> bool {
        is_convex_ring(&self.vertices)
    }

    pub fn translate(&self, d: Point) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|p| p.add(d)).collect(),
        }
    }

    /// Rotation about `pivot`; orientation and simplicity are preserved.
    pub fn rotate_about(&self, pivot: Point, angle: f64) -> Polygon {
        Polygon {
            vertices: self
                .vertices
                .iter()
                .map(|p| p.sub(pivot).rotate(angle).add(pivot))
                .collect(),
        }
    }

    /// Even-odd ray cast; boundary points may land on either side.
    pub fn contains(&self, p: Point) -> bool {
        let v = &self.vertices;
        let mut inside = false;
        let mut j = v.len() - 1;
        for i in 0..v.len() {
            let (a, b) = (v[i], v[j]);
            if (a.y > p.y) != (b.y > p.y) {
                let x = a.x + (p.y - a.y) * (b.x - a.x) / (b.y - a.y);
                if p.x < x {
                    inside = !inside;
                }
            }
            j = i;
        }
        inside
    }

    /// Distance from `p` to the ring boundary.
    pub fn boundary_distance(&self, p: Point) -> f64 {
        self.edges()
            .map(|(a, b)| point_segment_distance(p, a, b))
            .fold(f64::INFINITY, f64::min)
    }

    /// Zero when `p` is inside, otherwise the distance to the boundary.
    pub fn distance_to_point(&self, p: Point) -> f64 {
        if self.contains(p) {
            0.0
        } else {
            self.boundary_distance(p)
        }
    }

    pub fn edges(&self) -> impl Iterator<Item = (Point, Point)> + '_ {
        let v = &self.vertices;
        (0..v.len()).map(move |i| (v[i], v[(i + 1) % v.len()]))
    }
}

fn bbox(pts: &[Point]) -> (Point, Point) {
    let mut lo = Point::new(f64::INFINITY, f64::INFINITY);
    let mut hi = Point::new(f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in pts {
        lo.x = lo.x.min(p.x);
        lo.y = lo.y.min(p.y);
        hi.x = hi.x.max(p.x);
        hi.y = hi.y.max(p.y);
    }
    (lo, hi)
}

fn is_convex_ring(v: &[Point]) -> bool {
    let n = v.len();
    let scale = {
        let (lo, hi) = bbox(v);
        hi.sub(lo).norm().max(1.0)
    };
    let tol = 1e-12 * scale * scale;
    let mut sign = 0.0;
    for i in 0..n {
        let a = v[i];
        let b = v[(i + 1) % n];
        let c = v[(i + 2) % n];
        let cr = b.sub(a).cross(c.sub(b));
        if cr.abs() <= tol {
            continue;
        }
        if sign == 0.0 {
            sign = cr.signum();
        } else if cr.signum() != sign {
            return false;
        }
    }
    true
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) - EPS
        && p.x <= a.x.max(b.x) + EPS
        && p.y >= a.y.min(b.y) - EPS
        && p.y <= a.y.max(b.y) + EPS
}

/// Closed-segment intersection test, collinear overlaps included.
pub fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let d1 = orient(c, d, a);
    let d2 = orient(c, d, b);
    let d3 = orient(a, b, c);
    let d4 = orient(a, b, d);
    if ((d1 > EPS && d2 < -EPS) || (d1 < -EPS && d2 > EPS))
        && ((d3 > EPS && d4 < -EPS) || (d3 < -EPS && d4 > EPS))
    {
        return true;
    }
    (d1.abs() <= EPS && on_segment(c, d, a))
        || (d2.abs() <= EPS && on_segment(c, d, b))
        || (d3.abs() <= EPS && on_segment(a, b, c))
        || (d4.abs() <= EPS && on_segment(a, b, d))
}

fn self_intersects(v: &[Point]) -> bool {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        for j in (i + 1)..n {
            // Adjacent edges share a vertex by construction.
            if j == i + 1 || (i == 0 && j == n - 1) {
                // Adjacent edges may still fold back onto each other.
                let (c, d) = (v[j], v[(j + 1) % n]);
                let shared = if j == i + 1 { b } else { a };
                let other_first = if j == i + 1 { a } else { b };
                let other_second = if j == i + 1 { d } else { c };
                if orient(shared, other_first, other_second).abs() <= EPS
                    && other_first.sub(shared).dot(other_second.sub(shared)) > 0.0
                {
                    return true;
                }
                continue;
            }
            let (c, d) = (v[j], v[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return true;
            }
        }
    }
    false
}

pub fn point_segment_distance(p: Point, a: Point, b: Point) -> f64 {
    let ab = b.sub(a);
    let len2 = ab.dot(ab);
    if len2 <= 0.0 {
        return p.distance(a);
    }
    let t = (p.sub(a).dot(ab) / len2).clamp(0.0, 1.0);
    p.distance(a.add(ab.scale(t)))
}

pub fn segment_distance(a: Point, b: Point, c: Point, d: Point) -> f64 {
    if segments_intersect(a, b, c, d) {
        return 0.0;
    }
    point_segment_distance(a, c, d)
        .min(point_segment_distance(b, c, d))
        .min(point_segment_distance(c, a, b))
        .min(point_segment_distance(d, a, b))
}

/// Minimum distance between two polygon regions (zero when they touch or overlap).
pub fn polygon_gap(a: &Polygon, b: &Polygon) -> f64 {
    if a.contains(b.vertices[0]) || b.contains(a.vertices[0]) {
        return 0.0;
    }
    let mut best = f64::INFINITY;
    for (p, q) in a.edges() {
        for (r, s) in b.edges() {
            best = best.min(segment_distance(p, q, r, s));
            if best == 0.0 {
                return 0.0;
            }
        }
    }
    best
}

/// Shoelace area of a validated polygon.
pub fn polygon_area(p: &Polygon) -> f64 {
    p.area()
}

/// Convex hull by monotone chain; collinear hull points are dropped.
pub fn convex_hull(p: &Polygon) -> Result<Polygon> {
    hull_of_points(p.vertices())
}

pub fn hull_of_points(points: &[Point]) -> Result<Polygon> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    pts.dedup_by(|a, b| a.distance(*b) <= EPS);
    if pts.len() < 3 {
        return Err(Error::DegenerateGeometry("hull of fewer than 3 points".into()));
    }
    let mut lower: Vec<Point> = Vec::new();
    for &p in &pts {
        while lower.len() >= 2 && orient(lower[lower.len() - 2], lower[lower.len() - 1], p) <= 0.0 {
            lower.pop();
        }
        lower.push(p);
    }
    let mut upper: Vec<Point> = Vec::new();
    for &p in pts.iter().rev() {
        while upper.len() >= 2 && orient(upper[upper.len() - 2], upper[upper.len() - 1], p) <= 0.0 {
            upper.pop();
        }
        upper.push(p);
    }
    lower.pop();
    upper.pop();
    lower.extend(upper);
    Polygon::new(lower)
}

/// Clips `subject` against the convex counter-clockwise ring `clip`.
pub fn clip_convex(subject: &[Point], clip: &[Point]) -> Vec<Point> {
    let mut output = subject.to_vec();
    let n = clip.len();
    for i in 0..n {
        if output.is_empty() {
            break;
        }
        let a = clip[i];
        let b = clip[(i + 1) % n];
        let input = std::mem::take(&mut output);
        let inside = |p: Point| orient(a, b, p) >= 0.0;
        for k in 0..input.len() {
            let cur = input[k];
            let prev = input[(k + input.len() - 1) % input.len()];
            let (ci, pi) = (inside(cur), inside(prev));
            if ci {
                if !pi {
                    output.push(line_intersection(prev, cur, a, b));
                }
                output.push(cur);
            } else if pi {
                output.push(line_intersection(prev, cur, a, b));
            }
        }
    }
    output
}

fn line_intersection(p: Point, q: Point, a: Point, b: Point) -> Point {
    let r = q.sub(p);
    let s = b.sub(a);
    let denom = r.cross(s);
    if denom.abs() < 1e-300 {
        return p;
    }
    let t = a.sub(p).cross(s) / denom;
    p.add(r.scale(t))
}

/// Ear-clipping triangulation of a simple counter-clockwise ring.
pub fn triangulate(p: &Polygon) -> Vec<[Point; 3]> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    let v = p.vertices();
    let mut tris = Vec::with_capacity(v.len().saturating_sub(2));
    let scale = {
        let (lo, hi) = p.bbox();
        hi.sub(lo).norm().max(1e-6)
    };
    let tol = 1e-14 * scale * scale;
    while idx.len() > 3 {
        let m = idx.len();
        let mut clipped = false;
        for k in 0..m {
            let a = v[idx[(k + m - 1) % m]];
            let b = v[idx[k]];
            let c = v[idx[(k + 1) % m]];
            let turn = orient(a, b, c);
            if turn.abs() <= tol {
                // Collinear vertex, no area to emit.
                idx.remove(k);
                clipped = true;
                break;
            }
            if turn < 0.0 {
                continue;
            }
            let blocked = idx.iter().any(|&j| {
                let q = v[j];
                q != a && q != b && q != c && point_in_triangle(q, a, b, c)
            });
            if !blocked {
                tris.push([a, b, c]);
                idx.remove(k);
                clipped = true;
                break;
            }
        }
        if !clipped {
            // Numerical corner case: emit the most convex corner.
            let k = (0..m)
                .max_by(|&i, &j| {
                    let t = |k: usize| orient(v[idx[(k + m - 1) % m]], v[idx[k]], v[idx[(k + 1) % m]]);
                    t(i).total_cmp(&t(j))
                })
                .unwrap_or(0);
            tris.push([v[idx[(k + m - 1) % m]], v[idx[k]], v[idx[(k + 1) % m]]]);
            idx.remove(k);
        }
    }
    if idx.len() == 3 {
        tris.push([v[idx[0]], v[idx[1]], v[idx[2]]]);
    }
    tris
}

fn point_in_triangle(p: Point, a: Point, b: Point, c: Point) -> bool {
    orient(a, b, p) >= 0.0 && orient(b, c, p) >= 0.0 && orient(c, a, p) >= 0.0
}

fn bboxes_overlap(a: (Point, Point), b: (Point, Point)) -> bool {
    a.0.x <= b.1.x && b.0.x <= a.1.x && a.0.y <= b.1.y && b.0.y <= a.1.y
}

/// Area of `a ∩ b`. Uses a single Sutherland–Hodgman pass when either operand
/// is convex, otherwise sums clipped areas over ear-clipped triangles.
pub fn intersection_area(a: &Polygon, b: &Polygon) -> f64 {
    if !bboxes_overlap(a.bbox(), b.bbox()) {
        return 0.0;
    }
    let area = if b.is_convex() {
        signed_area(&clip_convex(a.vertices(), b.vertices()))
    } else if a.is_convex() {
        signed_area(&clip_convex(b.vertices(), a.vertices()))
    } else {
        let tb = triangulate(b);
        let boxes: Vec<_> = tb.iter().map(|t| bbox(t)).collect();
        let mut acc = 0.0;
        for ta in triangulate(a) {
            let ba = bbox(&ta);
            for (t, bb) in tb.iter().zip(&boxes) {
                if bboxes_overlap(ba, *bb) {
                    acc += signed_area(&clip_convex(&ta, t));
                }
            }
        }
        acc
    };
    area.max(0.0).min(a.area().min(b.area()))
}

/// Oriented rectangle: `origin + s·width·axes[0] + t·height·axes[1]` maps the
/// unit square onto the rectangle.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OrientedFrame {
    pub origin: Point,
    pub axes: [Point; 2],
    pub extent: [f64; 2],
}

impl OrientedFrame {
    pub fn width(&self) -> f64 {
        self.extent[0]
    }

    pub fn height(&self) -> f64 {
        self.extent[1]
    }

    pub fn area(&self) -> f64 {
        self.extent[0] * self.extent[1]
    }

    pub fn diagonal(&self) -> f64 {
        self.extent[0].hypot(self.extent[1])
    }

    /// Angle of the long axis, in `(-π/2, π/2]`.
    pub fn angle(&self) -> f64 {
        self.axes[0].y.atan2(self.axes[0].x)
    }

    /// World point to normalized frame coordinates.
    pub fn to_local(&self, p: Point) -> Point {
        let d = p.sub(self.origin);
        Point::new(
            d.dot(self.axes[0]) / self.extent[0],
            d.dot(self.axes[1]) / self.extent[1],
        )
    }

    /// Normalized frame coordinates to world point.
    pub fn to_world(&self, q: Point) -> Point {
        self.origin
            .add(self.axes[0].scale(q.x * self.extent[0]))
            .add(self.axes[1].scale(q.y * self.extent[1]))
    }

    /// World polygon of a frame-aligned box given in normalized coordinates.
    pub fn box_to_world(&self, center: Point, size: Point) -> Result<Polygon> {
        let (hw, hh) = (0.5 * size.x, 0.5 * size.y);
        Polygon::new(vec![
            self.to_world(Point::new(center.x - hw, center.y - hh)),
            self.to_world(Point::new(center.x + hw, center.y - hh)),
            self.to_world(Point::new(center.x + hw, center.y + hh)),
            self.to_world(Point::new(center.x - hw, center.y + hh)),
        ])
    }
}

fn canonical_axis(u: Point) -> Point {
    // Keep the axis angle inside (-π/2, π/2].
    let angle = u.y.atan2(u.x);
    let tol = 1e-9;
    if angle > FRAC_PI_2 + tol || angle <= -FRAC_PI_2 + tol {
        u.scale(-1.0)
    } else {
        u
    }
}

fn frame_along(points: &[Point], u: Point) -> OrientedFrame {
    let u = canonical_axis(u);
    let v = u.perp();
    let (mut umin, mut umax, mut vmin, mut vmax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        let a = p.dot(u);
        let b = p.dot(v);
        umin = umin.min(a);
        umax = umax.max(a);
        vmin = vmin.min(b);
        vmax = vmax.max(b);
    }
    OrientedFrame {
        origin: u.scale(umin).add(v.scale(vmin)),
        axes: [u, v],
        extent: [umax - umin, vmax - vmin],
    }
}

/// Minimum-area bounding rectangle over hull edge directions, long side first.
/// Ties between equal-area candidates go to the smaller long-axis angle
/// magnitude relative to +x.
pub fn oriented_bounding_frame(p: &Polygon) -> Result<OrientedFrame> {
    let hull = convex_hull(p)?;
    let pts = hull.vertices();
    let mut best: Option<OrientedFrame> = None;
    for (a, b) in hull.edges() {
        let d = b.sub(a);
        let len = d.norm();
        if len <= EPS {
            continue;
        }
        let dir = d.scale(1.0 / len);
        for axis in [dir, dir.perp()] {
            let f = frame_along(pts, axis);
            if f.extent[0] + 1e-9 * f.extent[0].max(1.0) < f.extent[1] {
                continue;
            }
            best = Some(match best {
                None => f,
                Some(cur) => {
                    let tol = 1e-9 * cur.area().max(1e-12);
                    if f.area() < cur.area() - tol
                        || ((f.area() - cur.area()).abs() <= tol
                            && f.angle().abs() < cur.angle().abs() - 1e-12)
                    {
                        f
                    } else {
                        cur
                    }
                }
            });
        }
    }
    let frame = best.ok_or_else(|| Error::DegenerateGeometry("no hull edges".into()))?;
    if frame.extent[1] <= 0.0 {
        return Err(Error::DegenerateGeometry("zero-height frame".into()));
    }
    Ok(frame)
}

/// Equirectangular projection of lon/lat degrees to meters about a reference point.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LocalProjection {
    pub lon0: f64,
    pub lat0: f64,
}

impl LocalProjection {
    pub const EARTH_RADIUS_M: f64 = 6_371_008.8;

    pub fn project(&self, lon: f64, lat: f64) -> Point {
        let k = Self::EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        Point::new(
            (lon - self.lon0) * k * self.lat0.to_radians().cos(),
            (lat - self.lat0) * k,
        )
    }

    pub fn unproject(&self, p: Point) -> (f64, f64) {
        let k = Self::EARTH_RADIUS_M * std::f64::consts::PI / 180.0;
        (
            self.lon0 + p.x / (k * self.lat0.to_radians().cos()),
            self.lat0 + p.y / k,
        )
    }
}

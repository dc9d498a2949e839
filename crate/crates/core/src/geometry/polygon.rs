use serde::{Deserialize, Serialize};

use super::GeometryError;

/// A point in pixel coordinates. `x` grows to the right, `y` grows downward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn sub(self, other: Point) -> Point {
        Point::new(self.x - other.x, self.y - other.y)
    }

    pub fn add(self, other: Point) -> Point {
        Point::new(self.x + other.x, self.y + other.y)
    }

    pub fn scale(self, s: f64) -> Point {
        Point::new(self.x * s, self.y * s)
    }

    pub fn cross(self, other: Point) -> f64 {
        self.x * other.y - self.y * other.x
    }

    pub fn dot(self, other: Point) -> f64 {
        self.x * other.x + self.y * other.y
    }

    pub fn norm(self) -> f64 {
        self.x.hypot(self.y)
    }
}

/// Shoelace area; positive for counter-clockwise vertex order.
pub fn signed_area(points: &[Point]) -> f64 {
    let n = points.len();
    if n < 3 {
        return 0.0;
    }
    let mut acc = 0.0;
    for i in 0..n {
        let a = points[i];
        let b = points[(i + 1) % n];
        acc += a.cross(b);
    }
    acc * 0.5
}

/// A simple polygon with positive signed area.
///
/// Construction normalizes the orientation, so callers may pass vertices in
/// either winding order.
#[derive(Debug, Clone, PartialEq)]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Validates vertex count, finiteness, non-zero area and simplicity.
    pub fn new(vertices: Vec<Point>) -> Result<Self, GeometryError> {
        let poly = Self::from_ring(vertices)?;
        if !is_simple(&poly.vertices) {
            return Err(GeometryError::SelfIntersecting);
        }
        Ok(poly)
    }

    /// Like [`Polygon::new`] but skips the O(n²) simplicity check.
    ///
    /// Used for boundaries traced from pixel masks, which can touch
    /// themselves at single corners.
    pub fn from_ring(mut vertices: Vec<Point>) -> Result<Self, GeometryError> {
        if vertices.len() >= 2 && vertices.first() == vertices.last() {
            vertices.pop();
        }
        if vertices.len() < 3 {
            return Err(GeometryError::TooFewVertices(vertices.len()));
        }
        if vertices.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
            return Err(GeometryError::NonFinite);
        }
        let area = signed_area(&vertices);
        if area == 0.0 || !area.is_finite() {
            return Err(GeometryError::Degenerate);
        }
        if area < 0.0 {
            vertices.reverse();
        }
        Ok(Self { vertices })
    }

    pub fn rect(x0: f64, y0: f64, x1: f64, y1: f64) -> Result<Self, GeometryError> {
        Self::new(vec![
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

    pub fn perimeter(&self) -> f64 {
        let n = self.vertices.len();
        (0..n)
            .map(|i| self.vertices[(i + 1) % n].sub(self.vertices[i]).norm())
            .sum()
    }

    /// Area-weighted centroid.
    pub fn centroid(&self) -> Point {
        let n = self.vertices.len();
        let (mut cx, mut cy, mut a2) = (0.0, 0.0, 0.0);
        for i in 0..n {
            let p = self.vertices[i];
            let q = self.vertices[(i + 1) % n];
            let c = p.cross(q);
            a2 += c;
            cx += (p.x + q.x) * c;
            cy += (p.y + q.y) * c;
        }
        Point::new(cx / (3.0 * a2), cy / (3.0 * a2))
    }

    /// Axis-aligned bounds as `(min_x, min_y, max_x, max_y)`.
    pub fn bounds(&self) -> (f64, f64, f64, f64) {
        self.vertices.iter().fold(
            (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
            |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
        )
    }

    /// Even-odd point containment (boundary points follow the crossing
    /// convention used by the rasterizer).
    pub fn contains(&self, p: Point) -> bool {
        crossing_parity(&self.vertices, p)
    }

    /// Applies `f` to every vertex and re-validates the ring.
    pub fn map_points(&self, f: impl Fn(Point) -> Point) -> Result<Self, GeometryError> {
        Self::from_ring(self.vertices.iter().map(|&p| f(p)).collect())
    }

    pub fn scale_xy(&self, sx: f64, sy: f64) -> Result<Self, GeometryError> {
        self.map_points(|p| Point::new(p.x * sx, p.y * sy))
    }

    /// Sutherland-Hodgman clip against the rectangle `[0,w]×[0,h]`.
    pub fn clip_to_rect(&self, width: f64, height: f64) -> Option<Self> {
        let mut pts = self.vertices.clone();
        let edges: [(fn(Point, f64) -> f64, f64); 4] = [
            (|p, _| p.x, 0.0),
            (|p, w| w - p.x, width),
            (|p, _| p.y, 0.0),
            (|p, h| h - p.y, height),
        ];
        for (dist, lim) in edges {
            if pts.is_empty() {
                return None;
            }
            let mut out = Vec::with_capacity(pts.len() + 2);
            for i in 0..pts.len() {
                let a = pts[i];
                let b = pts[(i + 1) % pts.len()];
                let da = dist(a, lim);
                let db = dist(b, lim);
                if da >= 0.0 {
                    out.push(a);
                }
                if (da >= 0.0) != (db >= 0.0) {
                    let t = da / (da - db);
                    out.push(a.add(b.sub(a).scale(t)));
                }
            }
            pts = out;
        }
        Self::from_ring(pts).ok()
    }
}

pub(crate) fn crossing_parity(vertices: &[Point], p: Point) -> bool {
    let n = vertices.len();
    let mut inside = false;
    let mut j = n - 1;
    for i in 0..n {
        let vi = vertices[i];
        let vj = vertices[j];
        if (vi.y > p.y) != (vj.y > p.y) {
            let x_int = vj.x + (p.y - vj.y) * (vi.x - vj.x) / (vi.y - vj.y);
            if p.x < x_int {
                inside = !inside;
            }
        }
        j = i;
    }
    inside
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    b.sub(a).cross(c.sub(a))
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    p.x >= a.x.min(b.x) && p.x <= a.x.max(b.x) && p.y >= a.y.min(b.y) && p.y <= a.y.max(b.y)
}

pub(crate) fn segments_intersect(a: Point, b: Point, c: Point, d: Point) -> bool {
    let o1 = orient(a, b, c);
    let o2 = orient(a, b, d);
    let o3 = orient(c, d, a);
    let o4 = orient(c, d, b);
    if ((o1 > 0.0 && o2 < 0.0) || (o1 < 0.0 && o2 > 0.0))
        && ((o3 > 0.0 && o4 < 0.0) || (o3 < 0.0 && o4 > 0.0))
    {
        return true;
    }
    (o1 == 0.0 && on_segment(a, b, c))
        || (o2 == 0.0 && on_segment(a, b, d))
        || (o3 == 0.0 && on_segment(c, d, a))
        || (o4 == 0.0 && on_segment(c, d, b))
}

fn is_simple(v: &[Point]) -> bool {
    let n = v.len();
    for i in 0..n {
        let (a, b) = (v[i], v[(i + 1) % n]);
        if a == b {
            return false;
        }
        for j in (i + 1)..n {
            // adjacent edges share a vertex by construction
            if j == i + 1 || (i == 0 && j == n - 1) {
                continue;
            }
            let (c, d) = (v[j], v[(j + 1) % n]);
            if segments_intersect(a, b, c, d) {
                return false;
            }
        }
    }
    true
}

/// A polygon tagged with its instance id.
#[derive(Debug, Clone, PartialEq)]
pub struct InstancePolygon {
    pub id: u32,
    pub polygon: Polygon,
}

/// Ground-truth region set with dense ids `1..=N`.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PolygonSet {
    items: Vec<InstancePolygon>,
}

impl PolygonSet {
    pub fn new() -> Self {
        Self::default()
    }

    /// Assigns ids `1..=N` in the given order.
    pub fn from_polygons(polygons: Vec<Polygon>) -> Self {
        let items = polygons
            .into_iter()
            .enumerate()
            .map(|(i, polygon)| InstancePolygon { id: i as u32 + 1, polygon })
            .collect();
        Self { items }
    }

    /// Accepts explicitly numbered polygons; ids must be exactly `1..=N` in
    /// some order.
    pub fn with_ids(mut items: Vec<InstancePolygon>) -> Result<Self, GeometryError> {
        items.sort_by_key(|p| p.id);
        for (i, item) in items.iter().enumerate() {
            if item.id != i as u32 + 1 {
                return Err(GeometryError::BadInstanceIds);
            }
        }
        Ok(Self { items })
    }

    pub fn push(&mut self, polygon: Polygon) -> u32 {
        let id = self.items.len() as u32 + 1;
        self.items.push(InstancePolygon { id, polygon });
        id
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &InstancePolygon> {
        self.items.iter()
    }

    pub fn get(&self, id: u32) -> Option<&Polygon> {
        self.items.iter().find(|p| p.id == id).map(|p| &p.polygon)
    }

    /// Maps every polygon, dropping those that become invalid, and renumbers
    /// the survivors densely.
    pub fn filter_map(&self, f: impl Fn(&Polygon) -> Option<Polygon>) -> Self {
        Self::from_polygons(self.items.iter().filter_map(|p| f(&p.polygon)).collect())
    }
}

#[derive(Serialize, Deserialize)]
struct PolygonRecord {
    id: u32,
    points: Vec<[f64; 2]>,
}

impl Serialize for PolygonSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        let records: Vec<PolygonRecord> = self
            .items
            .iter()
            .map(|p| PolygonRecord {
                id: p.id,
                points: p.polygon.vertices().iter().map(|v| [v.x, v.y]).collect(),
            })
            .collect();
        records.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for PolygonSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        use serde::de::Error;
        let records = Vec::<PolygonRecord>::deserialize(deserializer)?;
        let items = records
            .into_iter()
            .map(|r| {
                let pts = r.points.into_iter().map(|[x, y]| Point::new(x, y)).collect();
                Polygon::new(pts)
                    .map(|polygon| InstancePolygon { id: r.id, polygon })
                    .map_err(D::Error::custom)
            })
            .collect::<Result<Vec<_>, _>>()?;
        PolygonSet::with_ids(items).map_err(D::Error::custom)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn orientation_is_normalized() {
        let cw = vec![
            Point::new(0.0, 0.0),
            Point::new(0.0, 10.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 0.0),
        ];
        let p = Polygon::new(cw).unwrap();
        assert!(p.area() > 0.0);
        assert_eq!(p.area(), 100.0);
        assert_eq!(p.perimeter(), 40.0);
    }

    #[test]
    fn rejects_bowtie_and_short_rings() {
        let bowtie = vec![
            Point::new(0.0, 0.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 0.0),
            Point::new(0.0, 5.0),
        ];
        assert!(matches!(Polygon::new(bowtie), Err(GeometryError::SelfIntersecting)));
        let two = vec![Point::new(0.0, 0.0), Point::new(1.0, 1.0)];
        assert!(matches!(Polygon::new(two), Err(GeometryError::TooFewVertices(2))));
        let flat = vec![Point::new(0.0, 0.0), Point::new(1.0, 0.0), Point::new(2.0, 0.0)];
        assert!(matches!(Polygon::new(flat), Err(GeometryError::Degenerate)));
    }

    #[test]
    fn json_form_round_trips() {
        let set = PolygonSet::from_polygons(vec![
            Polygon::rect(0.0, 0.0, 4.0, 3.0).unwrap(),
            Polygon::rect(10.0, 10.0, 12.5, 14.0).unwrap(),
        ]);
        let json = serde_json::to_string(&set).unwrap();
        assert!(json.starts_with(r#"[{"id":1,"points":[[0.0,0.0]"#));
        let back: PolygonSet = serde_json::from_str(&json).unwrap();
        assert_eq!(back, set);
    }

    #[test]
    fn sparse_ids_rejected() {
        let json = r#"[{"id":2,"points":[[0,0],[1,0],[1,1]]}]"#;
        assert!(serde_json::from_str::<PolygonSet>(json).is_err());
    }

    #[test]
    fn clip_keeps_inside_part() {
        let p = Polygon::rect(-5.0, -5.0, 5.0, 5.0).unwrap();
        let c = p.clip_to_rect(100.0, 100.0).unwrap();
        assert!((c.area() - 25.0).abs() < 1e-12);
        let far = Polygon::rect(200.0, 200.0, 210.0, 210.0).unwrap();
        assert!(far.clip_to_rect(100.0, 100.0).is_none());
    }
}

//! Inward polygon offsetting.
//!
//! The raw offset path is built with Clipper-style joins (three-point joins
//! at corners that close up, miter or square joins at corners that open up)
//! and then cleaned by keeping the region of positive winding number, which
//! is what a Vatti-clipper union with the positive fill rule produces.

use super::polygon::{signed_area, Point, Polygon};
use super::GeometryError;

/// Miter limit used for label generation.
pub const DEFAULT_MITER_LIMIT: f64 = 2.0;

/// Offset distance `A(1 - r²) / L` for shrink ratio `r`.
pub fn shrink_offset(polygon: &Polygon, shrink_ratio: f64) -> Result<f64, GeometryError> {
    if !(shrink_ratio > 0.0 && shrink_ratio <= 1.0) {
        return Err(GeometryError::BadShrinkRatio(shrink_ratio));
    }
    let area = polygon.area();
    let perimeter = polygon.perimeter();
    if area <= 0.0 || perimeter <= 0.0 {
        return Err(GeometryError::Degenerate);
    }
    Ok((area * (1.0 - shrink_ratio * shrink_ratio) / perimeter).max(0.0))
}

/// Shrinks `polygon` inward by `offset` pixels.
///
/// Returns `None` when the polygon vanishes. When the shrink splits the
/// polygon into several pieces the largest one is returned.
pub fn shrink_polygon(polygon: &Polygon, offset: f64) -> Result<Option<Polygon>, GeometryError> {
    shrink_polygon_with_limit(polygon, offset, DEFAULT_MITER_LIMIT)
}

pub fn shrink_polygon_with_limit(
    polygon: &Polygon,
    offset: f64,
    miter_limit: f64,
) -> Result<Option<Polygon>, GeometryError> {
    if !(offset >= 0.0) || !offset.is_finite() {
        return Err(GeometryError::BadOffset(offset));
    }
    if offset == 0.0 {
        return Ok(Some(polygon.clone()));
    }
    let pieces = offset_pieces(polygon.vertices(), -offset, miter_limit.max(1.0));
    Ok(pieces
        .into_iter()
        .filter_map(|ring| Polygon::from_ring(ring).ok())
        .max_by(|a, b| a.area().total_cmp(&b.area())))
}

fn clean_ring(points: &[Point], tol: f64) -> Vec<Point> {
    let mut pts: Vec<Point> = Vec::with_capacity(points.len());
    for &p in points {
        if pts.last().is_none_or(|q: &Point| q.sub(p).norm() > tol) {
            pts.push(p);
        }
    }
    while pts.len() > 1 && pts[0].sub(pts[pts.len() - 1]).norm() <= tol {
        pts.pop();
    }
    // drop collinear vertices
    let mut changed = true;
    while changed && pts.len() >= 3 {
        changed = false;
        let n = pts.len();
        for i in 0..n {
            let a = pts[(i + n - 1) % n];
            let b = pts[i];
            let c = pts[(i + 1) % n];
            let ab = b.sub(a);
            let bc = c.sub(b);
            if ab.cross(bc).abs() <= tol * (ab.norm() + bc.norm()) && ab.dot(bc) > 0.0 {
                pts.remove(i);
                changed = true;
                break;
            }
        }
    }
    pts
}

fn raw_offset_path(v: &[Point], delta: f64, miter_limit: f64) -> Vec<Point> {
    let n = v.len();
    let normals: Vec<Point> = (0..n)
        .map(|j| {
            let d = v[(j + 1) % n].sub(v[j]);
            let len = d.norm();
            Point::new(d.y / len, -d.x / len)
        })
        .collect();
    let miter_threshold = 2.0 / (miter_limit * miter_limit);
    let mut out = Vec::with_capacity(3 * n);
    for j in 0..n {
        let k = (j + n - 1) % n;
        let (nk, nj, p) = (normals[k], normals[j], v[j]);
        let sin_a = nk.x * nj.y - nj.x * nk.y;
        let cos_a = nk.dot(nj);
        if sin_a.abs() < 1e-12 && cos_a > 0.0 {
            out.push(p.add(nk.scale(delta)));
            continue;
        }
        if sin_a * delta <= 0.0 {
            out.push(p.add(nk.scale(delta)));
            out.push(p);
            out.push(p.add(nj.scale(delta)));
        } else {
            let r = 1.0 + cos_a;
            if r >= miter_threshold {
                let q = delta / r;
                out.push(p.add(nk.add(nj).scale(q)));
            } else {
                let dx = (sin_a.atan2(cos_a) / 4.0).tan();
                out.push(Point::new(
                    p.x + delta * (nk.x - nk.y * dx),
                    p.y + delta * (nk.y + nk.x * dx),
                ));
                out.push(Point::new(
                    p.x + delta * (nj.x + nj.y * dx),
                    p.y + delta * (nj.y - nj.x * dx),
                ));
            }
        }
    }
    out
}

fn winding_number(path: &[Point], p: Point) -> i32 {
    let n = path.len();
    let mut wn = 0;
    for i in 0..n {
        let a = path[i];
        let b = path[(i + 1) % n];
        let side = b.sub(a).cross(p.sub(a));
        if a.y <= p.y {
            if b.y > p.y && side > 0.0 {
                wn += 1;
            }
        } else if b.y <= p.y && side < 0.0 {
            wn -= 1;
        }
    }
    wn
}

struct VertexPool {
    points: Vec<Point>,
    tol: f64,
}

impl VertexPool {
    fn intern(&mut self, p: Point) -> usize {
        if let Some(i) = self.points.iter().position(|q| q.sub(p).norm() <= self.tol) {
            return i;
        }
        self.points.push(p);
        self.points.len() - 1
    }
}

/// Offsets a CCW ring by `delta` (negative shrinks) and returns the
/// positive-winding pieces as CCW rings.
fn offset_pieces(vertices: &[Point], delta: f64, miter_limit: f64) -> Vec<Vec<Point>> {
    let (min_x, min_y, max_x, max_y) = vertices.iter().fold(
        (f64::INFINITY, f64::INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY),
        |(a, b, c, d), p| (a.min(p.x), b.min(p.y), c.max(p.x), d.max(p.y)),
    );
    let scale = (max_x - min_x).max(max_y - min_y).max(1.0);
    let tol = 1e-9 * scale;
    let base = clean_ring(vertices, tol);
    if base.len() < 3 {
        return Vec::new();
    }
    let raw = clean_ring(&raw_offset_path(&base, delta, miter_limit), tol);
    if raw.len() < 3 {
        return Vec::new();
    }

    // split every raw edge at all of its intersections with other edges
    let m = raw.len();
    let mut cuts: Vec<Vec<f64>> = vec![vec![0.0, 1.0]; m];
    for i in 0..m {
        let (a, b) = (raw[i], raw[(i + 1) % m]);
        let r = b.sub(a);
        for j in (i + 1)..m {
            let (c, d) = (raw[j], raw[(j + 1) % m]);
            let s = d.sub(c);
            let denom = r.cross(s);
            let ac = c.sub(a);
            if denom.abs() > 1e-12 * r.norm() * s.norm() {
                let t = ac.cross(s) / denom;
                let u = ac.cross(r) / denom;
                let eps = 1e-12;
                if (-eps..=1.0 + eps).contains(&t) && (-eps..=1.0 + eps).contains(&u) {
                    cuts[i].push(t.clamp(0.0, 1.0));
                    cuts[j].push(u.clamp(0.0, 1.0));
                }
            } else if ac.cross(r).abs() <= tol * r.norm() {
                // collinear: cut each edge at the other's endpoints
                let rr = r.dot(r);
                let ss = s.dot(s);
                for q in [c, d] {
                    let t = q.sub(a).dot(r) / rr;
                    if t > 0.0 && t < 1.0 {
                        cuts[i].push(t);
                    }
                }
                for q in [a, b] {
                    let u = q.sub(c).dot(s) / ss;
                    if u > 0.0 && u < 1.0 {
                        cuts[j].push(u);
                    }
                }
            }
        }
    }

    let mut pool = VertexPool { points: Vec::new(), tol: tol * 10.0 };
    let mut segments: Vec<(usize, usize)> = Vec::new();
    for i in 0..m {
        let (a, b) = (raw[i], raw[(i + 1) % m]);
        let c = &mut cuts[i];
        c.sort_by(f64::total_cmp);
        let ids: Vec<usize> = c
            .iter()
            .map(|&t| pool.intern(a.add(b.sub(a).scale(t))))
            .collect();
        for w in ids.windows(2) {
            if w[0] != w[1] {
                let key = (w[0].min(w[1]), w[0].max(w[1]));
                if !segments.contains(&key) {
                    segments.push(key);
                }
            }
        }
    }

    // classify each segment by the winding number on either side
    let probe = 1e-6 * scale;
    let mut kept: Vec<(usize, usize)> = Vec::new();
    for &(ia, ib) in &segments {
        let (a, b) = (pool.points[ia], pool.points[ib]);
        let d = b.sub(a);
        let len = d.norm();
        if len <= tol {
            continue;
        }
        let mid = a.add(d.scale(0.5));
        let left = Point::new(-d.y / len, d.x / len);
        let in_left = winding_number(&raw, mid.add(left.scale(probe))) > 0;
        let in_right = winding_number(&raw, mid.sub(left.scale(probe))) > 0;
        match (in_left, in_right) {
            (true, false) => kept.push((ia, ib)),
            (false, true) => kept.push((ib, ia)),
            _ => {}
        }
    }

    // chain boundary segments into closed loops, turning as far right as
    // possible at shared vertices
    let mut used = vec![false; kept.len()];
    let mut rings = Vec::new();
    for start in 0..kept.len() {
        if used[start] {
            continue;
        }
        used[start] = true;
        let origin = kept[start].0;
        let mut ring = vec![origin];
        let mut current = kept[start];
        let mut closed = false;
        for _ in 0..kept.len() {
            let here = current.1;
            if here == origin {
                closed = true;
                break;
            }
            ring.push(here);
            let din = pool.points[current.1].sub(pool.points[current.0]);
            let next = (0..kept.len())
                .filter(|&e| !used[e] && kept[e].0 == here)
                .min_by(|&e1, &e2| {
                    let turn = |e: usize| {
                        let dout = pool.points[kept[e].1].sub(pool.points[kept[e].0]);
                        din.cross(dout).atan2(din.dot(dout))
                    };
                    turn(e1).total_cmp(&turn(e2))
                });
            match next {
                Some(e) => {
                    used[e] = true;
                    current = kept[e];
                }
                None => break,
            }
        }
        if !closed {
            continue;
        }
        let pts: Vec<Point> = ring.iter().map(|&i| pool.points[i]).collect();
        let pts = clean_ring(&pts, tol);
        if pts.len() >= 3 && signed_area(&pts) > 1e-9 * scale * scale {
            rings.push(pts);
        }
    }
    rings
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square(side: f64) -> Polygon {
        Polygon::rect(0.0, 0.0, side, side).unwrap()
    }

    #[test]
    fn square_offset_value() {
        let d = shrink_offset(&square(100.0), 0.4).unwrap();
        assert_eq!(d, 21.0);
        assert_eq!(shrink_offset(&square(37.0), 1.0).unwrap(), 0.0);
    }

    #[test]
    fn bad_ratio_rejected() {
        assert!(shrink_offset(&square(10.0), 0.0).is_err());
        assert!(shrink_offset(&square(10.0), 1.5).is_err());
    }

    #[test]
    fn square_shrinks_concentrically() {
        let s = shrink_polygon(&square(100.0), 21.0).unwrap().unwrap();
        assert_eq!(s.len(), 4);
        let (x0, y0, x1, y1) = s.bounds();
        for (got, want) in [(x0, 21.0), (y0, 21.0), (x1, 79.0), (y1, 79.0)] {
            assert!((got - want).abs() < 1e-9, "{got} vs {want}");
        }
        assert!((s.area() - 58.0 * 58.0).abs() < 1e-6);
    }

    #[test]
    fn zero_offset_is_identity() {
        let p = square(13.0);
        assert_eq!(shrink_polygon(&p, 0.0).unwrap().unwrap(), p);
    }

    #[test]
    fn vanishing_polygon() {
        assert!(shrink_polygon(&square(10.0), 6.0).unwrap().is_none());
        assert!(shrink_polygon(&square(10.0), 5.0).unwrap().is_none());
        assert!(shrink_polygon(&square(10.0), 4.9).unwrap().is_some());
    }

    #[test]
    fn l_shape_reflex_corner() {
        // L: 0..20 wide bottom arm, 0..10 tall left arm up to 20
        let l = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(20.0, 0.0),
            Point::new(20.0, 10.0),
            Point::new(10.0, 10.0),
            Point::new(10.0, 20.0),
            Point::new(0.0, 20.0),
        ])
        .unwrap();
        let s = shrink_polygon(&l, 2.0).unwrap().unwrap();
        // exact inset L: arms of width 6, area 16*6 + 6*10
        assert!((s.area() - (16.0 * 6.0 + 6.0 * 10.0)).abs() < 1e-6, "{}", s.area());
        for v in s.vertices() {
            assert!(l.contains(*v));
        }
    }

    #[test]
    fn dumbbell_keeps_largest_piece() {
        // two squares joined by a thin bar; shrinking past the bar splits it
        let p = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(20.0, 0.0),
            Point::new(20.0, 9.0),
            Point::new(30.0, 9.0),
            Point::new(30.0, 0.0),
            Point::new(60.0, 0.0),
            Point::new(60.0, 30.0),
            Point::new(30.0, 30.0),
            Point::new(30.0, 11.0),
            Point::new(20.0, 11.0),
            Point::new(20.0, 20.0),
            Point::new(0.0, 20.0),
        ])
        .unwrap();
        let s = shrink_polygon(&p, 3.0).unwrap().unwrap();
        let (x0, _, _, _) = s.bounds();
        assert!((x0 - 33.0).abs() < 1e-9);
        assert!((s.area() - 24.0 * 24.0).abs() < 1e-6);
    }

    #[test]
    fn acute_triangle_shrinks_to_similar_triangle() {
        let t = Polygon::new(vec![
            Point::new(0.0, 0.0),
            Point::new(40.0, 0.0),
            Point::new(5.0, 30.0),
        ])
        .unwrap();
        let s = shrink_polygon(&t, 2.0).unwrap().unwrap();
        assert_eq!(s.len(), 3);
        // inradius scaling: shrunk triangle is similar with factor (ρ - d)/ρ
        let rho = 2.0 * t.area() / t.perimeter();
        let k = (rho - 2.0) / rho;
        assert!((s.area() - t.area() * k * k).abs() < 1e-6);
    }
}

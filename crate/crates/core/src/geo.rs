//! Planar geometry for building graphs.
//!
//! Buildings are reduced to axis-aligned envelopes whose centroids are
//! connected by a Delaunay triangulation. The triangulation is built by
//! Bowyer–Watson insertion into a super-triangle whose three corners are
//! kept symbolically at infinity, so the real triangles always cover the
//! convex hull of the input. Predicates run on coordinates normalized to
//! the unit square.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Absolute tolerance on the normalized in-circle determinant below which
/// four points are treated as cocircular.
pub const COCIRCULAR_EPS: f64 = 1e-12;

/// Normalized orientation magnitude below which three points are collinear.
pub const COLLINEAR_EPS: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GeoError {
    #[error("polygon needs at least 3 vertices, got {0}")]
    EmptyPolygon(usize),
    #[error("non-finite coordinate")]
    NonFinite,
    #[error("envelope has zero area")]
    DegenerateEnvelope,
    #[error("triangulation needs at least 2 points, got {0}")]
    TooFewPoints(usize),
    #[error("points {0} and {1} coincide")]
    DuplicatePoints(usize, usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Point2 {
    pub x: f64,
    pub y: f64,
}

impl Point2 {
    pub const fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite()
    }
}

impl From<(f64, f64)> for Point2 {
    fn from((x, y): (f64, f64)) -> Self {
        Self { x, y }
    }
}

/// Axis-aligned bounding rectangle in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Envelope {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
}

impl Envelope {
    /// Builds an envelope, rejecting inverted or non-finite bounds.
    /// Zero-area envelopes are allowed here; crops require positive area.
    pub fn new(min_x: f64, min_y: f64, max_x: f64, max_y: f64) -> Result<Self, GeoError> {
        if ![min_x, min_y, max_x, max_y].iter().all(|v| v.is_finite()) {
            return Err(GeoError::NonFinite);
        }
        if min_x > max_x || min_y > max_y {
            return Err(GeoError::DegenerateEnvelope);
        }
        Ok(Self { min_x, min_y, max_x, max_y })
    }

    pub fn width(&self) -> f64 {
        self.max_x - self.min_x
    }

    pub fn height(&self) -> f64 {
        self.max_y - self.min_y
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn has_area(&self) -> bool {
        self.max_x > self.min_x && self.max_y > self.min_y
    }

    /// Intersection with another envelope, if the overlap has positive area.
    pub fn intersection(&self, other: &Envelope) -> Option<Envelope> {
        let e = Envelope {
            min_x: self.min_x.max(other.min_x),
            min_y: self.min_y.max(other.min_y),
            max_x: self.max_x.min(other.max_x),
            max_y: self.max_y.min(other.max_y),
        };
        e.has_area().then_some(e)
    }

    pub fn centroid(&self) -> Point2 {
        centroid(self)
    }
}

/// Axis-aligned bounding box of a building polygon.
pub fn envelope_of(polygon: &[Point2]) -> Result<Envelope, GeoError> {
    if polygon.len() < 3 {
        return Err(GeoError::EmptyPolygon(polygon.len()));
    }
    if !polygon.iter().all(Point2::is_finite) {
        return Err(GeoError::NonFinite);
    }
    let mut env = Envelope {
        min_x: f64::INFINITY,
        min_y: f64::INFINITY,
        max_x: f64::NEG_INFINITY,
        max_y: f64::NEG_INFINITY,
    };
    for p in polygon {
        env.min_x = env.min_x.min(p.x);
        env.min_y = env.min_y.min(p.y);
        env.max_x = env.max_x.max(p.x);
        env.max_y = env.max_y.max(p.y);
    }
    if !env.has_area() {
        return Err(GeoError::DegenerateEnvelope);
    }
    Ok(env)
}

pub fn centroid(envelope: &Envelope) -> Point2 {
    Point2::new(
        (envelope.min_x + envelope.max_x) / 2.0,
        (envelope.min_y + envelope.max_y) / 2.0,
    )
}

/// Twice the signed area of `(a, b, c)`; positive when counter-clockwise.
pub fn orient2d(a: Point2, b: Point2, c: Point2) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// In-circle determinant for a counter-clockwise triangle `(a, b, c)`.
///
/// Positive when `d` lies strictly inside the circumcircle, negative when
/// outside and zero (up to rounding) when the four points are cocircular.
pub fn incircle(a: Point2, b: Point2, c: Point2, d: Point2) -> f64 {
    let (adx, ady) = (a.x - d.x, a.y - d.y);
    let (bdx, bdy) = (b.x - d.x, b.y - d.y);
    let (cdx, cdy) = (c.x - d.x, c.y - d.y);
    let alift = adx * adx + ady * ady;
    let blift = bdx * bdx + bdy * bdy;
    let clift = cdx * cdx + cdy * cdy;
    alift * (bdx * cdy - cdx * bdy) + blift * (cdx * ady - adx * cdy) + clift * (adx * bdy - bdx * ady)
}

/// A triangulation of a point set.
///
/// Triangles are counter-clockwise index triples rotated so the smallest
/// index comes first, sorted. Edges are `(i, j)` pairs with `i < j`,
/// sorted and deduplicated.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Triangulation {
    pub points: Vec<Point2>,
    pub triangles: Vec<[usize; 3]>,
    pub edges: Vec<(usize, usize)>,
}

impl Triangulation {
    /// Sorted neighbor lists derived from the edge list.
    pub fn neighbors(&self) -> Vec<Vec<usize>> {
        let mut adj = vec![Vec::new(); self.points.len()];
        for &(i, j) in &self.edges {
            adj[i].push(j);
            adj[j].push(i);
        }
        for list in &mut adj {
            list.sort_unstable();
        }
        adj
    }
}

/// Maps points into the unit square with a single scale factor so that
/// circles stay circles.
pub fn normalize_points(points: &[Point2]) -> Vec<Point2> {
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let scale = (max_x - min_x).max(max_y - min_y);
    let scale = if scale > 0.0 { scale } else { 1.0 };
    points
        .iter()
        .map(|p| Point2::new((p.x - min_x) / scale, (p.y - min_y) / scale))
        .collect()
}

fn validate_points(points: &[Point2]) -> Result<(), GeoError> {
    if points.len() < 2 {
        return Err(GeoError::TooFewPoints(points.len()));
    }
    if !points.iter().all(Point2::is_finite) {
        return Err(GeoError::NonFinite);
    }
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| lex_cmp(points[a], points[b]).then(a.cmp(&b)));
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(GeoError::DuplicatePoints(w[0].min(w[1]), w[0].max(w[1])));
        }
    }
    Ok(())
}

fn lex_cmp(a: Point2, b: Point2) -> std::cmp::Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Delaunay triangulation of building centroids.
///
/// Two points, or any all-collinear input, yield no triangles and a path
/// graph through the points ordered along the dominant axis. Cocircular
/// configurations resolve to the diagonal with the lexicographically
/// smallest `(min, max)` index pair.
pub fn delaunay(points: &[Point2]) -> Result<Triangulation, GeoError> {
    validate_points(points)?;
    let norm = normalize_points(points);

    if points.len() == 2 || all_collinear(&norm) {
        return Ok(path_fallback(points.to_vec(), &norm));
    }

    let mut triangles = bowyer_watson(&norm);
    legalize(&norm, &mut triangles);

    let mut triangles: Vec<[usize; 3]> = triangles.into_iter().map(canonical_rotation).collect();
    triangles.sort_unstable();
    let mut edges: Vec<(usize, usize)> = triangles
        .iter()
        .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
        .map(|(a, b)| (a.min(b), a.max(b)))
        .collect();
    edges.sort_unstable();
    edges.dedup();

    Ok(Triangulation { points: points.to_vec(), triangles, edges })
}

fn all_collinear(norm: &[Point2]) -> bool {
    // The two extreme points along the dominant axis span the widest baseline.
    let (a, b) = dominant_extremes(norm);
    norm.iter().all(|&p| orient2d(norm[a], norm[b], p).abs() <= COLLINEAR_EPS)
}

fn dominant_axis_is_x(norm: &[Point2]) -> bool {
    let (mut min_x, mut max_x, mut min_y, mut max_y) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in norm {
        min_x = min_x.min(p.x);
        max_x = max_x.max(p.x);
        min_y = min_y.min(p.y);
        max_y = max_y.max(p.y);
    }
    max_x - min_x >= max_y - min_y
}

fn dominant_order(norm: &[Point2]) -> Vec<usize> {
    let by_x = dominant_axis_is_x(norm);
    let mut order: Vec<usize> = (0..norm.len()).collect();
    order.sort_by(|&i, &j| {
        let (p, q) = (norm[i], norm[j]);
        let primary = if by_x { p.x.total_cmp(&q.x) } else { p.y.total_cmp(&q.y) };
        let secondary = if by_x { p.y.total_cmp(&q.y) } else { p.x.total_cmp(&q.x) };
        primary.then(secondary).then(i.cmp(&j))
    });
    order
}

fn dominant_extremes(norm: &[Point2]) -> (usize, usize) {
    let order = dominant_order(norm);
    (order[0], order[order.len() - 1])
}

fn path_fallback(points: Vec<Point2>, norm: &[Point2]) -> Triangulation {
    let order = dominant_order(norm);
    let mut edges: Vec<(usize, usize)> =
        order.windows(2).map(|w| (w[0].min(w[1]), w[0].max(w[1]))).collect();
    edges.sort_unstable();
    Triangulation { points, triangles: Vec::new(), edges }
}

fn canonical_rotation(t: [usize; 3]) -> [usize; 3] {
    let k = (0..3).min_by_key(|&k| t[k]).unwrap_or(0);
    [t[k], t[(k + 1) % 3], t[(k + 2) % 3]]
}

/// Vertex of the working triangulation: a real point or one of the three
/// super-triangle corners placed at infinity.
#[derive(Clone, Copy, PartialEq, Eq, Debug)]
enum Vertex {
    Real(usize),
    Inf(usize),
}

// Directions of the corners at infinity, counter-clockwise. The offset
// keeps them off the axis-aligned directions that pixel grids produce.
const INF_ANGLE_OFFSET: f64 = 0.377_281_164_59;

fn inf_direction(k: usize) -> Point2 {
    let theta = INF_ANGLE_OFFSET + k as f64 * 2.0 * std::f64::consts::PI / 3.0;
    Point2::new(theta.cos(), theta.sin())
}

/// Whether `p` lies strictly inside the circumdisk of the (counter-clockwise)
/// working triangle, with corners at infinity handled in the limit.
fn in_circumdisk(norm: &[Point2], tri: [Vertex; 3], p: Point2) -> bool {
    let reals = tri.iter().filter(|v| matches!(v, Vertex::Real(_))).count();
    match reals {
        3 => {
            let pt = |v: Vertex| match v {
                Vertex::Real(i) => norm[i],
                Vertex::Inf(_) => unreachable!(),
            };
            incircle(pt(tri[0]), pt(tri[1]), pt(tri[2]), p) > 0.0
        }
        2 => {
            // Rotate so the corner at infinity is last: (a, b, inf) is ccw and
            // its circumdisk degenerates to the open half-plane left of a->b.
            let k = tri.iter().position(|v| matches!(v, Vertex::Inf(_))).unwrap_or(2);
            let (a, b) = match (tri[(k + 1) % 3], tri[(k + 2) % 3]) {
                (Vertex::Real(a), Vertex::Real(b)) => (norm[a], norm[b]),
                _ => unreachable!(),
            };
            let o = orient2d(a, b, p);
            if o != 0.0 {
                return o > 0.0;
            }
            // On the supporting line: inside only strictly between a and b.
            let t = (p.x - a.x) * (b.x - a.x) + (p.y - a.y) * (b.y - a.y);
            let len2 = (b.x - a.x).powi(2) + (b.y - a.y).powi(2);
            t > 0.0 && t < len2
        }
        1 => {
            // (a, inf_i, inf_j): the disk tends to the half-plane on the far
            // side of a from the remaining corner direction.
            let (a, used) = {
                let mut a = None;
                let mut used = [false; 3];
                for v in tri {
                    match v {
                        Vertex::Real(i) => a = Some(norm[i]),
                        Vertex::Inf(k) => used[k] = true,
                    }
                }
                (a.unwrap_or(Point2::new(0.0, 0.0)), used)
            };
            let missing = used.iter().position(|u| !u).unwrap_or(0);
            let d = inf_direction(missing);
            (p.x - a.x) * d.x + (p.y - a.y) * d.y < 0.0
        }
        _ => true,
    }
}

fn bowyer_watson(norm: &[Point2]) -> Vec<[usize; 3]> {
    let mut tris: Vec<[Vertex; 3]> = vec![[Vertex::Inf(0), Vertex::Inf(1), Vertex::Inf(2)]];

    for (idx, &p) in norm.iter().enumerate() {
        let mut bad = Vec::new();
        let mut keep = Vec::with_capacity(tris.len() + 2);
        for t in tris.drain(..) {
            if in_circumdisk(norm, t, p) {
                bad.push(t);
            } else {
                keep.push(t);
            }
        }
        // Cavity boundary: directed edges of bad triangles whose reverse is
        // not also a bad-triangle edge.
        let mut directed: Vec<(Vertex, Vertex)> = Vec::with_capacity(bad.len() * 3);
        for t in &bad {
            directed.extend([(t[0], t[1]), (t[1], t[2]), (t[2], t[0])]);
        }
        for &(a, b) in &directed {
            if !directed.contains(&(b, a)) {
                keep.push([a, b, Vertex::Real(idx)]);
            }
        }
        tris = keep;
    }

    tris.into_iter()
        .filter_map(|t| match t {
            [Vertex::Real(a), Vertex::Real(b), Vertex::Real(c)] => Some([a, b, c]),
            _ => None,
        })
        .collect()
}

fn edge_key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Lawson flips over interior edges: removes any residual empty-circle
/// violation and resolves cocircular quadrilaterals by the index tie-break.
fn legalize(norm: &[Point2], tris: &mut [[usize; 3]]) {
    let mut edge_map: HashMap<(usize, usize), Vec<usize>> = HashMap::new();
    for (ti, t) in tris.iter().enumerate() {
        for k in 0..3 {
            edge_map.entry(edge_key(t[k], t[(k + 1) % 3])).or_default().push(ti);
        }
    }
    let mut stack: Vec<(usize, usize)> =
        edge_map.iter().filter(|(_, ts)| ts.len() == 2).map(|(&e, _)| e).collect();
    stack.sort_unstable_by(|a, b| b.cmp(a));

    let n = norm.len();
    let mut budget = 16 * n * n + 1024;
    while let Some(edge) = stack.pop() {
        if budget == 0 {
            break;
        }
        budget -= 1;
        let Some(owners) = edge_map.get(&edge) else { continue };
        if owners.len() != 2 {
            continue;
        }
        let (t1, t2) = (owners[0], owners[1]);
        // Orient so that t1 = (u, v, w) and t2 = (v, u, x), both ccw.
        let Some((u, v, w)) = rotate_to_edge(tris[t1], edge) else { continue };
        let Some(x) = opposite(tris[t2], v, u) else { continue };

        let ic = incircle(norm[u], norm[v], norm[w], norm[x]);
        let flip = if ic > COCIRCULAR_EPS {
            true
        } else if ic >= -COCIRCULAR_EPS {
            edge_key(w, x) < edge_key(u, v)
        } else {
            false
        };
        if !flip {
            continue;
        }
        // The quad u, x, v, w must be strictly convex for the flip to be valid.
        if orient2d(norm[u], norm[x], norm[w]) <= 0.0 || orient2d(norm[x], norm[v], norm[w]) <= 0.0 {
            continue;
        }

        tris[t1] = [u, x, w];
        tris[t2] = [x, v, w];
        edge_map.remove(&edge);
        edge_map.insert(edge_key(w, x), vec![t1, t2]);
        replace_owner(&mut edge_map, edge_key(x, v), t1, t2);
        replace_owner(&mut edge_map, edge_key(v, w), t1, t2);
        replace_owner(&mut edge_map, edge_key(w, u), t2, t1);
        replace_owner(&mut edge_map, edge_key(u, x), t2, t1);
        stack.extend([edge_key(u, x), edge_key(x, v), edge_key(v, w), edge_key(w, u)]);
    }
}

fn replace_owner(map: &mut HashMap<(usize, usize), Vec<usize>>, e: (usize, usize), from: usize, to: usize) {
    if let Some(owners) = map.get_mut(&e) {
        for o in owners.iter_mut() {
            if *o == from {
                *o = to;
            }
        }
    }
}

fn rotate_to_edge(t: [usize; 3], (a, b): (usize, usize)) -> Option<(usize, usize, usize)> {
    (0..3).find_map(|k| {
        let (p, q, r) = (t[k], t[(k + 1) % 3], t[(k + 2) % 3]);
        ((p == a && q == b) || (p == b && q == a)).then_some((p, q, r))
    })
}

fn opposite(t: [usize; 3], a: usize, b: usize) -> Option<usize> {
    (0..3).find_map(|k| (t[k] == a && t[(k + 1) % 3] == b).then_some(t[(k + 2) % 3]))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pts(v: &[(f64, f64)]) -> Vec<Point2> {
        v.iter().map(|&p| p.into()).collect()
    }

    #[test]
    fn envelope_examples() {
        let e = envelope_of(&pts(&[(0.0, 0.0), (2.0, 0.0), (1.0, 3.0)])).unwrap();
        assert_eq!(e, Envelope { min_x: 0.0, min_y: 0.0, max_x: 2.0, max_y: 3.0 });
        let e = envelope_of(&pts(&[(1.0, 4.0), (3.0, 2.0), (2.0, 6.0), (0.0, 5.0)])).unwrap();
        assert_eq!(e, Envelope { min_x: 0.0, min_y: 2.0, max_x: 3.0, max_y: 6.0 });
        assert_eq!(
            envelope_of(&pts(&[(5.0, 5.0), (5.0, 5.0), (5.0, 5.0)])),
            Err(GeoError::DegenerateEnvelope)
        );
        assert_eq!(envelope_of(&pts(&[(0.0, 0.0), (1.0, 1.0)])), Err(GeoError::EmptyPolygon(2)));
        assert_eq!(
            envelope_of(&pts(&[(0.0, 0.0), (f64::NAN, 1.0), (2.0, 2.0)])),
            Err(GeoError::NonFinite)
        );
    }

    #[test]
    fn centroid_examples() {
        let c = |a, b, c, d| centroid(&Envelope::new(a, b, c, d).unwrap());
        assert_eq!(c(0.0, 0.0, 2.0, 3.0), Point2::new(1.0, 1.5));
        assert_eq!(c(-1.0, -1.0, 1.0, 1.0), Point2::new(0.0, 0.0));
        assert_eq!(c(0.0, 2.0, 3.0, 6.0), Point2::new(1.5, 4.0));
    }

    #[test]
    fn incircle_examples() {
        let (a, b, c) = (Point2::new(0.0, 0.0), Point2::new(1.0, 0.0), Point2::new(0.0, 1.0));
        assert!(incircle(a, b, c, Point2::new(0.25, 0.25)) > 0.0);
        assert!(incircle(a, b, c, Point2::new(1.0, 1.0)).abs() < 1e-12);
        assert!(incircle(a, b, c, Point2::new(5.0, 5.0)) < 0.0);
    }

    #[test]
    fn single_triangle() {
        let t = delaunay(&pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0)])).unwrap();
        assert_eq!(t.triangles, vec![[0, 1, 2]]);
        assert_eq!(t.edges, vec![(0, 1), (0, 2), (1, 2)]);
    }

    #[test]
    fn collinear_falls_back_to_path() {
        let t = delaunay(&pts(&[(0.0, 0.0), (1.0, 0.0), (2.0, 0.0)])).unwrap();
        assert!(t.triangles.is_empty());
        assert_eq!(t.edges, vec![(0, 1), (1, 2)]);

        // Order along the dominant axis, not input order.
        let t = delaunay(&pts(&[(0.0, 5.0), (0.0, 1.0), (0.0, 3.0)])).unwrap();
        assert_eq!(t.edges, vec![(0, 2), (1, 2)]);

        let t = delaunay(&pts(&[(3.0, 3.0), (1.0, 1.0)])).unwrap();
        assert_eq!(t.edges, vec![(0, 1)]);
    }

    #[test]
    fn square_tie_break_picks_lowest_index_diagonal() {
        let t = delaunay(&pts(&[(0.0, 0.0), (1.0, 0.0), (0.0, 1.0), (1.0, 1.0)])).unwrap();
        assert_eq!(t.triangles.len(), 2);
        assert_eq!(t.edges, vec![(0, 1), (0, 2), (0, 3), (1, 3), (2, 3)]);

        // Same square, relabelled so the other diagonal carries index 0.
        let t = delaunay(&pts(&[(1.0, 0.0), (0.0, 0.0), (1.0, 1.0), (0.0, 1.0)])).unwrap();
        assert!(t.edges.contains(&(0, 3)));
        assert!(!t.edges.contains(&(1, 2)));
    }

    #[test]
    fn regular_hexagon_with_center_is_deterministic() {
        let mut p: Vec<Point2> = (0..6)
            .map(|k| {
                let a = k as f64 * std::f64::consts::PI / 3.0;
                Point2::new(a.cos(), a.sin())
            })
            .collect();
        p.push(Point2::new(0.0, 0.0));
        let t = delaunay(&p).unwrap();
        assert_eq!(t.triangles.len(), 6);
        assert_eq!(t.edges.len(), 12);
        assert_eq!(t, delaunay(&p).unwrap());
    }

    #[test]
    fn errors() {
        assert_eq!(delaunay(&pts(&[(0.0, 0.0)])), Err(GeoError::TooFewPoints(1)));
        assert_eq!(
            delaunay(&pts(&[(0.0, 0.0), (1.0, 1.0), (0.0, 0.0)])),
            Err(GeoError::DuplicatePoints(0, 2))
        );
        assert_eq!(delaunay(&pts(&[(0.0, 0.0), (f64::INFINITY, 1.0)])), Err(GeoError::NonFinite));
    }

    #[test]
    fn grid_covers_hull() {
        // Axis-aligned grids are maximally degenerate: every cell is cocircular.
        let mut p = Vec::new();
        for y in 0..5 {
            for x in 0..6 {
                p.push(Point2::new(x as f64 * 10.0, y as f64 * 10.0));
            }
        }
        let t = delaunay(&p).unwrap();
        assert_eq!(t.triangles.len(), 2 * 5 * 4);
        let area: f64 = t
            .triangles
            .iter()
            .map(|tr| orient2d(p[tr[0]], p[tr[1]], p[tr[2]]) / 2.0)
            .sum();
        assert!((area - 50.0 * 40.0).abs() < 1e-9);
    }
}

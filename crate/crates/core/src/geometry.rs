//! Triangulation of sample points and per-triangle ellipse references.
//!
//! Points are in pixel coordinates. A triangle `[a, b, c]` is counterclockwise
//! when `orient2d(a, b, c) > 0`, i.e. counterclockwise in a y-up frame.

use std::f64::consts::PI;
use std::io::Write;
use std::path::Path;

use nalgebra::{Matrix2, Matrix3};
use robust::Coord;

use crate::error::{Error, Result};
use crate::imagery::PixelPos;
use crate::spatial::PointIndex;

/// Smallest triangle area accepted as non-degenerate, in px^2.
pub const MIN_TRIANGLE_AREA: f64 = 1e-9;

/// Points closer than this are merged before triangulation.
pub const MERGE_DISTANCE: f64 = 1e-6;

/// Factor applied to the fitted semi-axes to obtain Gaussian reference scales.
pub const ELLIPSE_AXIS_SCALE: f64 = 0.5;

#[inline]
fn coord(p: PixelPos) -> Coord<f64> {
    Coord { x: p.x, y: p.y }
}

/// Robust orientation: positive when `a, b, c` turn counterclockwise.
#[inline]
pub fn orient(a: PixelPos, b: PixelPos, c: PixelPos) -> f64 {
    robust::orient2d(coord(a), coord(b), coord(c))
}

/// Robust in-circle test for a counterclockwise triangle; positive when `d`
/// lies strictly inside the circumcircle.
#[inline]
pub fn in_circle(a: PixelPos, b: PixelPos, c: PixelPos, d: PixelPos) -> f64 {
    robust::incircle(coord(a), coord(b), coord(c), coord(d))
}

pub fn signed_area(tri: [PixelPos; 3]) -> f64 {
    0.5 * ((tri[1].x - tri[0].x) * (tri[2].y - tri[0].y)
        - (tri[2].x - tri[0].x) * (tri[1].y - tri[0].y))
}

pub fn centroid(tri: [PixelPos; 3]) -> PixelPos {
    PixelPos::new(
        (tri[0].x + tri[1].x + tri[2].x) / 3.0,
        (tri[0].y + tri[1].y + tri[2].y) / 3.0,
    )
}

/// Inside-or-on test with an absolute tolerance on the edge functions.
pub fn point_in_triangle(p: PixelPos, tri: [PixelPos; 3], tol: f64) -> bool {
    let d0 = orient(tri[0], tri[1], p);
    let d1 = orient(tri[1], tri[2], p);
    let d2 = orient(tri[2], tri[0], p);
    let has_neg = d0 < -tol || d1 < -tol || d2 < -tol;
    let has_pos = d0 > tol || d1 > tol || d2 > tol;
    !(has_neg && has_pos)
}

/// A Delaunay triangulation over `points`.
#[derive(Debug, Clone, PartialEq)]
pub struct TriangleMesh {
    pub points: Vec<PixelPos>,
    /// Counterclockwise vertex-index triples.
    pub triangles: Vec<[usize; 3]>,
}

impl TriangleMesh {
    pub fn vertices(&self, t: usize) -> [PixelPos; 3] {
        self.triangles[t].map(|i| self.points[i])
    }

    pub fn area(&self, t: usize) -> f64 {
        signed_area(self.vertices(t))
    }

    pub fn total_area(&self) -> f64 {
        (0..self.triangles.len()).map(|t| self.area(t)).sum()
    }

    /// Index of a triangle containing `p`, if any.
    pub fn locate(&self, p: PixelPos) -> Option<usize> {
        (0..self.triangles.len()).find(|&t| point_in_triangle(p, self.vertices(t), 0.0))
    }

    /// Writes `v x y 0` and 1-based `f a b c` lines.
    pub fn write_obj(&self, mut w: impl Write) -> Result<()> {
        for p in &self.points {
            writeln!(w, "v {} {} 0", p.x, p.y)?;
        }
        for t in &self.triangles {
            writeln!(w, "f {} {} {}", t[0] + 1, t[1] + 1, t[2] + 1)?;
        }
        Ok(())
    }

    pub fn save_obj(&self, path: impl AsRef<Path>) -> Result<()> {
        let file = std::fs::File::create(path)?;
        self.write_obj(std::io::BufWriter::new(file))
    }
}

/// Convex hull vertex indices in counterclockwise order (monotone chain);
/// collinear boundary points are dropped.
pub fn convex_hull(points: &[PixelPos]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&a, &b| {
        points[a]
            .x
            .total_cmp(&points[b].x)
            .then(points[a].y.total_cmp(&points[b].y))
    });
    idx.dedup_by(|a, b| points[*a] == points[*b]);
    if idx.len() < 3 {
        return idx;
    }
    let mut hull: Vec<usize> = Vec::with_capacity(2 * idx.len());
    for pass in 0..2 {
        let start = hull.len();
        let iter: Box<dyn Iterator<Item = &usize>> = if pass == 0 {
            Box::new(idx.iter())
        } else {
            Box::new(idx.iter().rev())
        };
        for &i in iter {
            while hull.len() >= start + 2
                && orient(points[hull[hull.len() - 2]], points[hull[hull.len() - 1]], points[i]) <= 0.0
            {
                hull.pop();
            }
            hull.push(i);
        }
        hull.pop();
    }
    hull
}

pub fn polygon_area(points: &[PixelPos], ring: &[usize]) -> f64 {
    let n = ring.len();
    (0..n)
        .map(|i| {
            let (p, q) = (points[ring[i]], points[ring[(i + 1) % n]]);
            p.x * q.y - q.x * p.y
        })
        .sum::<f64>()
        * 0.5
}

/// Mean distance from each point to its nearest other point.
pub fn mean_nn_distance(points: &[PixelPos]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::invalid(format!(
            "nearest-neighbor spacing needs at least 2 points, got {}",
            points.len()
        )));
    }
    let index = PointIndex::new(points);
    let total: f64 = points
        .iter()
        .enumerate()
        .map(|(i, &p)| {
            let nn = index.knn(p, 2);
            let other = nn.iter().find(|n| n.index != i).expect("at least two points");
            other.dist2.sqrt()
        })
        .sum();
    Ok(total / points.len() as f64)
}

/// Drops points within `tol` of an earlier point; keeps first occurrences in order.
pub fn dedup_points(points: &[PixelPos], tol: f64) -> Vec<PixelPos> {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&a, &b| points[a].x.total_cmp(&points[b].x).then(a.cmp(&b)));
    let mut dropped = vec![false; points.len()];
    let tol2 = tol * tol;
    for (pos, &i) in order.iter().enumerate() {
        if dropped[i] {
            continue;
        }
        for &j in &order[pos + 1..] {
            if points[j].x - points[i].x > tol {
                break;
            }
            if !dropped[j] && points[j].dist2(points[i]) <= tol2 {
                // Keep whichever came first in the input.
                if j > i {
                    dropped[j] = true;
                } else {
                    dropped[i] = true;
                    break;
                }
            }
        }
    }
    points
        .iter()
        .zip(&dropped)
        .filter(|(_, &d)| !d)
        .map(|(p, _)| *p)
        .collect()
}

/// Sample points plus image-border points; `is_boundary` flags the additions.
#[derive(Debug, Clone, PartialEq)]
pub struct AugmentedPoints {
    pub points: Vec<PixelPos>,
    pub is_boundary: Vec<bool>,
}

impl AugmentedPoints {
    pub fn boundary_count(&self) -> usize {
        self.is_boundary.iter().filter(|&&b| b).count()
    }
}

/// Adds the four outermost pixel centers plus evenly spaced points along each
/// image edge so that consecutive border points are at most `spacing` apart.
///
/// An edge of length `L` is split into `ceil(L / spacing)` equal segments.
/// Border points within `MERGE_DISTANCE` of an existing point are skipped.
pub fn add_boundary_points(
    points: &[PixelPos],
    width: usize,
    height: usize,
    spacing: f64,
) -> Result<AugmentedPoints> {
    if width == 0 || height == 0 {
        return Err(Error::invalid("image must be non-empty"));
    }
    if !(spacing > 0.0) || !spacing.is_finite() {
        return Err(Error::invalid(format!("boundary spacing must be positive, got {spacing}")));
    }
    let (x0, y0) = (0.5, 0.5);
    let (x1, y1) = (width as f64 - 0.5, height as f64 - 0.5);
    let corners = [
        PixelPos::new(x0, y0),
        PixelPos::new(x1, y0),
        PixelPos::new(x1, y1),
        PixelPos::new(x0, y1),
    ];
    let mut border = Vec::new();
    for i in 0..4 {
        let (a, b) = (corners[i], corners[(i + 1) % 4]);
        border.push(a);
        let len = a.dist(b);
        let segments = (len / spacing).ceil().max(1.0) as usize;
        for s in 1..segments {
            let t = s as f64 / segments as f64;
            border.push(PixelPos::new(a.x + (b.x - a.x) * t, a.y + (b.y - a.y) * t));
        }
    }
    let mut out = AugmentedPoints {
        points: points.to_vec(),
        is_boundary: vec![false; points.len()],
    };
    let index = PointIndex::new(points);
    for p in border {
        let near_existing = !index.is_empty()
            && index.knn(p, 1)[0].dist2 <= MERGE_DISTANCE * MERGE_DISTANCE;
        let near_added = out.points[points.len()..]
            .iter()
            .any(|q| q.dist2(p) <= MERGE_DISTANCE * MERGE_DISTANCE);
        if !near_existing && !near_added {
            out.points.push(p);
            out.is_boundary.push(true);
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Bowyer-Watson triangulation

const NONE: u32 = u32::MAX;

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [u32; 3],
    /// `nbr[i]` shares the edge opposite `v[i]`.
    nbr: [u32; 3],
    alive: bool,
}

struct Builder {
    pts: Vec<PixelPos>,
    tris: Vec<Tri>,
    free: Vec<u32>,
    stamp: Vec<u32>,
    epoch: u32,
    last: u32,
}

impl Builder {
    fn new(pts: Vec<PixelPos>, super_tri: [u32; 3]) -> Self {
        let mut b = Self {
            pts,
            tris: Vec::new(),
            free: Vec::new(),
            stamp: Vec::new(),
            epoch: 0,
            last: 0,
        };
        b.alloc(Tri {
            v: super_tri,
            nbr: [NONE; 3],
            alive: true,
        });
        b
    }

    fn alloc(&mut self, t: Tri) -> u32 {
        if let Some(i) = self.free.pop() {
            self.tris[i as usize] = t;
            i
        } else {
            self.tris.push(t);
            self.stamp.push(0);
            (self.tris.len() - 1) as u32
        }
    }

    fn p(&self, v: u32) -> PixelPos {
        self.pts[v as usize]
    }

    fn locate(&self, p: PixelPos) -> u32 {
        let mut t = self.last;
        let mut steps = 0usize;
        'walk: loop {
            let tri = &self.tris[t as usize];
            for i in 0..3 {
                let a = self.p(tri.v[(i + 1) % 3]);
                let b = self.p(tri.v[(i + 2) % 3]);
                if orient(a, b, p) < 0.0 && tri.nbr[i] != NONE {
                    t = tri.nbr[i];
                    steps += 1;
                    if steps > 4 * self.tris.len() + 16 {
                        break 'walk;
                    }
                    continue 'walk;
                }
            }
            return t;
        }
        // Walk failed to converge; fall back to a scan.
        (0..self.tris.len() as u32)
            .find(|&i| {
                let tri = &self.tris[i as usize];
                tri.alive
                    && point_in_triangle(p, tri.v.map(|v| self.p(v)), 0.0)
            })
            .expect("point inside the super triangle")
    }

    fn insert(&mut self, vi: u32) {
        let p = self.p(vi);
        let start = self.locate(p);
        self.epoch += 1;
        let epoch = self.epoch;

        let mut cavity = vec![start];
        self.stamp[start as usize] = epoch;
        let mut head = 0;
        while head < cavity.len() {
            let t = cavity[head];
            head += 1;
            for i in 0..3 {
                let n = self.tris[t as usize].nbr[i];
                if n == NONE || self.stamp[n as usize] == epoch {
                    continue;
                }
                let [a, b, c] = self.tris[n as usize].v.map(|v| self.p(v));
                if in_circle(a, b, c, p) > 0.0 {
                    self.stamp[n as usize] = epoch;
                    cavity.push(n);
                }
            }
        }

        // Boundary edges (a, b) with the triangle across them.
        let mut boundary: Vec<(u32, u32, u32)> = Vec::with_capacity(cavity.len() + 2);
        for &t in &cavity {
            let tri = self.tris[t as usize];
            for i in 0..3 {
                let n = tri.nbr[i];
                if n == NONE || self.stamp[n as usize] != epoch {
                    boundary.push((tri.v[(i + 1) % 3], tri.v[(i + 2) % 3], n));
                }
            }
        }
        for &t in &cavity {
            self.tris[t as usize].alive = false;
            self.free.push(t);
        }

        let mut created: Vec<u32> = Vec::with_capacity(boundary.len());
        for &(a, b, outer) in &boundary {
            let id = self.alloc(Tri {
                v: [a, b, vi],
                nbr: [NONE, NONE, outer],
                alive: true,
            });
            // Mark fresh slots so a later BFS in this epoch never treats them as cavity.
            self.stamp[id as usize] = 0;
            if outer != NONE {
                let o = &mut self.tris[outer as usize];
                for k in 0..3 {
                    let (oa, ob) = (o.v[(k + 1) % 3], o.v[(k + 2) % 3]);
                    if oa == b && ob == a {
                        o.nbr[k] = id;
                    }
                }
            }
            created.push(id);
        }
        // New triangle (a, b, p): the edge (b, p) is shared with the triangle
        // starting at b, the edge (p, a) with the triangle ending at a.
        for (j, &(a, b, _)) in boundary.iter().enumerate() {
            let next = boundary.iter().position(|&(a2, _, _)| a2 == b).expect("closed cavity");
            let prev = boundary.iter().position(|&(_, b2, _)| b2 == a).expect("closed cavity");
            let id = created[j] as usize;
            self.tris[id].nbr[0] = created[next];
            self.tris[id].nbr[1] = created[prev];
        }
        self.last = *created.last().unwrap();
    }
}

/// Hilbert-curve key of a point quantized to a 2^16 grid.
fn hilbert_key(x: u32, y: u32) -> u64 {
    let (mut x, mut y) = (x, y);
    let n: u32 = 1 << 16;
    let mut d: u64 = 0;
    let mut s = n / 2;
    while s > 0 {
        let rx = u32::from(x & s > 0);
        let ry = u32::from(y & s > 0);
        d += s as u64 * s as u64 * ((3 * rx) ^ ry) as u64;
        if ry == 0 {
            if rx == 1 {
                x = n - 1 - x;
                y = n - 1 - y;
            }
            std::mem::swap(&mut x, &mut y);
        }
        s /= 2;
    }
    d
}

/// Delaunay triangulation by incremental Bowyer-Watson insertion inside a
/// super triangle, using exact orientation and in-circle predicates.
///
/// Points are inserted in Hilbert order, so the result (after canonical
/// sorting of the triangle list) does not depend on the input order.
pub fn delaunay(points: &[PixelPos]) -> Result<TriangleMesh> {
    let n = points.len();
    if n < 3 {
        return Err(Error::degenerate(format!("triangulation needs 3 points, got {n}")));
    }
    if points.iter().any(|p| !p.x.is_finite() || !p.y.is_finite()) {
        return Err(Error::invalid("non-finite point coordinates"));
    }
    let (mut min_x, mut min_y) = (f64::INFINITY, f64::INFINITY);
    let (mut max_x, mut max_y) = (f64::NEG_INFINITY, f64::NEG_INFINITY);
    for p in points {
        min_x = min_x.min(p.x);
        min_y = min_y.min(p.y);
        max_x = max_x.max(p.x);
        max_y = max_y.max(p.y);
    }
    let span = (max_x - min_x).max(max_y - min_y);

    let mut order: Vec<usize> = (0..n).collect();
    let quant = |v: f64, lo: f64| -> u32 {
        if span > 0.0 {
            (((v - lo) / span) * 65535.0).round() as u32
        } else {
            0
        }
    };
    let keys: Vec<u64> = points
        .iter()
        .map(|p| hilbert_key(quant(p.x, min_x), quant(p.y, min_y)))
        .collect();
    order.sort_by(|&a, &b| {
        keys[a]
            .cmp(&keys[b])
            .then(points[a].x.total_cmp(&points[b].x))
            .then(points[a].y.total_cmp(&points[b].y))
    });
    for w in order.windows(2) {
        if points[w[0]] == points[w[1]] {
            return Err(Error::degenerate(format!(
                "duplicate points {} and {} at ({}, {})",
                w[0].min(w[1]),
                w[0].max(w[1]),
                points[w[0]].x,
                points[w[0]].y
            )));
        }
    }
    let p0 = points[0];
    let far = (1..n).max_by(|&a, &b| p0.dist2(points[a]).total_cmp(&p0.dist2(points[b]))).unwrap();
    if (0..n).all(|i| orient(p0, points[far], points[i]) == 0.0) {
        return Err(Error::degenerate("all points are collinear"));
    }

    let cx = 0.5 * (min_x + max_x);
    let cy = 0.5 * (min_y + max_y);
    let m = span.max(1e-9) * 1e6;
    let mut pts = points.to_vec();
    pts.push(PixelPos::new(cx - 2.0 * m, cy - m));
    pts.push(PixelPos::new(cx + 2.0 * m, cy - m));
    pts.push(PixelPos::new(cx, cy + 2.0 * m));
    let s = n as u32;
    let mut b = Builder::new(pts, [s, s + 1, s + 2]);
    for &i in &order {
        b.insert(i as u32);
    }

    let mut triangles: Vec<[usize; 3]> = b
        .tris
        .iter()
        .filter(|t| t.alive && t.v.iter().all(|&v| v < s))
        .map(|t| {
            let v = t.v.map(|v| v as usize);
            // Rotate so the smallest index leads; orientation is preserved.
            let k = (0..3).min_by_key(|&k| v[k]).unwrap();
            [v[k], v[(k + 1) % 3], v[(k + 2) % 3]]
        })
        .collect();
    triangles.sort_unstable();
    Ok(TriangleMesh {
        points: points.to_vec(),
        triangles,
    })
}

// ---------------------------------------------------------------------------
// Ellipses

/// Geometric ellipse: center, semi-axes `(major, minor)` and the major-axis
/// angle in `[0, pi)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ellipse {
    pub center: PixelPos,
    pub semi_axes: [f64; 2],
    pub angle: f64,
}

/// Per-triangle reference ellipse with semi-axes already multiplied by
/// `ELLIPSE_AXIS_SCALE`; `theta01 = angle / pi`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FittedEllipse {
    pub center: PixelPos,
    /// `(s_xe, s_ye)` with `s_xe >= s_ye > 0`.
    pub semi_axes: [f64; 2],
    pub theta01: f64,
}

impl FittedEllipse {
    pub fn from_ellipse(e: &Ellipse) -> Self {
        Self {
            center: e.center,
            semi_axes: e.semi_axes.map(|a| a * ELLIPSE_AXIS_SCALE),
            theta01: normalize_angle(e.angle) / PI,
        }
    }
}

fn normalize_angle(a: f64) -> f64 {
    let r = a.rem_euclid(PI);
    if r >= PI {
        0.0
    } else {
        r
    }
}

fn check_triangle(tri: [PixelPos; 3]) -> Result<f64> {
    let area = signed_area(tri).abs();
    if !(area > MIN_TRIANGLE_AREA) {
        return Err(Error::degenerate(format!("triangle area {area} is below {MIN_TRIANGLE_AREA}")));
    }
    Ok(area)
}

/// Vertices followed by the midpoints of edges ab, bc, ac.
pub fn six_point_set(tri: [PixelPos; 3]) -> Result<[PixelPos; 6]> {
    check_triangle(tri)?;
    let mid = |p: PixelPos, q: PixelPos| PixelPos::new(0.5 * (p.x + q.x), 0.5 * (p.y + q.y));
    let [a, b, c] = tri;
    Ok([a, b, c, mid(a, b), mid(b, c), mid(a, c)])
}

/// Direct least-squares ellipse fit: minimizes the algebraic residual of
/// `a x^2 + b xy + c y^2 + d x + e y + f` subject to `4ac - b^2 = 1`.
///
/// Uses the partitioned scatter-matrix reduction to a 3x3 eigenproblem, on
/// centered and scaled coordinates.
pub fn fit_conic_ellipse(points: &[PixelPos]) -> Result<Ellipse> {
    if points.len() < 6 {
        return Err(Error::invalid(format!("ellipse fit needs 6 points, got {}", points.len())));
    }
    let n = points.len() as f64;
    let mx = points.iter().map(|p| p.x).sum::<f64>() / n;
    let my = points.iter().map(|p| p.y).sum::<f64>() / n;
    let rms = (points.iter().map(|p| (p.x - mx).powi(2) + (p.y - my).powi(2)).sum::<f64>() / n).sqrt();
    if !(rms > 0.0) || !rms.is_finite() {
        return Err(Error::degenerate("ellipse fit points coincide"));
    }
    let sc = rms / std::f64::consts::SQRT_2;

    let mut s1 = Matrix3::<f64>::zeros();
    let mut s2 = Matrix3::<f64>::zeros();
    let mut s3 = Matrix3::<f64>::zeros();
    for p in points {
        let (x, y) = ((p.x - mx) / sc, (p.y - my) / sc);
        let quad = nalgebra::Vector3::new(x * x, x * y, y * y);
        let lin = nalgebra::Vector3::new(x, y, 1.0);
        s1 += quad * quad.transpose();
        s2 += quad * lin.transpose();
        s3 += lin * lin.transpose();
    }
    let s3_inv = s3
        .try_inverse()
        .ok_or_else(|| Error::degenerate("ellipse fit points are collinear"))?;
    let t = -s3_inv * s2.transpose();
    let m = s1 + s2 * t;
    // Premultiply by the inverse of the constraint block [[0,0,2],[0,-1,0],[2,0,0]].
    let reduced = Matrix3::from_rows(&[
        (m.row(2) * 0.5).into_owned(),
        (-m.row(1)).into_owned(),
        (m.row(0) * 0.5).into_owned(),
    ]);

    let mut best: Option<(f64, nalgebra::Vector3<f64>)> = None;
    for lambda in real_eigenvalues(&reduced) {
        let shifted = reduced - Matrix3::identity() * lambda;
        let svd = shifted.svd(false, true);
        let v_t = svd.v_t.expect("requested V^T");
        let (k, _) = svd
            .singular_values
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.total_cmp(b.1))
            .unwrap();
        let v = v_t.row(k).transpose();
        let constraint = 4.0 * v[0] * v[2] - v[1] * v[1];
        if constraint > 0.0 && best.is_none_or(|(l, _)| lambda < l) {
            best = Some((lambda, v));
        }
    }
    let (_, quad) = best.ok_or_else(|| Error::degenerate("no elliptical conic fits the points"))?;
    let lin = t * quad;
    let e = conic_to_ellipse([quad[0], quad[1], quad[2], lin[0], lin[1], lin[2]])?;
    Ok(Ellipse {
        center: PixelPos::new(mx + sc * e.center.x, my + sc * e.center.y),
        semi_axes: e.semi_axes.map(|a| a * sc),
        angle: e.angle,
    })
}

fn real_eigenvalues(m: &Matrix3<f64>) -> Vec<f64> {
    let scale = m.abs().max().max(1e-300);
    m.complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() <= 1e-9 * scale)
        .map(|z| z.re)
        .collect()
}

/// Converts `a x^2 + b xy + c y^2 + d x + e y + f = 0` to geometric form.
pub fn conic_to_ellipse(coeffs: [f64; 6]) -> Result<Ellipse> {
    let [a, b, c, d, e, f] = coeffs;
    if !(4.0 * a * c - b * b > 0.0) {
        return Err(Error::degenerate("conic is not an ellipse"));
    }
    let center = Matrix2::new(2.0 * a, b, b, 2.0 * c)
        .try_inverse()
        .ok_or_else(|| Error::degenerate("conic has no center"))?
        * nalgebra::Vector2::new(-d, -e);
    let f0 = f + 0.5 * (d * center[0] + e * center[1]);
    let q = Matrix2::new(a, 0.5 * b, 0.5 * b, c);
    let eig = q.symmetric_eigen();
    // Semi-axis along eigenvector i is sqrt(-f0 / lambda_i); the major axis
    // belongs to the smaller |lambda|.
    let (i_major, i_minor) = if eig.eigenvalues[0].abs() <= eig.eigenvalues[1].abs() {
        (0, 1)
    } else {
        (1, 0)
    };
    let major2 = -f0 / eig.eigenvalues[i_major];
    let minor2 = -f0 / eig.eigenvalues[i_minor];
    if !(major2 > 0.0 && minor2 > 0.0) || !major2.is_finite() || !minor2.is_finite() {
        return Err(Error::degenerate("conic is imaginary or degenerate"));
    }
    let dir = eig.eigenvectors.column(i_major);
    Ok(Ellipse {
        center: PixelPos::new(center[0], center[1]),
        semi_axes: [major2.sqrt(), minor2.sqrt()],
        angle: normalize_angle(dir[1].atan2(dir[0])),
    })
}

/// Fits the reference ellipse of a six-point set and scales its axes.
pub fn fit_ellipse(points6: &[PixelPos; 6]) -> Result<FittedEllipse> {
    let e = fit_conic_ellipse(points6)?;
    Ok(FittedEllipse::from_ellipse(&e))
}

/// Reference ellipse for a triangle whose fit failed: centered on the
/// centroid and aligned with the longest edge, with semi-axes
/// `0.5 * (longest / 2, 4 * area / (pi * longest))`.
pub fn fallback_ellipse(tri: [PixelPos; 3]) -> Result<FittedEllipse> {
    let area = check_triangle(tri)?;
    let edges = [(tri[0], tri[1]), (tri[1], tri[2]), (tri[2], tri[0])];
    let (p, q) = edges
        .iter()
        .copied()
        .max_by(|a, b| a.0.dist2(a.1).total_cmp(&b.0.dist2(b.1)))
        .unwrap();
    let longest = p.dist(q);
    let major = longest / 2.0;
    let minor = (4.0 * area / (PI * longest)).min(major);
    Ok(FittedEllipse::from_ellipse(&Ellipse {
        center: centroid(tri),
        semi_axes: [major, minor],
        angle: normalize_angle((q.y - p.y).atan2(q.x - p.x)),
    }))
}

/// Reference ellipse for one triangle, falling back when the conic fit fails.
pub fn triangle_ellipse(tri: [PixelPos; 3]) -> Result<(FittedEllipse, bool)> {
    let six = six_point_set(tri)?;
    match fit_ellipse(&six) {
        Ok(e) => Ok((e, false)),
        Err(Error::Degenerate(_)) => Ok((fallback_ellipse(tri)?, true)),
        Err(other) => Err(other),
    }
}

/// Centroid-relative vertex coordinates scaled to unit triangle area.
pub fn triangle_feature(tri: [PixelPos; 3]) -> Result<[f64; 6]> {
    let area = check_triangle(tri)?;
    let s = (1.0 / area).sqrt();
    let c = centroid(tri);
    let mut out = [0.0; 6];
    for (i, v) in tri.iter().enumerate() {
        out[2 * i] = s * (v.x - c.x);
        out[2 * i + 1] = s * (v.y - c.y);
    }
    Ok(out)
}

/// `(x_ndc, y_ndc, s_xe / (s_ye + 1e-6), theta01)`.
pub fn ellipse_feature(e: &FittedEllipse, width: usize, height: usize) -> [f64; 4] {
    let c = e.center.to_ndc(width, height);
    [c.x, c.y, e.semi_axes[0] / (e.semi_axes[1] + 1e-6), e.theta01]
}

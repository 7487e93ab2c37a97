//! Convex geometry: halfspaces, H-rep polytopes, and body collision hulls.
//!
//! Polytopes are stored as intersections of halfspaces `(x - p) . n <= 0`
//! with outward unit normals. Nothing here assumes a particular winding or
//! face count; corridor generation and the k-DoP hull builder both produce
//! these directly.

use crate::Vec3;
use nalgebra::{Matrix3, Matrix4, Vector4};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Candidate vertices may violate a halfspace by up to this much and still
/// count as feasible; absorbs rounding in the 3x3 plane-triple solves.
const FEAS_TOL: f64 = 1e-9;
/// Vertices closer than this are merged during enumeration.
const DEDUP_TOL: f64 = 1e-9;
/// Below this determinant magnitude a plane triple is treated as parallel.
const SINGULAR_TOL: f64 = 1e-10;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum GeomError {
    /// Two polytopes share no volume.
    #[error("halfspace intersection is empty")]
    EmptyIntersection,
    /// The halfspaces admit a recession direction.
    #[error("polytope is unbounded")]
    Unbounded,
    /// The halfspaces bound a set with empty interior.
    #[error("polytope has empty interior")]
    Degenerate,
    /// No point satisfies every halfspace with strictly positive clearance.
    #[error("no strictly interior point exists")]
    Infeasible,
    /// Inputs to hull construction do not define a volume.
    #[error("degenerate hull input: {0}")]
    DegenerateInput(&'static str),
}

/// One halfspace `(x - point) . normal <= 0` with outward unit normal.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(from = "HalfSpaceRepr", into = "HalfSpaceRepr")]
pub struct HalfSpace {
    pub normal: Vec3,
    pub point: Vec3,
}

/// JSON shape: `{"n": [x,y,z], "p": [x,y,z]}`.
#[derive(Serialize, Deserialize)]
struct HalfSpaceRepr {
    n: [f64; 3],
    p: [f64; 3],
}

impl From<HalfSpaceRepr> for HalfSpace {
    fn from(r: HalfSpaceRepr) -> Self {
        HalfSpace::new(Vec3::from(r.n), Vec3::from(r.p))
    }
}

impl From<HalfSpace> for HalfSpaceRepr {
    fn from(h: HalfSpace) -> Self {
        HalfSpaceRepr {
            n: h.normal.into(),
            p: h.point.into(),
        }
    }
}

impl HalfSpace {
    /// Builds a halfspace through `point`, normalizing `normal`.
    ///
    /// Panics if `normal` is numerically zero; callers construct normals
    /// from geometry that guarantees a direction exists.
    pub fn new(normal: Vec3, point: Vec3) -> Self {
        let len = normal.norm();
        assert!(len > 1e-12, "halfspace normal must be nonzero");
        HalfSpace {
            normal: normal / len,
            point,
        }
    }

    /// Signed distance of `p` from the boundary plane; negative is inside.
    pub fn signed_dist(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.point))
    }

    /// Offset `b` in the form `n . x <= b`.
    pub fn offset(&self) -> f64 {
        self.normal.dot(&self.point)
    }
}

/// Intersection of halfspaces. May be unbounded or empty; the constructors
/// used for corridors guarantee bounded sets with nonempty interior.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvexPolytope {
    pub planes: Vec<HalfSpace>,
}

impl ConvexPolytope {
    /// Axis-aligned box as six halfspaces, ordered -x, +x, -y, +y, -z, +z.
    pub fn from_aabb(min: Vec3, max: Vec3) -> Self {
        assert!(
            min.x < max.x && min.y < max.y && min.z < max.z,
            "box must have positive extent"
        );
        let planes = vec![
            HalfSpace::new(Vec3::new(-1.0, 0.0, 0.0), min),
            HalfSpace::new(Vec3::new(1.0, 0.0, 0.0), max),
            HalfSpace::new(Vec3::new(0.0, -1.0, 0.0), min),
            HalfSpace::new(Vec3::new(0.0, 1.0, 0.0), max),
            HalfSpace::new(Vec3::new(0.0, 0.0, -1.0), min),
            HalfSpace::new(Vec3::new(0.0, 0.0, 1.0), max),
        ];
        ConvexPolytope { planes }
    }

    /// True when `p` satisfies every halfspace within `tol`.
    pub fn contains(&self, p: &Vec3, tol: f64) -> bool {
        self.planes.iter().all(|h| h.signed_dist(p) <= tol)
    }

    /// Largest signed distance over all planes; negative means `p` is
    /// strictly inside by that margin.
    pub fn max_violation(&self, p: &Vec3) -> f64 {
        self.planes
            .iter()
            .map(|h| h.signed_dist(p))
            .fold(f64::NEG_INFINITY, f64::max)
    }

    /// The polytope with every face moved inward by `margin` along its
    /// normal. Planning against an inset corridor keeps physical clearance
    /// for the soft-penalty residual and for excursions between constraint
    /// samples; an over-large margin can empty the set, which the optimizer
    /// reports when it checks the overlaps.
    pub fn inset(&self, margin: f64) -> ConvexPolytope {
        ConvexPolytope {
            planes: self
                .planes
                .iter()
                .map(|h| HalfSpace { normal: h.normal, point: h.point - margin * h.normal })
                .collect(),
        }
    }

    /// Intersection of two polytopes. Duplicate planes (same normal and
    /// offset within 1e-9) are kept once. Errors when the result has no
    /// interior volume; corridor overlap checks rely on that, so touching
    /// sets count as empty here.
    pub fn intersect(&self, other: &ConvexPolytope) -> Result<ConvexPolytope, GeomError> {
        let mut planes: Vec<HalfSpace> = Vec::with_capacity(self.planes.len() + other.planes.len());
        for h in self.planes.iter().chain(other.planes.iter()) {
            let dup = planes.iter().any(|q| {
                (q.normal - h.normal).norm() <= 1e-9 && (q.offset() - h.offset()).abs() <= 1e-9
            });
            if !dup {
                planes.push(*h);
            }
        }
        let poly = ConvexPolytope { planes };
        poly.interior_point()
            .map_err(|_| GeomError::EmptyIntersection)?;
        Ok(poly)
    }

    /// Deepest interior point: the point maximizing the minimum clearance to
    /// all boundary planes. Found exactly by scanning basic solutions of the
    /// max-clearance program (4 active planes each); a vertex-centroid
    /// fallback covers degenerate scans. Bounded polytopes always admit a
    /// basic optimum, so the scan is exact for every corridor element.
    pub fn interior_point(&self) -> Result<Vec3, GeomError> {
        let n = self.planes.len();
        let mut best_r = f64::NEG_INFINITY;
        let mut best_p = Vec3::zeros();
        // Maximize r subject to n_k . x + r <= b_k over (x, r).
        for i in 0..n {
            for j in (i + 1)..n {
                for k in (j + 1)..n {
                    for l in (k + 1)..n {
                        let idx = [i, j, k, l];
                        let mut a = Matrix4::<f64>::zeros();
                        let mut rhs = Vector4::<f64>::zeros();
                        for (row, &m) in idx.iter().enumerate() {
                            let h = &self.planes[m];
                            a[(row, 0)] = h.normal.x;
                            a[(row, 1)] = h.normal.y;
                            a[(row, 2)] = h.normal.z;
                            a[(row, 3)] = 1.0;
                            rhs[row] = h.offset();
                        }
                        let Some(sol) = a.lu().solve(&rhs) else {
                            continue;
                        };
                        let r = sol[3];
                        if r <= best_r || !r.is_finite() {
                            continue;
                        }
                        let p = Vec3::new(sol[0], sol[1], sol[2]);
                        let feasible = self
                            .planes
                            .iter()
                            .all(|h| h.normal.dot(&p) + r <= h.offset() + FEAS_TOL);
                        if feasible {
                            best_r = r;
                            best_p = p;
                        }
                    }
                }
            }
        }
        if best_r > 0.0 {
            return Ok(best_p);
        }
        // Degenerate scan (n < 4 or singular quadruples): fall back to the
        // centroid of whatever vertices exist.
        let verts = raw_vertices(&self.planes);
        if !verts.is_empty() {
            let c = verts.iter().sum::<Vec3>() / verts.len() as f64;
            if self.max_violation(&c) < 0.0 {
                return Ok(c);
            }
        }
        Err(GeomError::Infeasible)
    }

    /// All vertices of a bounded polytope with nonempty interior, by brute
    /// force over plane triples with feasibility filtering and 1e-9
    /// deduplication. Order is deterministic (triple scan order).
    pub fn enumerate_vertices(&self) -> Result<Vec<Vec3>, GeomError> {
        if self.has_recession_direction() {
            return Err(GeomError::Unbounded);
        }
        let verts = raw_vertices(&self.planes);
        if verts.len() < 4 || self.interior_point().is_err() {
            return Err(GeomError::Degenerate);
        }
        Ok(verts)
    }

    /// Looks for a direction `d` with `n_k . d <= 0` for all planes among
    /// the candidate rays of the recession cone: negated normals and pairwise
    /// normal cross products. Exact for every polyhedral cone whose extreme
    /// rays lie on two facets, which covers corridor and k-DoP geometry.
    fn has_recession_direction(&self) -> bool {
        let feasible_dir = |d: &Vec3| self.planes.iter().all(|h| h.normal.dot(d) <= 1e-12);
        for h in &self.planes {
            if feasible_dir(&(-h.normal)) {
                return true;
            }
        }
        for i in 0..self.planes.len() {
            for j in (i + 1)..self.planes.len() {
                let c = self.planes[i].normal.cross(&self.planes[j].normal);
                if c.norm() < 1e-12 {
                    continue;
                }
                let c = c.normalize();
                if feasible_dir(&c) || feasible_dir(&(-c)) {
                    return true;
                }
            }
        }
        false
    }
}

/// Feasible, deduplicated intersections of plane triples.
fn raw_vertices(planes: &[HalfSpace]) -> Vec<Vec3> {
    let n = planes.len();
    let mut verts: Vec<Vec3> = Vec::new();
    for i in 0..n {
        for j in (i + 1)..n {
            for k in (j + 1)..n {
                let mut a = Matrix3::<f64>::zeros();
                let mut rhs = Vec3::zeros();
                for (row, &m) in [i, j, k].iter().enumerate() {
                    a[(row, 0)] = planes[m].normal.x;
                    a[(row, 1)] = planes[m].normal.y;
                    a[(row, 2)] = planes[m].normal.z;
                    rhs[row] = planes[m].offset();
                }
                if a.determinant().abs() < SINGULAR_TOL {
                    continue;
                }
                let Some(x) = a.lu().solve(&rhs) else {
                    continue;
                };
                let x = Vec3::new(x[0], x[1], x[2]);
                let feasible = planes
                    .iter()
                    .all(|h| h.signed_dist(&x) <= FEAS_TOL);
                if feasible && !verts.iter().any(|v| (v - x).norm() <= DEDUP_TOL) {
                    verts.push(x);
                }
            }
        }
    }
    verts
}

/// Rigid body collision geometry: the convex hull vertices of the vehicle
/// in the body frame, with the center of mass at the origin.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "BodyHullRepr", into = "BodyHullRepr")]
pub struct BodyHull {
    pub vertices: Vec<Vec3>,
}

/// JSON shape: `{"vertices": [[x,y,z], ...]}`.
#[derive(Serialize, Deserialize)]
struct BodyHullRepr {
    vertices: Vec<[f64; 3]>,
}

impl From<BodyHullRepr> for BodyHull {
    fn from(r: BodyHullRepr) -> Self {
        BodyHull {
            vertices: r.vertices.into_iter().map(Vec3::from).collect(),
        }
    }
}

impl From<BodyHull> for BodyHullRepr {
    fn from(h: BodyHull) -> Self {
        BodyHullRepr {
            vertices: h.vertices.iter().map(|v| (*v).into()).collect(),
        }
    }
}

impl BodyHull {
    /// Validates vertex count, volume, and that the origin lies inside the
    /// vertex bounding box. Full extremality of file-loaded vertices is not
    /// re-derived; [`kdop_hull`] guarantees it for computed hulls.
    pub fn new(vertices: Vec<Vec3>) -> Result<Self, GeomError> {
        if vertices.len() < 4 {
            return Err(GeomError::DegenerateInput("fewer than 4 hull vertices"));
        }
        if !spans_volume(&vertices) {
            return Err(GeomError::DegenerateInput("hull vertices are coplanar"));
        }
        for axis in 0..3 {
            let lo = vertices.iter().map(|v| v[axis]).fold(f64::INFINITY, f64::min);
            let hi = vertices
                .iter()
                .map(|v| v[axis])
                .fold(f64::NEG_INFINITY, f64::max);
            if lo >= -1e-12 || hi <= 1e-12 {
                return Err(GeomError::DegenerateInput(
                    "hull does not enclose the body origin",
                ));
            }
        }
        Ok(BodyHull { vertices })
    }

    /// Largest absolute vertex coordinate: the radius of the smallest
    /// origin-centered cube containing the hull. Point-model planning
    /// inflates the grid by this.
    pub fn max_abs_coord(&self) -> f64 {
        self.vertices
            .iter()
            .map(|v| v.x.abs().max(v.y.abs()).max(v.z.abs()))
            .fold(0.0, f64::max)
    }
}

/// True when the points span a 3D volume (max |triple product| of a greedily
/// chosen basis exceeds 1e-9).
fn spans_volume(points: &[Vec3]) -> bool {
    let p0 = points[0];
    let Some(p1) = points
        .iter()
        .max_by(|a, b| (*a - p0).norm().total_cmp(&(*b - p0).norm()))
    else {
        return false;
    };
    let e1 = p1 - p0;
    if e1.norm() < 1e-9 {
        return false;
    }
    let Some(p2) = points
        .iter()
        .max_by(|a, b| e1.cross(&(*a - p0)).norm().total_cmp(&e1.cross(&(*b - p0)).norm()))
    else {
        return false;
    };
    let e2 = p2 - p0;
    if e1.cross(&e2).norm() < 1e-9 {
        return false;
    }
    let n = e1.cross(&e2);
    points.iter().any(|p| n.dot(&(p - p0)).abs() > 1e-9)
}

/// Discrete oriented polytope of `points` along `directions`: intersects the
/// min/max projection slab for each direction and enumerates the vertices.
/// The hull must bound a volume and strictly enclose the origin, since the
/// whole-body constraint pivots it about the center of mass.
pub fn kdop_hull(points: &[Vec3], directions: &[Vec3]) -> Result<BodyHull, GeomError> {
    if points.len() < 4 || !spans_volume(points) {
        return Err(GeomError::DegenerateInput("points span no volume"));
    }
    let mut planes: Vec<HalfSpace> = Vec::with_capacity(directions.len() * 2);
    for d in directions {
        let len = d.norm();
        if len < 1e-12 {
            return Err(GeomError::DegenerateInput("zero slab direction"));
        }
        let u = d / len;
        let mut lo = f64::INFINITY;
        let mut hi = f64::NEG_INFINITY;
        for p in points {
            let s = u.dot(p);
            lo = lo.min(s);
            hi = hi.max(s);
        }
        for h in [HalfSpace::new(u, u * hi), HalfSpace::new(-u, u * lo)] {
            let dup = planes.iter().any(|q| {
                (q.normal - h.normal).norm() <= 1e-9 && (q.offset() - h.offset()).abs() <= 1e-9
            });
            if !dup {
                planes.push(h);
            }
        }
    }
    let poly = ConvexPolytope { planes };
    let verts = poly
        .enumerate_vertices()
        .map_err(|_| GeomError::DegenerateInput("directions do not bound a volume"))?;
    if poly.max_violation(&Vec3::zeros()) >= -1e-12 {
        return Err(GeomError::DegenerateInput(
            "hull does not enclose the body origin",
        ));
    }
    BodyHull::new(verts)
}

//! Safe flight corridor generation.
//!
//! Turns a discrete collision-free path into a chain of overlapping convex
//! polytopes. Each polytope is grown around a seed segment of the path and
//! then carved back by cutting planes until no occupied voxel pokes into it,
//! so the interior is free space by construction. Consecutive polytopes share
//! the waypoint where the next seed starts, which gives the trajectory
//! optimizer a nonempty joint region to place its waypoints in.

use crate::envmap::{line_free, VoxelGrid};
use crate::geom::{ConvexPolytope, GeomError, HalfSpace};
use crate::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Containment slack when testing waypoints and the goal against a polytope.
const CONTAIN_TOL: f64 = 1e-9;

/// Margin for the conservative cube/interior intersection test. A voxel cube
/// counts as intruding only if its support point along every plane normal is
/// strictly inside by more than this.
const CUT_MARGIN: f64 = 1e-9;

/// Consecutive forced advances tolerated before corridor generation gives up.
const MAX_STALLS: usize = 3;

#[derive(Debug, Error)]
pub enum CorridorError {
    #[error("path needs at least two waypoints")]
    ShortPath,
    #[error("seed segment at waypoint {0} starts in occupied or out-of-bounds space")]
    SeedBlocked(usize),
    #[error("no forward progress after waypoint {0}")]
    Stalled(usize),
    #[error("ran out of waypoints before a polytope enclosed the goal")]
    EndOfPath,
    #[error(transparent)]
    Geometry(#[from] GeomError),
}

/// Tuning knobs for corridor construction.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default)]
pub struct CorridorParams {
    /// Longest seed segment considered when skipping ahead along the path (m).
    pub max_segment_length: f64,
    /// How far the seed segment's bounding box is dilated before carving (m).
    pub inflation_bound: f64,
}

impl Default for CorridorParams {
    fn default() -> Self {
        Self { max_segment_length: 4.0, inflation_bound: 3.0 }
    }
}

fn closest_on_segment(a: &Vec3, b: &Vec3, p: &Vec3) -> Vec3 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    if len2 == 0.0 {
        return *a;
    }
    let t = ((p - a).dot(&ab) / len2).clamp(0.0, 1.0);
    a + ab * t
}

/// Farthest path index visible from `from` within the segment length cap.
///
/// Scans every later waypoint and keeps the largest index whose straight
/// line from `path[from]` stays in free voxels and spans at most
/// `max_segment_length`. Later waypoints may qualify even when nearer ones do
/// not (the path can bend back into view). Falls back to the immediate next
/// waypoint when nothing qualifies so the caller always makes progress.
pub fn find_far_point(
    grid: &VoxelGrid,
    path: &[Vec3],
    from: usize,
    max_segment_length: f64,
) -> Result<usize, CorridorError> {
    if from + 1 >= path.len() {
        return Err(CorridorError::EndOfPath);
    }
    let mut best = None;
    for i in from + 1..path.len() {
        let reach = (path[i] - path[from]).norm() <= max_segment_length;
        if reach && line_free(grid, &path[from], &path[i]) {
            best = Some(i);
        }
    }
    Ok(best.unwrap_or(from + 1))
}

/// Whether the voxel cube at `center` might intersect the polytope interior.
///
/// Uses the cube's support point along each plane normal: half extent times
/// the L1 norm of the normal. Over-approximates the cube (it treats the
/// per-plane support corners as attained simultaneously), so a `false` is a
/// guarantee of separation while a `true` may be spurious. Spurious cuts
/// only shrink the corridor, never leak an obstacle into it.
fn cube_intrudes(poly: &ConvexPolytope, center: &Vec3, half: f64) -> bool {
    poly.planes
        .iter()
        .all(|pl| pl.signed_dist(center) - half * pl.normal.abs().sum() < -CUT_MARGIN)
}

/// Grow a free convex polytope around the segment `a`-`b`.
///
/// Starts from the segment's bounding box dilated by `bound` and clipped to
/// the grid extents, then repeatedly picks the intruding occupied voxel
/// closest to the segment and adds a cutting plane that excludes it. The
/// plane's normal points from the segment's closest point toward the voxel
/// center and it is offset from the center by the cube's support radius, so
/// the whole cube ends up outside while the segment stays inside. Cutting
/// the closest voxel first keeps the planes tight against the nearest
/// obstacles (a far voxel's plane would slice away free space in between).
pub fn inflate_polytope(
    grid: &VoxelGrid,
    a: &Vec3,
    b: &Vec3,
    bound: f64,
) -> Result<ConvexPolytope, CorridorError> {
    if !line_free(grid, a, b) {
        return Err(CorridorError::SeedBlocked(0));
    }
    let half = grid.resolution() * 0.5;
    let pad = Vec3::repeat(bound);
    let lo = a.inf(b) - pad;
    let hi = a.sup(b) + pad;
    let lo = lo.sup(&grid.origin());
    let hi = hi.inf(&grid.world_max());
    let mut poly = ConvexPolytope::from_aabb(lo, hi);

    // Candidate cubes overlapping the dilated box, ascending linear index.
    // Each loop iteration removes at least the chosen candidate, so the
    // carving terminates after at most candidates.len() cuts.
    let mut candidates = grid.occupied_centers_in_box(&lo, &hi);
    candidates.retain(|(_, c)| cube_intrudes(&poly, c, half));

    while !candidates.is_empty() {
        let mut pick = 0;
        let mut pick_dist = f64::INFINITY;
        let mut pick_foot = Vec3::zeros();
        for (slot, (_, c)) in candidates.iter().enumerate() {
            let foot = closest_on_segment(a, b, c);
            let d = (c - foot).norm();
            if d < pick_dist {
                pick = slot;
                pick_dist = d;
                pick_foot = foot;
            }
        }
        let (pick_lin, center) = candidates[pick];
        if pick_dist < 1e-12 {
            return Err(CorridorError::Geometry(GeomError::DegenerateInput(
                "cut normal undefined: occupied voxel center on seed segment",
            )));
        }
        let normal = (center - pick_foot) / pick_dist;
        // Pull the plane back from the voxel center by the cube's support
        // radius, but never past the segment itself. When the segment grazes
        // the cube the two bounds meet and a thin sliver of the cube stays
        // inside; that sliver is unavoidable for any convex set containing
        // the segment, so the cube is dropped from the candidates regardless.
        let support = half * normal.abs().sum();
        let offset = support.min(pick_dist - CUT_MARGIN).max(0.0);
        let plane = HalfSpace::new(normal, center - normal * offset);
        poly.planes.push(plane);
        candidates.retain(|(lin, c)| *lin != pick_lin && cube_intrudes(&poly, c, half));
    }
    Ok(poly)
}

/// Cover the path with overlapping free polytopes from start to goal.
///
/// Seeds each polytope at the current waypoint, extending to the farthest
/// visible waypoint (or collapsing to a point seed when even the next hop is
/// blocked by inflation artifacts). After carving, the next seed jumps to the
/// farthest waypoint still inside the new polytope. A polytope that fails to
/// advance forces a single-step advance instead; three forced advances in a
/// row mean the path is not coverable and generation stops with an error.
pub fn generate_corridor(
    grid: &VoxelGrid,
    path: &[Vec3],
    params: &CorridorParams,
) -> Result<Vec<ConvexPolytope>, CorridorError> {
    if path.len() < 2 {
        return Err(CorridorError::ShortPath);
    }
    let goal = path[path.len() - 1];
    let mut polys = Vec::new();
    let mut wp = 0usize;
    let mut stalls = 0usize;
    loop {
        let far = find_far_point(grid, path, wp, params.max_segment_length)?;
        let seed_end = if line_free(grid, &path[wp], &path[far]) { path[far] } else { path[wp] };
        let poly = inflate_polytope(grid, &path[wp], &seed_end, params.inflation_bound)
            .map_err(|e| match e {
                CorridorError::SeedBlocked(_) => CorridorError::SeedBlocked(wp),
                other => other,
            })?;
        let contains_goal = poly.contains(&goal, CONTAIN_TOL);
        polys.push(poly);
        if contains_goal {
            return Ok(polys);
        }
        let poly = polys.last().unwrap();
        let mut reached = wp;
        for (i, p) in path.iter().enumerate().skip(wp + 1) {
            if poly.contains(p, CONTAIN_TOL) {
                reached = i;
            }
        }
        if reached > wp {
            wp = reached;
            stalls = 0;
        } else {
            stalls += 1;
            if stalls >= MAX_STALLS {
                return Err(CorridorError::Stalled(wp));
            }
            wp += 1;
            if wp >= path.len() {
                return Err(CorridorError::EndOfPath);
            }
        }
    }
}

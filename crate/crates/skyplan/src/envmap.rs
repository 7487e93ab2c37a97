//! Occupancy voxel grid, A* seed paths, line-of-sight tests, and a Euclidean
//! distance field.
//!
//! The grid is the only view of the world the planner sees: point clouds and
//! obstacle boxes are rasterized into voxels, optionally dilated (Chebyshev
//! metric) for point-model planning, and queried by A*, the corridor
//! generator, and diagnostics. Voxel (ix, iy, iz) covers the half-open cube
//! `origin + res*[ix, ix+1) x ...`; linear indices are x-fastest, which also
//! fixes every tie-break in this module.

use crate::Vec3;
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;
use thiserror::Error;

/// Distance reported for voxels with no occupied voxel anywhere in the grid.
pub const ESDF_FREE: f64 = 1e9;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum EnvError {
    /// Grid bounds have non-positive extent on some axis.
    #[error("grid bounds are empty or inverted")]
    EmptyBounds,
    /// Start and goal are not connected through free voxels.
    #[error("no path between start and goal")]
    NoPath,
    /// A query point lies outside the grid bounds.
    #[error("point outside grid bounds")]
    OutOfBounds,
    #[error("start voxel is occupied")]
    StartOccupied,
    #[error("goal voxel is occupied")]
    GoalOccupied,
    #[error("parse error: {0}")]
    Parse(String),
    #[error("io error: {0}")]
    Io(String),
}

impl From<std::io::Error> for EnvError {
    fn from(e: std::io::Error) -> Self {
        EnvError::Io(e.to_string())
    }
}

/// Unordered obstacle sample points in world coordinates.
#[derive(Debug, Clone, Default)]
pub struct PointCloud {
    pub points: Vec<Vec3>,
}

impl PointCloud {
    /// Loads `.ply` (ASCII 1.0) or `.csv` / `.xyz` (one `x,y,z` per line),
    /// dispatching on the file extension.
    pub fn load(path: &Path) -> Result<PointCloud, EnvError> {
        let text = std::fs::read_to_string(path)?;
        match path
            .extension()
            .and_then(|e| e.to_str())
            .map(|e| e.to_ascii_lowercase())
            .as_deref()
        {
            Some("ply") => Self::from_ply_str(&text),
            Some("csv") | Some("xyz") | Some("txt") => Self::from_csv_str(&text),
            other => Err(EnvError::Parse(format!(
                "unsupported point cloud extension {other:?} (expected ply, csv, xyz, txt)"
            ))),
        }
    }

    /// Minimal ASCII PLY reader: `format ascii 1.0`, a `vertex` element with
    /// float properties including x, y, z. Extra properties and non-vertex
    /// elements are skipped; binary PLY is rejected.
    pub fn from_ply_str(text: &str) -> Result<PointCloud, EnvError> {
        let mut lines = text.lines();
        let magic = lines
            .next()
            .ok_or_else(|| EnvError::Parse("empty PLY file".into()))?;
        if magic.trim() != "ply" {
            return Err(EnvError::Parse("missing 'ply' magic line".into()));
        }
        // (element name, line count); vertex element additionally records
        // which property columns hold x, y, z.
        let mut elements: Vec<(String, usize)> = Vec::new();
        let mut vertex_props: Vec<String> = Vec::new();
        let mut format_seen = false;
        for line in lines.by_ref() {
            let line = line.trim();
            if line == "end_header" {
                break;
            }
            let mut tok = line.split_whitespace();
            match tok.next() {
                Some("format") => {
                    let rest: Vec<&str> = tok.collect();
                    if rest != ["ascii", "1.0"] {
                        return Err(EnvError::Parse(format!(
                            "unsupported PLY format '{}' (only ascii 1.0)",
                            rest.join(" ")
                        )));
                    }
                    format_seen = true;
                }
                Some("element") => {
                    let name = tok.next().unwrap_or_default().to_string();
                    let count: usize = tok
                        .next()
                        .and_then(|c| c.parse().ok())
                        .ok_or_else(|| EnvError::Parse("bad element count".into()))?;
                    elements.push((name, count));
                }
                Some("property") => {
                    if let Some((name, _)) = elements.last() {
                        if name == "vertex" {
                            let prop = tok.last().unwrap_or_default().to_string();
                            vertex_props.push(prop);
                        }
                    }
                }
                Some("comment") | Some("obj_info") | None => {}
                Some(other) => {
                    return Err(EnvError::Parse(format!("unknown PLY header entry '{other}'")));
                }
            }
        }
        if !format_seen {
            return Err(EnvError::Parse("PLY header missing format line".into()));
        }
        let col = |name: &str| vertex_props.iter().position(|p| p == name);
        let (Some(cx), Some(cy), Some(cz)) = (col("x"), col("y"), col("z")) else {
            return Err(EnvError::Parse("vertex element lacks x/y/z properties".into()));
        };
        let mut points = Vec::new();
        for (name, count) in &elements {
            for i in 0..*count {
                let line = lines
                    .next()
                    .ok_or_else(|| EnvError::Parse(format!("truncated element '{name}'")))?;
                if name != "vertex" {
                    continue;
                }
                let fields: Vec<&str> = line.split_whitespace().collect();
                let get = |c: usize| -> Result<f64, EnvError> {
                    fields
                        .get(c)
                        .and_then(|f| f.parse().ok())
                        .ok_or_else(|| EnvError::Parse(format!("bad vertex line {i}")))
                };
                points.push(Vec3::new(get(cx)?, get(cy)?, get(cz)?));
            }
        }
        Ok(PointCloud { points })
    }

    /// One `x,y,z` triple per line; blank lines and a single leading header
    /// line are tolerated.
    pub fn from_csv_str(text: &str) -> Result<PointCloud, EnvError> {
        let mut points = Vec::new();
        let mut first_data = true;
        for (ln, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').map(str::trim).collect();
            let parsed: Option<Vec<f64>> =
                fields.iter().map(|f| f.parse::<f64>().ok()).collect();
            match parsed {
                Some(vals) if vals.len() >= 3 => {
                    points.push(Vec3::new(vals[0], vals[1], vals[2]));
                    first_data = false;
                }
                _ if first_data => {
                    // Header row; only allowed once, before any data.
                    first_data = false;
                }
                _ => {
                    return Err(EnvError::Parse(format!("bad csv line {}", ln + 1)));
                }
            }
        }
        Ok(PointCloud { points })
    }
}

/// Grid metadata echoed into planner reports.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct GridMeta {
    pub origin: [f64; 3],
    pub resolution: f64,
    pub dims: [usize; 3],
}

/// Dense boolean occupancy grid over an axis-aligned world box.
#[derive(Debug, Clone)]
pub struct VoxelGrid {
    origin: Vec3,
    resolution: f64,
    dims: [usize; 3],
    occ: Vec<bool>,
}

impl VoxelGrid {
    /// Empty grid covering `[min, max)` at `resolution`; the upper bound is
    /// rounded up to a whole voxel.
    pub fn new(min: Vec3, max: Vec3, resolution: f64) -> Result<VoxelGrid, EnvError> {
        if !(resolution > 0.0) || min.x >= max.x || min.y >= max.y || min.z >= max.z {
            return Err(EnvError::EmptyBounds);
        }
        let mut dims = [0usize; 3];
        for a in 0..3 {
            dims[a] = (((max[a] - min[a]) / resolution) - 1e-9).ceil().max(1.0) as usize;
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(VoxelGrid {
            origin: min,
            resolution,
            dims,
            occ: vec![false; n],
        })
    }

    pub fn origin(&self) -> Vec3 {
        self.origin
    }

    pub fn resolution(&self) -> f64 {
        self.resolution
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    /// Upper world corner of the voxelized volume.
    pub fn world_max(&self) -> Vec3 {
        self.origin
            + Vec3::new(
                self.dims[0] as f64,
                self.dims[1] as f64,
                self.dims[2] as f64,
            ) * self.resolution
    }

    pub fn meta(&self) -> GridMeta {
        GridMeta {
            origin: self.origin.into(),
            resolution: self.resolution,
            dims: self.dims,
        }
    }

    /// x-fastest linear index; the canonical tie-break order.
    pub fn linear(&self, idx: [usize; 3]) -> usize {
        (idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]
    }

    fn unlinear(&self, lin: usize) -> [usize; 3] {
        let ix = lin % self.dims[0];
        let iy = (lin / self.dims[0]) % self.dims[1];
        let iz = lin / (self.dims[0] * self.dims[1]);
        [ix, iy, iz]
    }

    /// Voxel containing `p`, or None outside the grid. Points exactly on the
    /// upper boundary are clamped into the last voxel.
    pub fn voxel_of(&self, p: &Vec3) -> Option<[usize; 3]> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.resolution;
            if rel < 0.0 {
                return None;
            }
            let mut i = rel.floor() as usize;
            if i >= self.dims[a] {
                if i == self.dims[a] && (rel - self.dims[a] as f64).abs() <= 1e-9 {
                    i = self.dims[a] - 1;
                } else {
                    return None;
                }
            }
            idx[a] = i;
        }
        Some(idx)
    }

    /// World center of a voxel.
    pub fn center(&self, idx: [usize; 3]) -> Vec3 {
        self.origin
            + Vec3::new(
                (idx[0] as f64 + 0.5) * self.resolution,
                (idx[1] as f64 + 0.5) * self.resolution,
                (idx[2] as f64 + 0.5) * self.resolution,
            )
    }

    pub fn occupied(&self, idx: [usize; 3]) -> bool {
        self.occ[self.linear(idx)]
    }

    pub fn set_occupied(&mut self, idx: [usize; 3]) {
        let lin = self.linear(idx);
        self.occ[lin] = true;
    }

    pub fn clear_voxel(&mut self, idx: [usize; 3]) {
        let lin = self.linear(idx);
        self.occ[lin] = false;
    }

    pub fn occupied_count(&self) -> usize {
        self.occ.iter().filter(|&&o| o).count()
    }

    /// Marks the voxel containing each point; points outside the bounds are
    /// ignored.
    pub fn mark_points(&mut self, cloud: &PointCloud) {
        for p in &cloud.points {
            if let Some(idx) = self.voxel_of(p) {
                self.set_occupied(idx);
            }
        }
    }

    /// Marks every voxel whose open cube overlaps the box `[min, max]`.
    /// Touching at a shared face does not occupy.
    pub fn mark_box(&mut self, min: &Vec3, max: &Vec3) {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = ((min[a] - self.origin[a]) / self.resolution).floor().max(0.0) as usize;
            let h = ((max[a] - self.origin[a]) / self.resolution).ceil().max(0.0) as usize;
            lo[a] = l.min(self.dims[a]);
            hi[a] = h.min(self.dims[a]);
        }
        for iz in lo[2]..hi[2] {
            for iy in lo[1]..hi[1] {
                for ix in lo[0]..hi[0] {
                    let vmin = self.center([ix, iy, iz])
                        - Vec3::repeat(0.5 * self.resolution);
                    let vmax = vmin + Vec3::repeat(self.resolution);
                    let overlaps = (0..3).all(|a| min[a] < vmax[a] && max[a] > vmin[a]);
                    if overlaps {
                        self.set_occupied([ix, iy, iz]);
                    }
                }
            }
        }
    }

    /// Morphological dilation of the occupied set by
    /// `ceil(radius/resolution)` voxels in the Chebyshev metric, as three
    /// separable axis passes.
    pub fn inflate(&mut self, radius: f64) {
        if radius <= 0.0 {
            return;
        }
        let r = ((radius / self.resolution) - 1e-9).ceil().max(0.0) as usize;
        if r == 0 {
            return;
        }
        let [nx, ny, nz] = self.dims;
        for axis in 0..3 {
            let mut next = self.occ.clone();
            for iz in 0..nz {
                for iy in 0..ny {
                    for ix in 0..nx {
                        let idx = [ix, iy, iz];
                        if !self.occ[self.linear(idx)] {
                            continue;
                        }
                        let lo = idx[axis].saturating_sub(r);
                        let hi = (idx[axis] + r).min(self.dims[axis] - 1);
                        let mut t = idx;
                        for v in lo..=hi {
                            t[axis] = v;
                            next[self.linear(t)] = true;
                        }
                    }
                }
            }
            self.occ = next;
        }
    }

    /// Occupied voxels whose centers fall inside the world box, as
    /// (linear index, center), in ascending linear order.
    pub fn occupied_centers_in_box(&self, min: &Vec3, max: &Vec3) -> Vec<(usize, Vec3)> {
        let mut lo = [0usize; 3];
        let mut hi = [0usize; 3];
        for a in 0..3 {
            let l = ((min[a] - self.origin[a]) / self.resolution - 0.5).floor().max(0.0);
            let h = ((max[a] - self.origin[a]) / self.resolution + 0.5).ceil().max(0.0);
            lo[a] = (l as usize).min(self.dims[a]);
            hi[a] = (h as usize).min(self.dims[a]);
        }
        let mut out = Vec::new();
        for iz in lo[2]..hi[2] {
            for iy in lo[1]..hi[1] {
                for ix in lo[0]..hi[0] {
                    let idx = [ix, iy, iz];
                    if self.occ[self.linear(idx)] {
                        out.push((self.linear(idx), self.center(idx)));
                    }
                }
            }
        }
        out
    }
}

/// Rasterizes a point cloud into a fresh grid and dilates it.
pub fn build_grid(
    cloud: &PointCloud,
    resolution: f64,
    bounds: (Vec3, Vec3),
    inflate_radius: f64,
) -> Result<VoxelGrid, EnvError> {
    let mut grid = VoxelGrid::new(bounds.0, bounds.1, resolution)?;
    grid.mark_points(cloud);
    grid.inflate(inflate_radius);
    Ok(grid)
}

/// A* result: ordered voxel centers from start to goal, and the summed edge
/// cost in meters.
#[derive(Debug, Clone)]
pub struct GridPath {
    pub waypoints: Vec<Vec3>,
    pub cost: f64,
}

/// 26-connected neighborhood offsets in a fixed scan order.
fn neighbor_offsets() -> [( [i64; 3], f64); 26] {
    let mut out = [([0i64; 3], 0.0f64); 26];
    let mut n = 0;
    let mut dz = -1i64;
    while dz <= 1 {
        let mut dy = -1i64;
        while dy <= 1 {
            let mut dx = -1i64;
            while dx <= 1 {
                if dx != 0 || dy != 0 || dz != 0 {
                    let d2 = (dx * dx + dy * dy + dz * dz) as f64;
                    out[n] = ([dx, dy, dz], d2.sqrt());
                    n += 1;
                }
                dx += 1;
            }
            dy += 1;
        }
        dz += 1;
    }
    out
}

/// Open-list entry ordered by (f, h, linear index) ascending, so the heap pop
/// order is a strict total order and the search is deterministic.
#[derive(Debug)]
struct OpenEntry {
    f: f64,
    h: f64,
    lin: usize,
}

impl PartialEq for OpenEntry {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}
impl Eq for OpenEntry {}
impl PartialOrd for OpenEntry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for OpenEntry {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed so BinaryHeap (a max-heap) pops the smallest key.
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| other.h.total_cmp(&self.h))
            .then_with(|| other.lin.cmp(&self.lin))
    }
}

/// A* over free voxels with Euclidean edge costs and a Euclidean heuristic
/// (admissible: no 26-connected path is shorter than the straight line).
pub fn astar(grid: &VoxelGrid, start: &Vec3, goal: &Vec3) -> Result<GridPath, EnvError> {
    let s = grid.voxel_of(start).ok_or(EnvError::OutOfBounds)?;
    let g = grid.voxel_of(goal).ok_or(EnvError::OutOfBounds)?;
    if grid.occupied(s) {
        return Err(EnvError::StartOccupied);
    }
    if grid.occupied(g) {
        return Err(EnvError::GoalOccupied);
    }
    let s_lin = grid.linear(s);
    let g_lin = grid.linear(g);
    let goal_center = grid.center(g);
    let res = grid.resolution();
    let offsets = neighbor_offsets();
    let n = grid.dims()[0] * grid.dims()[1] * grid.dims()[2];
    let mut gscore = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    gscore[s_lin] = 0.0;
    open.push(OpenEntry {
        f: (grid.center(s) - goal_center).norm(),
        h: (grid.center(s) - goal_center).norm(),
        lin: s_lin,
    });
    while let Some(entry) = open.pop() {
        let cur = entry.lin;
        if closed[cur] {
            continue;
        }
        closed[cur] = true;
        if cur == g_lin {
            let mut lins = vec![cur];
            let mut at = cur;
            while parent[at] != usize::MAX {
                at = parent[at];
                lins.push(at);
            }
            lins.reverse();
            let waypoints = lins.iter().map(|&l| grid.center(grid.unlinear(l))).collect();
            return Ok(GridPath {
                waypoints,
                cost: gscore[g_lin],
            });
        }
        let idx = grid.unlinear(cur);
        for (off, dist) in &offsets {
            let mut nb = [0usize; 3];
            let mut ok = true;
            for a in 0..3 {
                let v = idx[a] as i64 + off[a];
                if v < 0 || v >= grid.dims()[a] as i64 {
                    ok = false;
                    break;
                }
                nb[a] = v as usize;
            }
            if !ok || grid.occupied(nb) {
                continue;
            }
            let nb_lin = grid.linear(nb);
            if closed[nb_lin] {
                continue;
            }
            let tentative = gscore[cur] + res * dist;
            if tentative < gscore[nb_lin] {
                gscore[nb_lin] = tentative;
                parent[nb_lin] = cur;
                let h = (grid.center(nb) - goal_center).norm();
                open.push(OpenEntry {
                    f: tentative + h,
                    h,
                    lin: nb_lin,
                });
            }
        }
    }
    Err(EnvError::NoPath)
}

/// True when the straight segment `a..b` stays in free voxels, endpoints
/// included. Points outside the grid count as blocked. The traversal is the
/// standard incremental voxel walk; boundary ties advance x, then y, then z.
pub fn line_free(grid: &VoxelGrid, a: &Vec3, b: &Vec3) -> bool {
    let (Some(ia), Some(ib)) = (grid.voxel_of(a), grid.voxel_of(b)) else {
        return false;
    };
    if grid.occupied(ia) || grid.occupied(ib) {
        return false;
    }
    let res = grid.resolution();
    let d = b - a;
    let mut cur = [ia[0] as i64, ia[1] as i64, ia[2] as i64];
    let end = [ib[0] as i64, ib[1] as i64, ib[2] as i64];
    let mut step = [0i64; 3];
    let mut t_max = [f64::INFINITY; 3];
    let mut t_delta = [f64::INFINITY; 3];
    for ax in 0..3 {
        if d[ax] > 0.0 {
            step[ax] = 1;
            let boundary = grid.origin()[ax] + (cur[ax] + 1) as f64 * res;
            t_max[ax] = (boundary - a[ax]) / d[ax];
            t_delta[ax] = res / d[ax];
        } else if d[ax] < 0.0 {
            step[ax] = -1;
            let boundary = grid.origin()[ax] + cur[ax] as f64 * res;
            t_max[ax] = (boundary - a[ax]) / d[ax];
            t_delta[ax] = res / -d[ax];
        }
    }
    let max_steps = grid.dims().iter().sum::<usize>() + 3;
    for _ in 0..max_steps {
        if cur == end {
            return true;
        }
        let mut ax = 0;
        for c in 1..3 {
            if t_max[c] < t_max[ax] {
                ax = c;
            }
        }
        cur[ax] += step[ax];
        t_max[ax] += t_delta[ax];
        if cur[ax] < 0 || cur[ax] >= grid.dims()[ax] as i64 {
            return false;
        }
        if grid.occupied([cur[0] as usize, cur[1] as usize, cur[2] as usize]) {
            return false;
        }
    }
    false
}

/// Unsigned Euclidean distance (meters) from each voxel center to the nearest
/// occupied voxel center. Occupied voxels read 0; a grid with no occupied
/// voxels reads [`ESDF_FREE`] everywhere.
#[derive(Debug, Clone)]
pub struct DistanceField {
    origin: Vec3,
    resolution: f64,
    dims: [usize; 3],
    pub data: Vec<f64>,
}

impl DistanceField {
    pub fn at(&self, idx: [usize; 3]) -> f64 {
        self.data[(idx[2] * self.dims[1] + idx[1]) * self.dims[0] + idx[0]]
    }

    /// Distance at the voxel containing `p`, or None outside the grid.
    pub fn value_at(&self, p: &Vec3) -> Option<f64> {
        let mut idx = [0usize; 3];
        for a in 0..3 {
            let rel = (p[a] - self.origin[a]) / self.resolution;
            if rel < 0.0 || rel >= self.dims[a] as f64 {
                return None;
            }
            idx[a] = rel.floor() as usize;
        }
        Some(self.at(idx))
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }
}

/// Exact 1D squared-distance transform (lower envelope of parabolas).
/// Infinite entries are sites with no source on that line.
fn dt1d(f: &[f64], out: &mut Vec<f64>) {
    let n = f.len();
    out.clear();
    out.resize(n, f64::INFINITY);
    let mut sites = vec![0usize; n];
    let mut bounds = vec![0.0f64; n + 1];
    let mut k: isize = -1;
    for q in 0..n {
        if !f[q].is_finite() {
            continue;
        }
        loop {
            if k < 0 {
                k = 0;
                sites[0] = q;
                bounds[0] = f64::NEG_INFINITY;
                bounds[1] = f64::INFINITY;
                break;
            }
            let p = sites[k as usize];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64))
                / (2.0 * (q as f64 - p as f64));
            if s <= bounds[k as usize] {
                k -= 1;
            } else {
                k += 1;
                sites[k as usize] = q;
                bounds[k as usize] = s;
                bounds[k as usize + 1] = f64::INFINITY;
                break;
            }
        }
    }
    if k < 0 {
        return;
    }
    let mut j = 0usize;
    for q in 0..n {
        while bounds[j + 1] < q as f64 {
            j += 1;
        }
        out[q] = (q as f64 - sites[j] as f64).powi(2) + f[sites[j]];
    }
}

/// Exact Euclidean distance field by three separable 1D transforms over
/// squared voxel distances. Matches a brute-force nearest-occupied scan
/// bit for bit: all intermediate squared distances are integers below 2^53.
pub fn esdf(grid: &VoxelGrid) -> DistanceField {
    let [nx, ny, nz] = grid.dims();
    let mut d2: Vec<f64> = (0..nx * ny * nz)
        .map(|lin| {
            if grid.occ[lin] {
                0.0
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let lin = |ix: usize, iy: usize, iz: usize| (iz * ny + iy) * nx + ix;
    let mut line: Vec<f64> = Vec::new();
    let mut out: Vec<f64> = Vec::new();
    // x lines
    for iz in 0..nz {
        for iy in 0..ny {
            line.clear();
            line.extend((0..nx).map(|ix| d2[lin(ix, iy, iz)]));
            dt1d(&line, &mut out);
            for ix in 0..nx {
                d2[lin(ix, iy, iz)] = out[ix];
            }
        }
    }
    // y lines
    for iz in 0..nz {
        for ix in 0..nx {
            line.clear();
            line.extend((0..ny).map(|iy| d2[lin(ix, iy, iz)]));
            dt1d(&line, &mut out);
            for iy in 0..ny {
                d2[lin(ix, iy, iz)] = out[iy];
            }
        }
    }
    // z lines
    for iy in 0..ny {
        for ix in 0..nx {
            line.clear();
            line.extend((0..nz).map(|iz| d2[lin(ix, iy, iz)]));
            dt1d(&line, &mut out);
            for iz in 0..nz {
                d2[lin(ix, iy, iz)] = out[iz];
            }
        }
    }
    let data = d2
        .into_iter()
        .map(|v| {
            if v.is_finite() {
                v.sqrt() * grid.resolution()
            } else {
                ESDF_FREE
            }
        })
        .collect();
    DistanceField {
        origin: grid.origin(),
        resolution: grid.resolution(),
        dims: grid.dims(),
        data,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn v(x: f64, y: f64, z: f64) -> Vec3 {
        Vec3::new(x, y, z)
    }

    fn empty_grid(extent: f64, res: f64) -> VoxelGrid {
        VoxelGrid::new(v(0.0, 0.0, 0.0), v(extent, extent, extent), res).unwrap()
    }

    #[test]
    fn rejects_empty_bounds() {
        assert_eq!(
            VoxelGrid::new(v(1.0, 0.0, 0.0), v(1.0, 1.0, 1.0), 0.1).unwrap_err(),
            EnvError::EmptyBounds
        );
        assert_eq!(
            VoxelGrid::new(v(0.0, 0.0, 0.0), v(1.0, 1.0, 1.0), 0.0).unwrap_err(),
            EnvError::EmptyBounds
        );
    }

    #[test]
    fn inflation_grows_point_to_chebyshev_cube() {
        let cloud = PointCloud {
            points: vec![v(0.55, 0.55, 0.55)],
        };
        let grid = build_grid(&cloud, 0.1, (v(0.0, 0.0, 0.0), v(1.1, 1.1, 1.1)), 0.2).unwrap();
        // ceil(0.2/0.1) = 2 voxels in every direction: a 5x5x5 block.
        assert_eq!(grid.occupied_count(), 125);
        for dx in -2i64..=2 {
            for dy in -2i64..=2 {
                for dz in -2i64..=2 {
                    let idx = [
                        (5 + dx) as usize,
                        (5 + dy) as usize,
                        (5 + dz) as usize,
                    ];
                    assert!(grid.occupied(idx));
                }
            }
        }
    }

    #[test]
    fn zero_inflation_is_identity() {
        let cloud = PointCloud {
            points: vec![v(0.55, 0.55, 0.55)],
        };
        let grid = build_grid(&cloud, 0.1, (v(0.0, 0.0, 0.0), v(1.1, 1.1, 1.1)), 0.0).unwrap();
        assert_eq!(grid.occupied_count(), 1);
    }

    #[test]
    fn out_of_bounds_points_are_ignored() {
        let cloud = PointCloud {
            points: vec![v(-5.0, 0.5, 0.5), v(0.5, 0.5, 0.5), v(0.5, 9.0, 0.5)],
        };
        let grid = build_grid(&cloud, 0.1, (v(0.0, 0.0, 0.0), v(1.0, 1.0, 1.0)), 0.0).unwrap();
        assert_eq!(grid.occupied_count(), 1);
    }

    #[test]
    fn mark_box_touching_face_does_not_occupy() {
        let mut grid = empty_grid(1.0, 0.1);
        // Box ends exactly at x=0.5, the boundary between voxels 4 and 5.
        grid.mark_box(&v(0.0, 0.0, 0.0), &v(0.5, 1.0, 1.0));
        assert!(grid.occupied([4, 5, 5]));
        assert!(!grid.occupied([5, 5, 5]));
    }

    #[test]
    fn astar_straight_line_cost() {
        let grid = empty_grid(2.0, 0.1);
        let path = astar(&grid, &v(0.05, 0.05, 0.05), &v(1.95, 0.05, 0.05)).unwrap();
        assert_eq!(path.waypoints.len(), 20);
        assert_relative_eq!(path.cost, 0.1 * 19.0, epsilon = 1e-12);
    }

    #[test]
    fn astar_space_diagonal_cost() {
        let grid = empty_grid(1.0, 0.1);
        let path = astar(&grid, &v(0.05, 0.05, 0.05), &v(0.95, 0.95, 0.95)).unwrap();
        assert_relative_eq!(path.cost, 0.1 * 9.0 * 3.0f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn astar_trivial_when_start_is_goal_voxel() {
        let grid = empty_grid(1.0, 0.1);
        let path = astar(&grid, &v(0.52, 0.52, 0.52), &v(0.55, 0.57, 0.51)).unwrap();
        assert_eq!(path.waypoints.len(), 1);
        assert_eq!(path.cost, 0.0);
    }

    fn walled_grid() -> VoxelGrid {
        // Wall at x in [0.5, 0.6] with a hole at the top corner.
        let mut grid = empty_grid(1.0, 0.1);
        for iy in 0..10 {
            for iz in 0..10 {
                if iy == 9 && iz == 9 {
                    continue;
                }
                grid.set_occupied([5, iy, iz]);
            }
        }
        grid
    }

    #[test]
    fn astar_detours_through_hole() {
        let grid = walled_grid();
        let path = astar(&grid, &v(0.05, 0.05, 0.05), &v(0.95, 0.05, 0.05)).unwrap();
        assert!(path.cost > 0.9);
        for w in &path.waypoints {
            let idx = grid.voxel_of(w).unwrap();
            assert!(!grid.occupied(idx));
        }
        for pair in path.waypoints.windows(2) {
            let a = grid.voxel_of(&pair[0]).unwrap();
            let b = grid.voxel_of(&pair[1]).unwrap();
            for ax in 0..3 {
                assert!((a[ax] as i64 - b[ax] as i64).abs() <= 1);
            }
        }
    }

    #[test]
    fn astar_reports_no_path_through_full_wall() {
        let mut grid = empty_grid(1.0, 0.1);
        for iy in 0..10 {
            for iz in 0..10 {
                grid.set_occupied([5, iy, iz]);
            }
        }
        assert_eq!(
            astar(&grid, &v(0.05, 0.05, 0.05), &v(0.95, 0.05, 0.05)).unwrap_err(),
            EnvError::NoPath
        );
    }

    #[test]
    fn astar_endpoint_errors() {
        let mut grid = empty_grid(1.0, 0.1);
        grid.set_occupied([0, 0, 0]);
        grid.set_occupied([9, 9, 9]);
        assert_eq!(
            astar(&grid, &v(0.05, 0.05, 0.05), &v(0.55, 0.55, 0.55)).unwrap_err(),
            EnvError::StartOccupied
        );
        assert_eq!(
            astar(&grid, &v(0.55, 0.55, 0.55), &v(0.95, 0.95, 0.95)).unwrap_err(),
            EnvError::GoalOccupied
        );
        assert_eq!(
            astar(&grid, &v(-1.0, 0.5, 0.5), &v(0.55, 0.55, 0.55)).unwrap_err(),
            EnvError::OutOfBounds
        );
    }

    #[test]
    fn astar_is_deterministic() {
        let grid = walled_grid();
        let a = astar(&grid, &v(0.05, 0.05, 0.05), &v(0.95, 0.05, 0.05)).unwrap();
        let b = astar(&grid, &v(0.05, 0.05, 0.05), &v(0.95, 0.05, 0.05)).unwrap();
        assert_eq!(a.waypoints, b.waypoints);
        assert_eq!(a.cost, b.cost);
    }

    /// Uniform-cost search over the same edges, used as an optimality oracle.
    fn dijkstra_cost(grid: &VoxelGrid, start: &Vec3, goal: &Vec3) -> Option<f64> {
        let s = grid.voxel_of(start)?;
        let g = grid.voxel_of(goal)?;
        if grid.occupied(s) || grid.occupied(g) {
            return None;
        }
        let n = grid.dims()[0] * grid.dims()[1] * grid.dims()[2];
        let mut dist = vec![f64::INFINITY; n];
        let mut done = vec![false; n];
        dist[grid.linear(s)] = 0.0;
        let offsets = neighbor_offsets();
        loop {
            let mut best = usize::MAX;
            let mut best_d = f64::INFINITY;
            for (i, d) in dist.iter().enumerate() {
                if !done[i] && *d < best_d {
                    best = i;
                    best_d = *d;
                }
            }
            if best == usize::MAX {
                return None;
            }
            if best == grid.linear(g) {
                return Some(best_d);
            }
            done[best] = true;
            let idx = grid.unlinear(best);
            for (off, w) in &offsets {
                let mut nb = [0usize; 3];
                let mut ok = true;
                for a in 0..3 {
                    let p = idx[a] as i64 + off[a];
                    if p < 0 || p >= grid.dims()[a] as i64 {
                        ok = false;
                        break;
                    }
                    nb[a] = p as usize;
                }
                if !ok || grid.occupied(nb) {
                    continue;
                }
                let lin = grid.linear(nb);
                let cand = best_d + grid.resolution() * w;
                if cand < dist[lin] {
                    dist[lin] = cand;
                }
            }
        }
    }

    #[test]
    fn astar_matches_dijkstra_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for case in 0..6 {
            let mut grid = empty_grid(1.2, 0.1);
            for _ in 0..40 {
                let idx = [
                    rng.gen_range(0..12),
                    rng.gen_range(0..12),
                    rng.gen_range(0..12),
                ];
                grid.set_occupied(idx);
            }
            let start = v(0.05, 0.05, 0.05);
            let goal = v(1.15, 1.15, 1.15);
            if grid.occupied(grid.voxel_of(&start).unwrap())
                || grid.occupied(grid.voxel_of(&goal).unwrap())
            {
                continue;
            }
            let oracle = dijkstra_cost(&grid, &start, &goal);
            match astar(&grid, &start, &goal) {
                Ok(path) => {
                    let d = oracle.expect("oracle disagrees: no path");
                    assert!(
                        (path.cost - d).abs() <= 1e-9,
                        "case {case}: astar {} vs dijkstra {}",
                        path.cost,
                        d
                    );
                }
                Err(EnvError::NoPath) => assert!(oracle.is_none(), "case {case}"),
                Err(e) => panic!("unexpected error {e:?}"),
            }
        }
    }

    #[test]
    fn line_free_clear_and_blocked() {
        let grid = walled_grid();
        // Straight through the wall: blocked.
        assert!(!line_free(&grid, &v(0.05, 0.05, 0.05), &v(0.95, 0.05, 0.05)));
        // Through the corner hole: free.
        assert!(line_free(&grid, &v(0.45, 0.95, 0.95), &v(0.65, 0.95, 0.95)));
        // Occupied endpoint: blocked.
        assert!(!line_free(&grid, &v(0.55, 0.05, 0.05), &v(0.95, 0.05, 0.05)));
        // Outside the grid: blocked.
        assert!(!line_free(&grid, &v(-0.5, 0.05, 0.05), &v(0.95, 0.05, 0.05)));
        // Degenerate segment in free space: free.
        assert!(line_free(&grid, &v(0.05, 0.05, 0.05), &v(0.05, 0.05, 0.05)));
    }

    #[test]
    fn line_free_matches_dense_sampling_near_graze() {
        // Segment passing just inside a free lane next to an occupied block.
        let mut grid = empty_grid(1.0, 0.1);
        for iy in 0..5 {
            grid.set_occupied([5, iy, 5]);
        }
        let a = v(0.05, 0.51, 0.55);
        let b = v(0.95, 0.51, 0.55);
        let dda = line_free(&grid, &a, &b);
        let mut sampled = true;
        let steps = ((b - a).norm() / (grid.resolution() / 10.0)).ceil() as usize;
        for i in 0..=steps {
            let p = a + (b - a) * (i as f64 / steps as f64);
            if grid.occupied(grid.voxel_of(&p).unwrap()) {
                sampled = false;
                break;
            }
        }
        assert_eq!(dda, sampled);
        assert!(dda, "lane at y=0.51 is free");
        // One lane over, the segment runs through the blocks.
        let a = v(0.05, 0.49, 0.55);
        let b = v(0.95, 0.49, 0.55);
        assert!(!line_free(&grid, &a, &b));
    }

    #[test]
    fn esdf_single_occupied_voxel_is_radial() {
        let mut grid = empty_grid(1.1, 0.1);
        grid.set_occupied([5, 5, 5]);
        let field = esdf(&grid);
        for ix in 0..11usize {
            for iy in 0..11usize {
                for iz in 0..11usize {
                    let dx = ix as f64 - 5.0;
                    let dy = iy as f64 - 5.0;
                    let dz = iz as f64 - 5.0;
                    let expect = 0.1 * (dx * dx + dy * dy + dz * dz).sqrt();
                    assert_eq!(field.at([ix, iy, iz]), expect, "voxel {ix},{iy},{iz}");
                }
            }
        }
        assert_eq!(field.at([5, 5, 5]), 0.0);
    }

    #[test]
    fn esdf_empty_grid_is_sentinel() {
        let grid = empty_grid(0.5, 0.1);
        let field = esdf(&grid);
        assert!(field.data.iter().all(|&d| d == ESDF_FREE));
    }

    #[test]
    fn esdf_matches_brute_force_on_random_grids() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..3 {
            let mut grid = VoxelGrid::new(v(0.0, 0.0, 0.0), v(1.6, 1.6, 1.6), 0.1).unwrap();
            for _ in 0..120 {
                grid.set_occupied([
                    rng.gen_range(0..16),
                    rng.gen_range(0..16),
                    rng.gen_range(0..16),
                ]);
            }
            let field = esdf(&grid);
            let occupied: Vec<[usize; 3]> = (0..16usize.pow(3))
                .map(|l| grid.unlinear(l))
                .filter(|&idx| grid.occupied(idx))
                .collect();
            for ix in 0..16usize {
                for iy in 0..16usize {
                    for iz in 0..16usize {
                        let mut best = f64::INFINITY;
                        for o in &occupied {
                            let dx = ix as f64 - o[0] as f64;
                            let dy = iy as f64 - o[1] as f64;
                            let dz = iz as f64 - o[2] as f64;
                            best = best.min(dx * dx + dy * dy + dz * dz);
                        }
                        let expect = if best.is_finite() {
                            best.sqrt() * 0.1
                        } else {
                            ESDF_FREE
                        };
                        assert_eq!(field.at([ix, iy, iz]), expect, "voxel {ix},{iy},{iz}");
                    }
                }
            }
        }
    }

    #[test]
    fn ply_parses_vertices_with_extra_properties() {
        let text = "ply\nformat ascii 1.0\ncomment made by hand\n\
                    element vertex 3\nproperty float x\nproperty float y\n\
                    property float z\nproperty float intensity\nend_header\n\
                    0.0 0.5 1.0 9.0\n1.5 2.5 3.5 9.0\n-1.0 -2.0 -3.0 9.0\n";
        let cloud = PointCloud::from_ply_str(text).unwrap();
        assert_eq!(cloud.points.len(), 3);
        assert_relative_eq!((cloud.points[1] - v(1.5, 2.5, 3.5)).norm(), 0.0);
    }

    #[test]
    fn ply_rejects_binary_format() {
        let text = "ply\nformat binary_little_endian 1.0\nelement vertex 0\nend_header\n";
        assert!(matches!(
            PointCloud::from_ply_str(text),
            Err(EnvError::Parse(_))
        ));
    }

    #[test]
    fn csv_skips_header_and_blank_lines() {
        let text = "x,y,z\n\n0.1,0.2,0.3\n1.0, 2.0 ,3.0\n";
        let cloud = PointCloud::from_csv_str(text).unwrap();
        assert_eq!(cloud.points.len(), 2);
        assert_relative_eq!((cloud.points[1] - v(1.0, 2.0, 3.0)).norm(), 0.0);
    }

    #[test]
    fn csv_rejects_garbage_after_data() {
        let text = "0.1,0.2,0.3\nnot,a,row\n";
        assert!(matches!(
            PointCloud::from_csv_str(text),
            Err(EnvError::Parse(_))
        ));
    }

    proptest! {
        #[test]
        fn line_free_is_symmetric(
            ax in 0.01..1.19f64, ay in 0.01..1.19f64, az in 0.01..1.19f64,
            bx in 0.01..1.19f64, by in 0.01..1.19f64, bz in 0.01..1.19f64,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grid = VoxelGrid::new(
                Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.2, 1.2, 1.2), 0.1).unwrap();
            for _ in 0..25 {
                grid.set_occupied([
                    rng.gen_range(0..12), rng.gen_range(0..12), rng.gen_range(0..12),
                ]);
            }
            let a = Vec3::new(ax, ay, az);
            let b = Vec3::new(bx, by, bz);
            prop_assert_eq!(line_free(&grid, &a, &b), line_free(&grid, &b, &a));
        }

        #[test]
        fn inflation_is_monotone(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut grid = VoxelGrid::new(
                Vec3::new(0.0, 0.0, 0.0), Vec3::new(1.0, 1.0, 1.0), 0.1).unwrap();
            for _ in 0..10 {
                grid.set_occupied([
                    rng.gen_range(0..10), rng.gen_range(0..10), rng.gen_range(0..10),
                ]);
            }
            let mut fat = grid.clone();
            fat.inflate(0.15);
            for iz in 0..10 {
                for iy in 0..10 {
                    for ix in 0..10 {
                        if grid.occupied([ix, iy, iz]) {
                            prop_assert!(fat.occupied([ix, iy, iz]));
                        }
                    }
                }
            }
            prop_assert!(fat.occupied_count() >= grid.occupied_count());
        }
    }
}

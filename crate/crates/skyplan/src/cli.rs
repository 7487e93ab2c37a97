//! Command-line front end: plan, race, corridor, bench, and eval.
//!
//! Each subcommand is a thin pipeline over the library modules. All
//! randomness sits behind `--seed`, so artifact files are byte-identical
//! across runs; wall-clock numbers only appear in bench timings and in
//! `--trace` diagnostics on stderr.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::corridor::{self, CorridorError, CorridorParams};
use crate::cost::{self, CostParams, CostReport};
use crate::envmap::{self, EnvError, GridMeta, PointCloud, VoxelGrid};
use crate::flatness;
use crate::geom::{BodyHull, ConvexPolytope, HalfSpace};
use crate::optimizer::{
    optimize, EvalEngine, OptimizeError, OptimizeParams, PlanResult, StopReason,
};
use crate::racing::{self, Gate, RaceError, TrackSpec, TrackingGains};
use crate::traj::{solve_spline, BoundaryState, Trajectory};
use crate::{Mat3, Vec3};

const EXIT_NO_PATH: i32 = 2;
const EXIT_CORRIDOR: i32 = 3;
const EXIT_OPTIMIZER: i32 = 4;
const EXIT_IO: i32 = 5;
const EXIT_DIVERGED: i32 = 6;

/// Failure classes with a fixed exit-code mapping, so scripts can tell a
/// blocked world from a stalled corridor from a broken input file.
#[derive(Debug, Error)]
pub enum CliError {
    #[error("no collision-free route: {0}")]
    NoPath(EnvError),
    #[error("corridor generation failed: {0}")]
    Corridor(#[from] CorridorError),
    #[error("trajectory optimization failed: {0}")]
    Optimizer(#[from] OptimizeError),
    #[error("{0}")]
    Diverged(RaceError),
    #[error("{0}")]
    Io(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::NoPath(_) => EXIT_NO_PATH,
            CliError::Corridor(_) => EXIT_CORRIDOR,
            CliError::Optimizer(_) => EXIT_OPTIMIZER,
            CliError::Diverged(_) => EXIT_DIVERGED,
            CliError::Io(_) => EXIT_IO,
        }
    }
}

impl From<EnvError> for CliError {
    fn from(e: EnvError) -> CliError {
        match e {
            EnvError::NoPath | EnvError::StartOccupied | EnvError::GoalOccupied => {
                CliError::NoPath(e)
            }
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<RaceError> for CliError {
    fn from(e: RaceError) -> CliError {
        match e {
            RaceError::DivergedTracking { .. } => CliError::Diverged(e),
            other => CliError::Io(other.to_string()),
        }
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> CliError {
        CliError::Io(e.to_string())
    }
}

#[derive(Parser, Debug)]
#[command(
    name = "skyplan",
    version,
    about = "Whole-body SE(3) trajectory planning and racing evaluation",
    after_help = "samples.csv columns: t,px,py,pz,vx,vy,vz,ax,ay,az,qw,qx,qy,qz \
(quaternion order w,x,y,z; attitudes from the flat map with zero yaw).\n\
bench CSV columns: pieces,samples,workers,t_serial,t_parallel,r_e \
(times in seconds, r_e = t_serial/t_parallel - 1).\n\
File formats are documented in FORMATS.md."
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Plan a trajectory through a track: grid, route, corridor, optimize.
    Plan(PlanArgs),
    /// Plan (or load) a trajectory, fly it with the tracking controller,
    /// and score the run.
    Race(RaceArgs),
    /// Stop after corridor generation and write the polytopes.
    Corridor(CorridorArgs),
    /// Time serial vs parallel cost evaluation on synthetic fixtures.
    Bench(BenchArgs),
    /// Report the smoothness-plus-time loss of a stored trajectory.
    Eval(EvalArgs),
}

#[derive(Args, Debug)]
struct SharedArgs {
    /// Track JSON: gates, obstacles, start, goal, limits, bounds.
    #[arg(long, value_name = "FILE")]
    track: PathBuf,
    /// Extra obstacle point cloud (ASCII PLY or x,y,z CSV) merged into the
    /// occupancy grid.
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
    /// Body hull JSON: {"vertices": [[x, y, z], ...]} in body coordinates.
    #[arg(long, value_name = "FILE")]
    hull: PathBuf,
    /// Config JSON overriding penalty, optimizer, and corridor defaults.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory that receives the artifact files.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Cost-evaluation worker threads (overrides the config value).
    #[arg(long)]
    workers: Option<usize>,
    /// Seed for the optimizer's initial jitter (overrides the config value).
    #[arg(long)]
    seed: Option<u64>,
    /// Log per-iteration optimizer state as JSON lines on stderr.
    #[arg(long)]
    trace: bool,
    /// samples.csv rate in Hz.
    #[arg(long, default_value_t = 100.0)]
    sample_rate: f64,
}

#[derive(Args, Debug)]
struct PlanArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Plan a point body in a grid inflated by the hull's largest offset
    /// instead of planning the full hull.
    #[arg(long)]
    r3_baseline: bool,
}

#[derive(Args, Debug)]
struct RaceArgs {
    #[command(flatten)]
    shared: SharedArgs,
    /// Fly this stored trajectory JSON instead of planning one.
    #[arg(long, value_name = "FILE")]
    trajectory: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct CorridorArgs {
    /// Track JSON: gates, obstacles, start, goal, limits, bounds.
    #[arg(long, value_name = "FILE")]
    track: PathBuf,
    /// Extra obstacle point cloud merged into the occupancy grid.
    #[arg(long, value_name = "FILE")]
    map: Option<PathBuf>,
    /// Config JSON; only the corridor section applies here.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Directory that receives corridor.json.
    #[arg(long, value_name = "DIR", default_value = "out")]
    out_dir: PathBuf,
    /// Verbose logging on stderr.
    #[arg(long)]
    trace: bool,
}

#[derive(Args, Debug)]
struct BenchArgs {
    /// Piece counts to benchmark.
    #[arg(long, value_delimiter = ',', default_value = "16,32,64")]
    pieces: Vec<usize>,
    /// Constraint samples per piece to benchmark.
    #[arg(long, value_delimiter = ',', default_value = "16,32,48")]
    samples: Vec<usize>,
    /// Worker counts; 1 is the serial code path.
    #[arg(long, value_delimiter = ',', default_value = "1,2,4,8")]
    workers: Vec<usize>,
    /// Timing repetitions per configuration; the median is reported.
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Fixture randomization seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Also write the CSV to this file (it always goes to stdout).
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct EvalArgs {
    /// Trajectory JSON as written by plan.
    #[arg(long, value_name = "FILE")]
    trajectory: PathBuf,
    /// Weight on total time added to the jerk energy.
    #[arg(long, default_value_t = 1000.0)]
    rho: f64,
}

impl Command {
    fn trace(&self) -> bool {
        match self {
            Command::Plan(a) => a.shared.trace,
            Command::Race(a) => a.shared.trace,
            Command::Corridor(a) => a.trace,
            Command::Bench(_) | Command::Eval(_) => false,
        }
    }
}

/// On-disk config: optimizer and penalty knobs at the top level, plus
/// corridor construction parameters and the planning-time corridor inset.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct PlanConfig {
    #[serde(flatten)]
    pub optimizer: OptimizeParams,
    pub corridor: CorridorParams,
    /// Planning-time inset of every corridor face (m). The penalties are
    /// soft and sampled, so a residual violation and inter-sample excursions
    /// survive optimization; the margin absorbs both, keeping the flown hull
    /// inside the true corridor. Artifacts always record the uninset
    /// corridor.
    pub corridor_margin: f64,
    /// Spline pieces assigned to each corridor polytope. One piece per
    /// polytope is plenty in open space; tight passages need more local
    /// degrees of freedom than the corridor has polytopes, and repeating a
    /// polytope along the chain adds joints without shrinking free space.
    pub pieces_per_polytope: usize,
    /// Splice each gate's aperture into the corridor chain so the flight is
    /// forced through the opening. Wanted whenever free space surrounds a
    /// gate (otherwise the optimizer may shortcut around it); superfluous on
    /// tracks whose obstacles already wall off everything but the aperture,
    /// where the extra tight polytope only makes the optimization stiffer.
    pub pin_gates: bool,
}

impl Default for PlanConfig {
    fn default() -> PlanConfig {
        PlanConfig {
            optimizer: OptimizeParams::default(),
            corridor: CorridorParams::default(),
            corridor_margin: 0.01,
            pieces_per_polytope: 1,
            pin_gates: true,
        }
    }
}

pub fn run() -> i32 {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(err) => {
            use clap::error::ErrorKind;
            let code = match err.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => EXIT_IO,
            };
            let _ = err.print();
            return code;
        }
    };
    init_logging(cli.command.trace());
    let outcome = match &cli.command {
        Command::Plan(args) => cmd_plan(args),
        Command::Race(args) => cmd_race(args),
        Command::Corridor(args) => cmd_corridor(args),
        Command::Bench(args) => cmd_bench(args),
        Command::Eval(args) => cmd_eval(args),
    };
    match outcome {
        Ok(()) => 0,
        Err(err) => {
            eprintln!("error: {err}");
            err.exit_code()
        }
    }
}

fn init_logging(trace: bool) {
    let level = if trace {
        log::LevelFilter::Debug
    } else {
        log::LevelFilter::Warn
    };
    let mut builder = env_logger::Builder::new();
    builder
        .filter_level(level)
        .format_timestamp(None)
        .format_target(false)
        .parse_default_env();
    let _ = builder.try_init();
}

pub fn load_config(
    path: Option<&Path>,
    workers: Option<usize>,
    seed: Option<u64>,
) -> Result<PlanConfig, CliError> {
    let mut config: PlanConfig = match path {
        Some(p) => serde_json::from_str(&fs::read_to_string(p)?)?,
        None => PlanConfig::default(),
    };
    if let Some(w) = workers {
        config.optimizer.workers = w.max(1);
    }
    if let Some(s) = seed {
        config.optimizer.seed = s;
    }
    Ok(config)
}

#[derive(Deserialize)]
struct HullFile {
    vertices: Vec<[f64; 3]>,
}

pub fn load_hull(path: &Path) -> Result<BodyHull, CliError> {
    let parsed: HullFile = serde_json::from_str(&fs::read_to_string(path)?)?;
    let vertices = parsed
        .vertices
        .iter()
        .map(|v| Vec3::new(v[0], v[1], v[2]))
        .collect();
    BodyHull::new(vertices).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))
}

pub fn load_trajectory(path: &Path) -> Result<Trajectory, CliError> {
    Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
}

fn track_dir(path: &Path) -> &Path {
    match path.parent() {
        Some(dir) if !dir.as_os_str().is_empty() => dir,
        _ => Path::new("."),
    }
}

/// Rasterizes the track (boxes plus optional clouds) into an occupancy grid.
pub fn build_track_grid(
    track: &TrackSpec,
    track_dir: &Path,
    extra: Option<&PointCloud>,
    inflate_radius: f64,
) -> Result<VoxelGrid, CliError> {
    let mut grid = VoxelGrid::new(track.bounds_min, track.bounds_max, track.resolution)?;
    for b in &track.boxes {
        grid.mark_box(&b.min, &b.max);
    }
    if let Some(rel) = &track.cloud {
        let cloud = PointCloud::load(&track_dir.join(rel))?;
        grid.mark_points(&cloud);
    }
    if let Some(cloud) = extra {
        grid.mark_points(cloud);
    }
    if inflate_radius > 0.0 {
        grid.inflate(inflate_radius);
    }
    Ok(grid)
}

/// Grid routes for each leg of the track: start to first gate, gate to
/// gate, last gate to goal. Legs are searched independently; the
/// voxel-center endpoints of each leg are replaced by the exact anchors so
/// the corridor starts and ends where the boundary conditions sit.
pub fn plan_leg_routes(grid: &VoxelGrid, track: &TrackSpec) -> Result<Vec<Vec<Vec3>>, CliError> {
    let mut anchors = Vec::with_capacity(track.gates.len() + 2);
    anchors.push(track.start.position);
    anchors.extend(track.gates.iter().map(|g| g.center));
    anchors.push(track.goal);

    let mut legs = Vec::with_capacity(anchors.len() - 1);
    for pair in anchors.windows(2) {
        let leg = envmap::astar(grid, &pair[0], &pair[1])?;
        let mut points = leg.waypoints;
        if points.len() == 1 {
            // Both anchors in one voxel; keep them as a two-point leg.
            points = vec![pair[0], pair[1]];
        } else {
            points[0] = pair[0];
            let last = points.len() - 1;
            points[last] = pair[1];
        }
        legs.push(points);
    }
    Ok(legs)
}

/// Leg routes concatenated into a single polyline through all gates.
pub fn plan_route(grid: &VoxelGrid, track: &TrackSpec) -> Result<Vec<Vec3>, CliError> {
    let legs = plan_leg_routes(grid, track)?;
    let mut route: Vec<Vec3> = Vec::new();
    for points in legs {
        let skip = usize::from(!route.is_empty());
        route.extend(points.into_iter().skip(skip));
    }
    Ok(route)
}

/// How far a gate's crossing tunnel reaches to each side of its plane,
/// beyond the body's own extent.
const GATE_DEPTH: f64 = 0.3;

/// The gate aperture as free space: a box polytope spanning the opening in
/// the gate plane and a short tunnel along the normal. Threading it into
/// the corridor chain forces one spline piece (and so the flight) through
/// the opening; the tunnel is deep enough that the piece has room to cross
/// at speed. Apertures are trusted to be genuinely free, which holds for
/// any track whose gates open onto air.
pub fn gate_polytope(gate: &Gate, body_reach: f64) -> ConvexPolytope {
    let n = gate.normal;
    let right = gate.right();
    let up = gate.up;
    let c = gate.center;
    let depth = body_reach + GATE_DEPTH;
    ConvexPolytope {
        planes: vec![
            HalfSpace::new(-n, c - n * depth),
            HalfSpace::new(n, c + n * depth),
            HalfSpace::new(-right, c - right * gate.half_extents[0]),
            HalfSpace::new(right, c + right * gate.half_extents[0]),
            HalfSpace::new(-up, c - up * gate.half_extents[1]),
            HalfSpace::new(up, c + up * gate.half_extents[1]),
        ],
    }
}

/// Full safe-corridor chain for a track. With `pin_gates` the corridor is
/// grown per leg and each gate's aperture polytope is spliced between its
/// legs; every consecutive pair overlaps because adjacent elements all
/// contain the shared gate center. Without it the legs fuse into one route
/// and the chain is the plain grid corridor along it, with nothing forcing
/// a crossing and no extra polytope boundaries at the gates.
pub fn assemble_corridor(
    grid: &VoxelGrid,
    track: &TrackSpec,
    legs: &[Vec<Vec3>],
    params: &CorridorParams,
    body_reach: f64,
    pin_gates: bool,
) -> Result<Vec<ConvexPolytope>, CliError> {
    if !pin_gates {
        let route: Vec<Vec3> = legs
            .iter()
            .enumerate()
            .flat_map(|(i, leg)| leg.iter().skip(usize::from(i > 0)).copied())
            .collect();
        return Ok(corridor::generate_corridor(grid, &route, params)?);
    }
    let mut chain: Vec<ConvexPolytope> = Vec::new();
    for (i, leg) in legs.iter().enumerate() {
        if i > 0 {
            chain.push(gate_polytope(&track.gates[i - 1], body_reach));
        }
        chain.extend(corridor::generate_corridor(grid, leg, params)?);
    }
    Ok(chain)
}

/// Route and capped corridor chain for a track, as planning consumes them.
///
/// Corridor faces can pass arbitrarily close to the endpoints: generation
/// stops at the first polytope that contains the goal, and oblique cuts
/// around nearby obstacles can graze the start. The body sits at rest at
/// both ends and needs clearance for its full extent, so when either margin
/// is short, that end of the chain is capped with a polytope grown around
/// the point itself, whose faces sit a whole inflation bound away.
pub fn plan_corridor(
    grid: &VoxelGrid,
    track: &TrackSpec,
    config: &PlanConfig,
    body_reach: f64,
) -> Result<(Vec<Vec3>, Vec<ConvexPolytope>), CliError> {
    let legs = plan_leg_routes(grid, track)?;
    let mut corridor =
        assemble_corridor(grid, track, &legs, &config.corridor, body_reach, config.pin_gates)?;
    let route: Vec<Vec3> = legs
        .iter()
        .enumerate()
        .flat_map(|(i, leg)| leg.iter().skip(usize::from(i > 0)).copied())
        .collect();
    let start_pos = track.start.position;
    let start_margin = -corridor[0].max_violation(&start_pos);
    if start_margin < body_reach + config.corridor_margin {
        corridor.insert(
            0,
            corridor::inflate_polytope(grid, &start_pos, &start_pos, config.corridor.inflation_bound)?,
        );
    }
    let goal_margin = -corridor.last().expect("corridor is never empty").max_violation(&track.goal);
    if goal_margin < body_reach + config.corridor_margin {
        corridor.push(corridor::inflate_polytope(
            grid,
            &track.goal,
            &track.goal,
            config.corridor.inflation_bound,
        )?);
    }
    Ok((route, corridor))
}

/// Everything a plan run produces, before any file is written.
pub struct PlanArtifacts {
    pub grid: GridMeta,
    pub route: Vec<Vec3>,
    pub corridor: Vec<ConvexPolytope>,
    pub result: PlanResult,
}

/// Stand-in body for the point-mass baseline; hull construction requires
/// volume, so this is a centimeter-scale tetrahedron around the origin.
fn point_body() -> BodyHull {
    BodyHull::new(vec![
        Vec3::new(0.01, 0.01, 0.004),
        Vec3::new(-0.01, 0.01, -0.004),
        Vec3::new(0.01, -0.01, -0.004),
        Vec3::new(-0.01, -0.01, 0.004),
    ])
    .expect("tetrahedron has volume and surrounds the origin")
}

/// Full planning pipeline: grid, gate-ordered route, corridor, optimize.
///
/// With `r3_baseline` the grid is inflated by the hull's largest offset and
/// a point body is planned instead; gaps that only a tilted body can thread
/// then disappear from the grid, which is the comparison's point.
pub fn plan_track(
    track: &TrackSpec,
    track_dir: &Path,
    extra: Option<&PointCloud>,
    hull: &BodyHull,
    config: &PlanConfig,
    r3_baseline: bool,
) -> Result<PlanArtifacts, CliError> {
    let mut params = config.optimizer.clone();
    params.cost.v_max = track.v_max;
    params.cost.a_max = track.a_max;
    let (grid, body) = if r3_baseline {
        let grid = build_track_grid(track, track_dir, extra, hull.max_abs_coord())?;
        (grid, point_body())
    } else {
        (build_track_grid(track, track_dir, extra, 0.0)?, hull.clone())
    };
    let body_reach = body.vertices.iter().map(|v| v.norm()).fold(0.0, f64::max);
    let (route, corridor) = plan_corridor(&grid, track, config, body_reach)?;
    let repeat = config.pieces_per_polytope.max(1);
    let planning: Vec<ConvexPolytope> = corridor
        .iter()
        .flat_map(|p| std::iter::repeat_n(p.inset(config.corridor_margin), repeat))
        .collect();
    let goal = BoundaryState::rest(track.goal);
    let result = optimize(&params, &body, &planning, &track.start, &goal)?;
    Ok(PlanArtifacts {
        grid: grid.meta(),
        route,
        corridor,
        result,
    })
}

fn arr(v: &Vec3) -> [f64; 3] {
    [v.x, v.y, v.z]
}

#[derive(Serialize)]
struct CorridorFile<'a> {
    waypoints: Vec<[f64; 3]>,
    polytopes: &'a [ConvexPolytope],
}

impl<'a> CorridorFile<'a> {
    fn new(route: &[Vec3], polytopes: &'a [ConvexPolytope]) -> CorridorFile<'a> {
        CorridorFile {
            waypoints: route.iter().map(arr).collect(),
            polytopes,
        }
    }
}

#[derive(Serialize)]
struct PlanReport<'a> {
    track: &'a str,
    grid: &'a GridMeta,
    piece_count: usize,
    total_time: f64,
    iterations: usize,
    evaluations: usize,
    stop: StopReason,
    cost: &'a CostReport,
}

fn pretty<T: Serialize>(value: &T) -> Result<String, CliError> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    Ok(text)
}

fn write_plan_artifacts(
    out_dir: &Path,
    track: &TrackSpec,
    plan: &PlanArtifacts,
    sample_rate: f64,
) -> Result<(), CliError> {
    fs::create_dir_all(out_dir)?;
    fs::write(out_dir.join("trajectory.json"), pretty(&plan.result.trajectory)?)?;
    let report = PlanReport {
        track: &track.name,
        grid: &plan.grid,
        piece_count: plan.result.trajectory.piece_count(),
        total_time: plan.result.trajectory.total_time(),
        iterations: plan.result.iterations,
        evaluations: plan.result.evaluations,
        stop: plan.result.stop,
        cost: &plan.result.report,
    };
    fs::write(out_dir.join("report.json"), pretty(&report)?)?;
    fs::write(
        out_dir.join("corridor.json"),
        pretty(&CorridorFile::new(&plan.route, &plan.corridor))?,
    )?;
    fs::write(
        out_dir.join("samples.csv"),
        sample_csv(&plan.result.trajectory, sample_rate)?,
    )?;
    Ok(())
}

/// Sampled states with flatness attitudes as w,x,y,z unit quaternions.
///
/// Rows run at `1/rate` spacing from zero and always include the exact end
/// time. Free-fall samples hold the previous attitude, and quaternion signs
/// are chosen for row-to-row continuity.
pub fn sample_csv(traj: &Trajectory, rate: f64) -> Result<String, CliError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(CliError::Io(format!(
            "sample rate must be positive and finite, got {rate}"
        )));
    }
    let t_end = traj.total_time();
    let steps = (t_end * rate).floor() as usize;
    let mut times: Vec<f64> = (0..=steps).map(|k| (k as f64 / rate).min(t_end)).collect();
    if t_end - times[times.len() - 1] > 1e-12 {
        times.push(t_end);
    }

    let mut out = String::from("t,px,py,pz,vx,vy,vz,ax,ay,az,qw,qx,qy,qz\n");
    let mut rot = Mat3::identity();
    let mut prev = [1.0, 0.0, 0.0, 0.0];
    for t in times {
        let p = traj.position(t);
        let v = traj.velocity(t);
        let a = traj.acceleration(t);
        if let Ok(r) = flatness::attitude(&a, 0.0) {
            rot = r;
        }
        let q = nalgebra::UnitQuaternion::from_rotation_matrix(
            &nalgebra::Rotation3::from_matrix_unchecked(rot),
        );
        let c = q.coords;
        let mut quat = [c[3], c[0], c[1], c[2]];
        let align: f64 = prev.iter().zip(&quat).map(|(a, b)| a * b).sum();
        if align < 0.0 {
            for w in &mut quat {
                *w = -*w;
            }
        }
        prev = quat;
        out.push_str(&format!(
            "{t},{},{},{},{},{},{},{},{},{},{},{},{},{}\n",
            p.x, p.y, p.z, v.x, v.y, v.z, a.x, a.y, a.z, quat[0], quat[1], quat[2], quat[3]
        ));
    }
    Ok(out)
}

fn stop_name(stop: StopReason) -> &'static str {
    match stop {
        StopReason::GradientNorm => "gradient_norm",
        StopReason::RelativeDecrease => "relative_decrease",
        StopReason::IterationLimit => "iteration_limit",
        StopReason::LineSearchStalled => "line_search_stalled",
    }
}

fn cmd_plan(args: &PlanArgs) -> Result<(), CliError> {
    let io = &args.shared;
    let track = TrackSpec::load(&io.track)?;
    let hull = load_hull(&io.hull)?;
    let config = load_config(io.config.as_deref(), io.workers, io.seed)?;
    let extra = io.map.as_deref().map(PointCloud::load).transpose()?;
    let plan = plan_track(
        &track,
        track_dir(&io.track),
        extra.as_ref(),
        &hull,
        &config,
        args.r3_baseline,
    )?;
    write_plan_artifacts(&io.out_dir, &track, &plan, io.sample_rate)?;
    println!(
        "planned {}: {} pieces, {:.3} s total, cost {:.3}, {} iterations, {} evaluations, stop {}",
        track.name,
        plan.result.trajectory.piece_count(),
        plan.result.trajectory.total_time(),
        plan.result.report.total,
        plan.result.iterations,
        plan.result.evaluations,
        stop_name(plan.result.stop),
    );
    Ok(())
}

fn cmd_race(args: &RaceArgs) -> Result<(), CliError> {
    let io = &args.shared;
    let track = TrackSpec::load(&io.track)?;
    let hull = load_hull(&io.hull)?;
    let traj = match &args.trajectory {
        Some(path) => load_trajectory(path)?,
        None => {
            let config = load_config(io.config.as_deref(), io.workers, io.seed)?;
            let extra = io.map.as_deref().map(PointCloud::load).transpose()?;
            let plan = plan_track(
                &track,
                track_dir(&io.track),
                extra.as_ref(),
                &hull,
                &config,
                false,
            )?;
            write_plan_artifacts(&io.out_dir, &track, &plan, io.sample_rate)?;
            plan.result.trajectory
        }
    };
    let gap = (traj.position(0.0) - track.start.position).norm();
    if gap > 1e-6 {
        return Err(CliError::Io(format!(
            "trajectory starts {gap:.4} m away from the track start"
        )));
    }
    let states = racing::simulate(&traj, &track, racing::DEFAULT_DT, TrackingGains::default())?;
    let outcome = racing::monitor(&states, &hull, &track);
    fs::create_dir_all(&io.out_dir)?;
    fs::write(io.out_dir.join("race.json"), pretty(&outcome)?)?;
    println!(
        "{:<16} {:>8} {:>7} {:>9} {:>8}",
        "track", "time_s", "gates", "collided", "score"
    );
    println!(
        "{:<16} {:>8.2} {:>7} {:>9} {:>8.2}",
        track.name,
        outcome.racing_time,
        format!("{}/{}", outcome.gates_passed, track.gates.len()),
        outcome.collided,
        outcome.score
    );
    Ok(())
}

fn cmd_corridor(args: &CorridorArgs) -> Result<(), CliError> {
    let track = TrackSpec::load(&args.track)?;
    let config = load_config(args.config.as_deref(), None, None)?;
    let extra = args.map.as_deref().map(PointCloud::load).transpose()?;
    let grid = build_track_grid(&track, track_dir(&args.track), extra.as_ref(), 0.0)?;
    let legs = plan_leg_routes(&grid, &track)?;
    let route = plan_route(&grid, &track)?;
    // No hull in this command, so gate tunnels get their base depth only.
    let polys = assemble_corridor(&grid, &track, &legs, &config.corridor, 0.0, config.pin_gates)?;
    fs::create_dir_all(&args.out_dir)?;
    fs::write(
        args.out_dir.join("corridor.json"),
        pretty(&CorridorFile::new(&route, &polys))?,
    )?;
    println!(
        "corridor over {}: {} polytopes from {} route points",
        track.name,
        polys.len(),
        route.len()
    );
    Ok(())
}

/// Synthetic corridor-and-trajectory fixture for evaluation timing.
///
/// A zig-zag chain of overlapping boxes with a spline threaded through
/// jittered joint points. Durations are short and the hull is wide, so the
/// speed, acceleration, and collision penalties are all active at every
/// sample density, and the trajectory itself does not depend on the sample
/// count, which keeps timings comparable across sample settings.
pub fn bench_fixture(
    pieces: usize,
    samples_per_piece: usize,
    seed: u64,
) -> (CostParams, BodyHull, Vec<ConvexPolytope>, Trajectory) {
    use rand::{Rng, SeedableRng};
    assert!(pieces >= 1, "fixture needs at least one piece");
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let lane = |i: usize| if i % 2 == 0 { 0.2 } else { -0.2 };
    let corridor: Vec<ConvexPolytope> = (0..pieces)
        .map(|i| {
            ConvexPolytope::from_aabb(
                Vec3::new(i as f64 - 0.15, lane(i) - 0.4, 1.24),
                Vec3::new(i as f64 + 1.15, lane(i) + 0.4, 1.76),
            )
        })
        .collect();
    let waypoints: Vec<Vec3> = (1..pieces)
        .map(|j| {
            Vec3::new(
                j as f64 + rng.gen_range(-0.1..0.1),
                rng.gen_range(-0.15..0.15),
                1.5 + rng.gen_range(-0.15..0.15),
            )
        })
        .collect();
    let start = BoundaryState::rest(Vec3::new(0.0, lane(0), 1.5));
    let end = BoundaryState::rest(Vec3::new(pieces as f64, lane(pieces - 1), 1.5));
    let durations = vec![0.5; pieces];
    let traj =
        solve_spline(&start, &end, &waypoints, &durations).expect("positive durations solve");
    let params = CostParams {
        samples_per_piece,
        v_max: 1.2,
        a_max: 5.0,
        ..CostParams::default()
    };
    let hull = BodyHull::new(vec![
        Vec3::new(0.3, 0.3, 0.2),
        Vec3::new(0.3, -0.3, 0.2),
        Vec3::new(-0.3, 0.3, 0.2),
        Vec3::new(-0.3, -0.3, 0.2),
        Vec3::new(0.3, 0.3, -0.2),
        Vec3::new(0.3, -0.3, -0.2),
        Vec3::new(-0.3, 0.3, -0.2),
        Vec3::new(-0.3, -0.3, -0.2),
    ])
    .expect("box hull is valid");
    (params, hull, corridor, traj)
}

fn median_eval_time(engine: &EvalEngine, traj: &Trajectory, repeats: usize) -> f64 {
    let mut times: Vec<f64> = (0..repeats)
        .map(|_| {
            let started = Instant::now();
            let eval = engine.evaluate(traj).expect("bench fixture evaluates cleanly");
            let elapsed = started.elapsed().as_secs_f64();
            std::hint::black_box(eval.report.total);
            elapsed
        })
        .collect();
    times.sort_by(f64::total_cmp);
    let mid = times.len() / 2;
    if times.len() % 2 == 1 {
        times[mid]
    } else {
        0.5 * (times[mid - 1] + times[mid])
    }
}

fn cmd_bench(args: &BenchArgs) -> Result<(), CliError> {
    if args.repeats == 0 || args.pieces.is_empty() || args.samples.is_empty() {
        return Err(CliError::Io(
            "bench needs at least one piece count, sample count, and repeat".into(),
        ));
    }
    let mut csv = String::from("pieces,samples,workers,t_serial,t_parallel,r_e\n");
    for &pieces in &args.pieces {
        for &samples in &args.samples {
            let (params, hull, corridor, traj) = bench_fixture(pieces, samples, args.seed);
            let reference = EvalEngine::new(1, &params, &hull, &corridor);
            let t_serial = median_eval_time(&reference, &traj, args.repeats);
            for &workers in &args.workers {
                let engine = EvalEngine::new(workers, &params, &hull, &corridor);
                let t_parallel = median_eval_time(&engine, &traj, args.repeats);
                let r_e = t_serial / t_parallel - 1.0;
                csv.push_str(&format!(
                    "{pieces},{samples},{workers},{t_serial:.9},{t_parallel:.9},{r_e:.4}\n"
                ));
            }
        }
    }
    print!("{csv}");
    if let Some(path) = &args.out {
        fs::write(path, &csv)?;
    }
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<(), CliError> {
    let traj = load_trajectory(&args.trajectory)?;
    let smoothness = cost::jerk_energy(&traj);
    let time = traj.total_time();
    let loss = smoothness + args.rho * time;
    println!("smoothness {smoothness}");
    println!("time {time}");
    println!("loss {loss}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::racing::Gate;

    fn tiny_track() -> TrackSpec {
        TrackSpec {
            name: "tiny".into(),
            gates: vec![Gate {
                center: Vec3::new(2.0, 1.0, 1.0),
                normal: Vec3::new(1.0, 0.0, 0.0),
                up: Vec3::new(0.0, 0.0, 1.0),
                half_extents: [0.4, 0.4],
            }],
            boxes: vec![],
            cloud: None,
            start: BoundaryState::rest(Vec3::new(0.5, 1.0, 1.0)),
            goal: Vec3::new(3.5, 1.0, 1.0),
            v_max: 5.0,
            a_max: 18.0,
            bounds_min: Vec3::new(0.0, 0.0, 0.0),
            bounds_max: Vec3::new(4.0, 2.0, 2.0),
            resolution: 0.25,
        }
    }

    #[test]
    fn route_visits_anchors_exactly_once_in_order() {
        let track = tiny_track();
        let grid = build_track_grid(&track, Path::new("."), None, 0.0).unwrap();
        let route = plan_route(&grid, &track).unwrap();
        assert_eq!(route[0], track.start.position);
        assert_eq!(*route.last().unwrap(), track.goal);
        let hits: Vec<usize> = route
            .iter()
            .enumerate()
            .filter(|(_, p)| (*p - track.gates[0].center).norm() < 1e-12)
            .map(|(i, _)| i)
            .collect();
        assert_eq!(hits.len(), 1, "gate center should appear exactly once");
        for pair in route.windows(2) {
            assert!((pair[1] - pair[0]).norm() > 1e-12, "no duplicate points");
        }
    }

    #[test]
    fn empty_room_plan_has_zero_penalties() {
        let track = tiny_track();
        let hull = point_body();
        let config = PlanConfig::default();
        let plan = plan_track(&track, Path::new("."), None, &hull, &config, false).unwrap();
        let report = &plan.result.report;
        assert_eq!(report.velocity, 0.0);
        assert_eq!(report.acceleration, 0.0);
        assert_eq!(report.collision, 0.0);
        let traj = &plan.result.trajectory;
        assert!((traj.position(0.0) - track.start.position).norm() < 1e-9);
        assert!((traj.position(traj.total_time()) - track.goal).norm() < 1e-9);
    }

    #[test]
    fn sample_csv_lists_continuous_unit_quaternions() {
        let start = BoundaryState::rest(Vec3::new(0.0, 0.0, 1.0));
        let end = BoundaryState::rest(Vec3::new(2.0, 1.0, 1.0));
        let wps = [Vec3::new(1.0, 0.5, 1.2)];
        let traj = solve_spline(&start, &end, &wps, &[1.5, 1.5]).unwrap();
        let csv = sample_csv(&traj, 50.0).unwrap();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "t,px,py,pz,vx,vy,vz,ax,ay,az,qw,qx,qy,qz"
        );
        let rows: Vec<Vec<f64>> = lines
            .map(|l| l.split(',').map(|f| f.parse().unwrap()).collect())
            .collect();
        assert_eq!(rows.len(), 151, "3 s at 50 Hz plus the start row");
        assert_eq!(rows[0][0], 0.0);
        assert!((rows[0][1] - 0.0).abs() < 1e-12 && (rows[0][3] - 1.0).abs() < 1e-12);
        assert_eq!(rows.last().unwrap()[0], 3.0);
        let mut prev: Option<[f64; 4]> = None;
        for row in &rows {
            let q = [row[10], row[11], row[12], row[13]];
            let norm2: f64 = q.iter().map(|x| x * x).sum();
            assert!((norm2 - 1.0).abs() < 1e-9, "unit quaternion");
            if let Some(p) = prev {
                let dot: f64 = p.iter().zip(&q).map(|(a, b)| a * b).sum();
                assert!(dot >= 0.0, "sign continuity");
            }
            prev = Some(q);
        }
    }

    #[test]
    fn bench_fixture_activates_every_penalty_at_any_sampling() {
        for samples in [16, 48] {
            let (params, hull, corridor, traj) = bench_fixture(8, samples, 0);
            let engine = EvalEngine::new(1, &params, &hull, &corridor);
            let eval = engine.evaluate(&traj).unwrap();
            assert!(eval.report.velocity > 0.0, "speed penalty active");
            assert!(eval.report.acceleration > 0.0, "accel penalty active");
            assert!(eval.report.collision > 0.0, "collision penalty active");
        }
        let coarse = bench_fixture(8, 16, 3).3;
        let fine = bench_fixture(8, 48, 3).3;
        assert_eq!(coarse, fine, "trajectory independent of sample count");
    }

    #[test]
    fn config_file_overrides_defaults_and_flags_override_config() {
        let dir = std::env::temp_dir();
        let path = dir.join(format!("skyplan-config-{}.json", std::process::id()));
        fs::write(
            &path,
            r#"{
                "cost": {"v_max": 3.5},
                "max_iterations": 111,
                "workers": 2,
                "corridor": {"max_segment_length": 2.5},
                "corridor_margin": 0.02
            }"#,
        )
        .unwrap();
        let config = load_config(Some(&path), Some(4), Some(9)).unwrap();
        let _ = fs::remove_file(&path);
        assert_eq!(config.optimizer.cost.v_max, 3.5);
        assert_eq!(config.optimizer.max_iterations, 111);
        assert_eq!(config.optimizer.workers, 4, "flag beats config");
        assert_eq!(config.optimizer.seed, 9);
        assert_eq!(config.corridor.max_segment_length, 2.5);
        assert_eq!(config.corridor.inflation_bound, 3.0, "untouched default");
        assert_eq!(config.corridor_margin, 0.02);
    }

    #[test]
    fn error_classes_map_to_distinct_exit_codes() {
        let codes = [
            CliError::from(EnvError::NoPath).exit_code(),
            CliError::from(CorridorError::EndOfPath).exit_code(),
            CliError::from(OptimizeError::EmptyCorridor).exit_code(),
            CliError::from(RaceError::DivergedTracking { time: 1.0 }).exit_code(),
            CliError::from(RaceError::Parse("bad".into())).exit_code(),
        ];
        assert_eq!(codes, [2, 3, 4, 6, 5]);
        assert_eq!(
            CliError::from(EnvError::StartOccupied).exit_code(),
            2,
            "blocked endpoints are a routing failure, not an IO failure"
        );
    }
}

//! Race track model, point-mass flight simulation, and scoring.
//!
//! The plant is a double integrator tracked by a PD controller with
//! acceleration feedforward; attitude is attached kinematically from the
//! commanded acceleration, which is what the whole-body collision monitor
//! needs. Gate passes and hull/obstacle contacts are judged on the recorded
//! state list after the fact, so the monitor stays a pure function.

use crate::flatness::attitude;
use crate::geom::BodyHull;
use crate::traj::{BoundaryState, Trajectory};
use crate::{Mat3, Vec3};
use serde::{Deserialize, Serialize};
use std::path::Path;
use thiserror::Error;

/// Simulation continues this long past the reference end so the controller
/// can settle onto the final state before the race is judged.
const SETTLE_WINDOW: f64 = 1.0;

/// Commanded acceleration may exceed the track's limit by this factor; the
/// tracking loop needs headroom to close errors on an already aggressive
/// reference.
const ACCEL_HEADROOM: f64 = 1.2;

/// Position error that counts as losing the reference entirely.
const DIVERGENCE_LIMIT: f64 = 2.0;

/// Default integration step (s).
pub const DEFAULT_DT: f64 = 0.005;

#[derive(Debug, Error)]
pub enum RaceError {
    #[error("tracking diverged at t = {time:.3} s")]
    DivergedTracking { time: f64 },
    #[error("track file io: {0}")]
    Io(String),
    #[error("track file parse: {0}")]
    Parse(String),
    #[error("invalid track: {0}")]
    Invalid(String),
}

/// Rectangular aperture with a pose. `normal` is the required crossing
/// direction, `up` spans the aperture's second axis; both unit, mutually
/// perpendicular. `half_extents` are along `normal x up` and `up`.
#[derive(Debug, Clone)]
pub struct Gate {
    pub center: Vec3,
    pub normal: Vec3,
    pub up: Vec3,
    pub half_extents: [f64; 2],
}

impl Gate {
    pub fn right(&self) -> Vec3 {
        self.normal.cross(&self.up)
    }

    /// Signed distance of `p` from the gate plane, positive past the gate.
    pub fn side(&self, p: &Vec3) -> f64 {
        self.normal.dot(&(p - self.center))
    }

    /// Whether a point on the gate plane lies within the aperture rectangle.
    pub fn in_aperture(&self, p: &Vec3) -> bool {
        let rel = p - self.center;
        rel.dot(&self.right()).abs() <= self.half_extents[0]
            && rel.dot(&self.up).abs() <= self.half_extents[1]
    }
}

/// Axis-aligned obstacle. Containment is strict so a hull vertex exactly on
/// a face does not count as a collision.
#[derive(Debug, Clone, Copy)]
pub struct ObstacleBox {
    pub min: Vec3,
    pub max: Vec3,
}

impl ObstacleBox {
    pub fn contains(&self, p: &Vec3) -> bool {
        (0..3).all(|a| p[a] > self.min[a] && p[a] < self.max[a])
    }
}

/// Everything that defines one race: world extents and grid resolution for
/// mapping, obstacles, ordered gates, boundary states, and dynamic limits.
#[derive(Debug, Clone)]
pub struct TrackSpec {
    pub name: String,
    pub gates: Vec<Gate>,
    pub boxes: Vec<ObstacleBox>,
    /// Optional point-cloud file (resolved relative to the track file) that
    /// is rasterized into the grid alongside the boxes. Scoring only checks
    /// boxes; clouds exist for mapping.
    pub cloud: Option<String>,
    pub start: BoundaryState,
    pub goal: Vec3,
    pub v_max: f64,
    pub a_max: f64,
    pub bounds_min: Vec3,
    pub bounds_max: Vec3,
    pub resolution: f64,
}

#[derive(Deserialize)]
struct GateRepr {
    center: [f64; 3],
    normal: [f64; 3],
    up: [f64; 3],
    half_extents: [f64; 2],
}

#[derive(Deserialize)]
struct BoxRepr {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Deserialize, Default)]
struct ObstaclesRepr {
    #[serde(default)]
    boxes: Vec<BoxRepr>,
    #[serde(default)]
    cloud: Option<String>,
}

#[derive(Deserialize)]
struct StartRepr {
    position: [f64; 3],
    #[serde(default)]
    velocity: [f64; 3],
    #[serde(default)]
    acceleration: [f64; 3],
}

#[derive(Deserialize)]
struct LimitsRepr {
    v_max: f64,
    a_max: f64,
}

#[derive(Deserialize)]
struct BoundsRepr {
    min: [f64; 3],
    max: [f64; 3],
}

#[derive(Deserialize)]
struct TrackRepr {
    #[serde(default)]
    name: String,
    bounds: BoundsRepr,
    resolution: f64,
    #[serde(default)]
    gates: Vec<GateRepr>,
    #[serde(default)]
    obstacles: ObstaclesRepr,
    start: StartRepr,
    goal: [f64; 3],
    limits: LimitsRepr,
}

impl TrackSpec {
    pub fn from_json_str(text: &str) -> Result<TrackSpec, RaceError> {
        let repr: TrackRepr =
            serde_json::from_str(text).map_err(|e| RaceError::Parse(e.to_string()))?;
        TrackSpec::from_repr(repr)
    }

    pub fn load(path: &Path) -> Result<TrackSpec, RaceError> {
        let text = std::fs::read_to_string(path).map_err(|e| RaceError::Io(e.to_string()))?;
        TrackSpec::from_json_str(&text)
    }

    fn from_repr(repr: TrackRepr) -> Result<TrackSpec, RaceError> {
        let bounds_min = Vec3::from(repr.bounds.min);
        let bounds_max = Vec3::from(repr.bounds.max);
        if !(0..3).all(|a| bounds_min[a] < bounds_max[a]) {
            return Err(RaceError::Invalid("world bounds are empty".into()));
        }
        if !(repr.resolution > 0.0 && repr.resolution.is_finite()) {
            return Err(RaceError::Invalid("resolution must be positive".into()));
        }
        if !(repr.limits.v_max > 0.0 && repr.limits.a_max > 0.0) {
            return Err(RaceError::Invalid("limits must be positive".into()));
        }
        let mut gates = Vec::with_capacity(repr.gates.len());
        for (i, g) in repr.gates.iter().enumerate() {
            let normal = Vec3::from(g.normal);
            let up = Vec3::from(g.up);
            if normal.norm() < 1e-9 || up.norm() < 1e-9 {
                return Err(RaceError::Invalid(format!("gate {i}: zero axis")));
            }
            let normal = normal.normalize();
            let up = up.normalize();
            if normal.dot(&up).abs() > 1e-6 {
                return Err(RaceError::Invalid(format!(
                    "gate {i}: normal and up must be perpendicular"
                )));
            }
            if !(g.half_extents[0] > 0.0 && g.half_extents[1] > 0.0) {
                return Err(RaceError::Invalid(format!("gate {i}: empty aperture")));
            }
            gates.push(Gate { center: Vec3::from(g.center), normal, up, half_extents: g.half_extents });
        }
        let mut boxes = Vec::with_capacity(repr.obstacles.boxes.len());
        for (i, b) in repr.obstacles.boxes.iter().enumerate() {
            let min = Vec3::from(b.min);
            let max = Vec3::from(b.max);
            if !(0..3).all(|a| min[a] < max[a]) {
                return Err(RaceError::Invalid(format!("obstacle box {i} is empty")));
            }
            boxes.push(ObstacleBox { min, max });
        }
        let start = BoundaryState {
            position: Vec3::from(repr.start.position),
            velocity: Vec3::from(repr.start.velocity),
            acceleration: Vec3::from(repr.start.acceleration),
        };
        let goal = Vec3::from(repr.goal);
        let inside = |p: &Vec3| (0..3).all(|a| p[a] >= bounds_min[a] && p[a] <= bounds_max[a]);
        if !inside(&start.position) || !inside(&goal) {
            return Err(RaceError::Invalid("start or goal outside world bounds".into()));
        }
        Ok(TrackSpec {
            name: repr.name,
            gates,
            boxes,
            cloud: repr.obstacles.cloud,
            start,
            goal,
            v_max: repr.limits.v_max,
            a_max: repr.limits.a_max,
            bounds_min,
            bounds_max,
            resolution: repr.resolution,
        })
    }
}

/// PD feedback gains around the acceleration feedforward. The defaults are
/// critically damped at 4 rad/s.
#[derive(Debug, Clone, Copy)]
pub struct TrackingGains {
    pub kp: f64,
    pub kd: f64,
}

impl Default for TrackingGains {
    fn default() -> Self {
        TrackingGains { kp: 16.0, kd: 8.0 }
    }
}

/// One integration step of the simulated flight.
#[derive(Debug, Clone)]
pub struct SimState {
    pub time: f64,
    pub position: Vec3,
    pub velocity: Vec3,
    pub accel_cmd: Vec3,
    pub attitude: Mat3,
}

/// Race outcome: timing, gate count, collision flag, and the score.
#[derive(Debug, Clone, Serialize)]
pub struct RaceResult {
    pub racing_time: f64,
    pub gates_passed: usize,
    pub collided: bool,
    pub score: f64,
    pub finished: bool,
    pub gate_times: Vec<f64>,
    pub collision_time: Option<f64>,
}

/// Race score: 100 - T_f + 4 N_G, minus 30 on any collision.
pub fn score(racing_time: f64, gates_passed: usize, collided: bool) -> f64 {
    assert!(racing_time > 0.0, "racing time must be positive");
    100.0 - racing_time + 4.0 * gates_passed as f64 - if collided { 30.0 } else { 0.0 }
}

/// Fly the reference trajectory from the track's start state.
///
/// See [`simulate_from`]; this entry enforces that the reference actually
/// begins at the track start, which the planner guarantees.
pub fn simulate(
    traj: &Trajectory,
    track: &TrackSpec,
    dt: f64,
    gains: TrackingGains,
) -> Result<Vec<SimState>, RaceError> {
    let gap = (traj.position(0.0) - track.start.position).norm();
    assert!(gap <= 1e-6, "reference must start at the track start ({gap} m off)");
    simulate_from(traj, track, dt, gains, track.start.position, track.start.velocity)
}

/// Fly the reference from an explicit initial state.
///
/// Double-integrator plant under `a_cmd = a_ref + kp (x_ref - x) +
/// kd (v_ref - v)`, with the command clamped to `1.2 a_max` and integrated
/// semi-implicitly (velocity first). Past the reference end the reference
/// holds its final state for one settle second. Attitude comes from the
/// commanded acceleration; in the measure-zero case where that command is
/// momentarily singular (free fall), the previous attitude is held.
pub fn simulate_from(
    traj: &Trajectory,
    track: &TrackSpec,
    dt: f64,
    gains: TrackingGains,
    position: Vec3,
    velocity: Vec3,
) -> Result<Vec<SimState>, RaceError> {
    assert!(dt > 0.0 && dt <= 0.02, "integration step out of range");
    let t_end = traj.total_time();
    let horizon = t_end + SETTLE_WINDOW;
    let steps = (horizon / dt).ceil() as usize;
    let limit = ACCEL_HEADROOM * track.a_max;

    let mut states = Vec::with_capacity(steps + 1);
    let mut x = position;
    let mut v = velocity;
    let mut att = Mat3::identity();
    for k in 0..=steps {
        let t = k as f64 * dt;
        let tr = t.min(t_end);
        let x_ref = traj.position(tr);
        let v_ref = traj.velocity(tr);
        let a_ref = traj.acceleration(tr);
        let mut a_cmd = a_ref + (x_ref - x) * gains.kp + (v_ref - v) * gains.kd;
        let mag = a_cmd.norm();
        if mag > limit {
            a_cmd *= limit / mag;
        }
        if let Ok(r) = attitude(&a_cmd, 0.0) {
            att = r;
        }
        states.push(SimState { time: t, position: x, velocity: v, accel_cmd: a_cmd, attitude: att });
        if (x_ref - x).norm() > DIVERGENCE_LIMIT {
            return Err(RaceError::DivergedTracking { time: t });
        }
        v += a_cmd * dt;
        x += v * dt;
    }
    Ok(states)
}

/// Judge a recorded flight against the track.
///
/// A gate is passed when the segment between consecutive states crosses its
/// plane from the negative to the positive side with the interpolated
/// crossing point inside the aperture; gates must fall in track order and
/// out-of-order crossings are ignored, so each gate counts at most once. A
/// collision is any attitude-transformed hull vertex strictly inside any
/// obstacle box at any state; the first hit sets the flag and the race
/// continues. The racing time is the (interpolated) crossing time of the
/// last gate, or the full horizon when the run never finishes.
pub fn monitor(states: &[SimState], hull: &BodyHull, track: &TrackSpec) -> RaceResult {
    assert!(!states.is_empty(), "monitor needs at least one state");

    let mut collided = false;
    let mut collision_time = None;
    'scan: for s in states {
        for vtx in &hull.vertices {
            let p = s.attitude * vtx + s.position;
            if track.boxes.iter().any(|b| b.contains(&p)) {
                collided = true;
                collision_time = Some(s.time);
                break 'scan;
            }
        }
    }

    let mut gate_times = Vec::new();
    let mut next_gate = 0usize;
    for w in states.windows(2) {
        if next_gate >= track.gates.len() {
            break;
        }
        let gate = &track.gates[next_gate];
        let d0 = gate.side(&w[0].position);
        let d1 = gate.side(&w[1].position);
        if d0 < 0.0 && d1 >= 0.0 {
            let s = d0 / (d0 - d1);
            let p = w[0].position + (w[1].position - w[0].position) * s;
            if gate.in_aperture(&p) {
                gate_times.push(w[0].time + (w[1].time - w[0].time) * s);
                next_gate += 1;
            }
        }
    }

    let finished = next_gate == track.gates.len() && !gate_times.is_empty();
    let racing_time = if finished {
        *gate_times.last().unwrap()
    } else {
        states.last().unwrap().time
    };
    let total = score(racing_time, next_gate, collided);
    RaceResult {
        racing_time,
        gates_passed: next_gate,
        collided,
        score: total,
        finished,
        gate_times,
        collision_time,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::traj::solve_spline;
    use approx::assert_relative_eq;

    fn open_track(start: Vec3, a_max: f64) -> TrackSpec {
        TrackSpec {
            name: String::new(),
            gates: Vec::new(),
            boxes: Vec::new(),
            cloud: None,
            start: BoundaryState::rest(start),
            goal: start,
            v_max: 5.0,
            a_max,
            bounds_min: Vec3::new(-50.0, -50.0, -50.0),
            bounds_max: Vec3::new(50.0, 50.0, 50.0),
            resolution: 0.1,
        }
    }

    fn smooth_reference(start: Vec3) -> Trajectory {
        let end = start + Vec3::new(3.0, 1.0, 0.5);
        let mid = start + Vec3::new(1.5, 0.8, 0.3);
        solve_spline(
            &BoundaryState::rest(start),
            &BoundaryState::rest(end),
            &[mid],
            &[3.0, 3.0],
        )
        .unwrap()
    }

    #[test]
    fn score_matches_published_rows() {
        assert_relative_eq!(score(35.49, 15, false), 124.51, epsilon = 1e-12);
        assert_relative_eq!(score(33.01, 21, false), 150.99, epsilon = 1e-12);
        assert_relative_eq!(score(18.10, 19, false), 157.90, epsilon = 1e-12);
        assert_relative_eq!(score(10.0, 0, true), 60.0, epsilon = 1e-12);
    }

    #[test]
    fn score_moves_the_right_way() {
        let base = score(20.0, 5, false);
        assert!(score(21.0, 5, false) < base);
        assert_relative_eq!(score(20.0, 6, false), base + 4.0, epsilon = 1e-12);
        assert_relative_eq!(score(20.0, 5, true), base - 30.0, epsilon = 1e-12);
    }

    #[test]
    fn perfect_start_tracks_within_a_millimeter() {
        let start = Vec3::new(1.0, 2.0, 1.0);
        let traj = smooth_reference(start);
        let track = open_track(start, 18.0);
        let states = simulate(&traj, &track, DEFAULT_DT, TrackingGains::default()).unwrap();
        let t_end = traj.total_time();
        assert!(states.last().unwrap().time >= t_end + SETTLE_WINDOW - 1e-9);
        let mut worst = 0.0f64;
        for s in &states {
            let x_ref = traj.position(s.time.min(t_end));
            worst = worst.max((x_ref - s.position).norm());
            assert!(s.position.iter().all(|c| c.is_finite()));
            let gram = s.attitude.transpose() * s.attitude;
            assert!((gram - Mat3::identity()).norm() < 1e-9, "attitude not orthonormal");
        }
        assert!(worst <= 1e-3, "tracking error {worst} m");
    }

    #[test]
    fn initial_offset_decays_like_a_damped_second_order_system() {
        let start = Vec3::new(0.0, 0.0, 2.0);
        let hover = solve_spline(
            &BoundaryState::rest(start),
            &BoundaryState::rest(start),
            &[],
            &[4.0],
        )
        .unwrap();
        let track = open_track(start, 18.0);
        let states = simulate_from(
            &hover,
            &track,
            DEFAULT_DT,
            TrackingGains::default(),
            start + Vec3::new(0.1, 0.0, 0.0),
            Vec3::zeros(),
        )
        .unwrap();
        let err_at = |t: f64| {
            let s = states.iter().min_by(|a, b| {
                (a.time - t).abs().partial_cmp(&(b.time - t).abs()).unwrap()
            });
            (s.unwrap().position - start).norm()
        };
        assert_relative_eq!(err_at(0.0), 0.1, epsilon = 1e-12);
        assert!(err_at(0.5) < err_at(0.0));
        assert!(err_at(2.0) < 0.01, "offset should decay below 1 cm within 2 s");
        // Critically damped closed form at omega = 4: e(t) = e0 (1 + wt) e^{-wt}.
        let analytic = 0.1 * (1.0 + 8.0) * (-8.0f64).exp();
        assert!((err_at(2.0) - analytic).abs() < 2e-3);
    }

    #[test]
    fn halving_dt_changes_the_flight_by_first_order_only() {
        let start = Vec3::new(1.0, 2.0, 1.0);
        let traj = smooth_reference(start);
        let track = open_track(start, 18.0);
        let coarse = simulate(&traj, &track, 0.01, TrackingGains::default()).unwrap();
        let fine = simulate(&traj, &track, 0.005, TrackingGains::default()).unwrap();
        let mut worst = 0.0f64;
        for (k, s) in coarse.iter().enumerate() {
            let f = &fine[2 * k];
            assert!((f.time - s.time).abs() < 1e-12);
            worst = worst.max((f.position - s.position).norm());
        }
        assert!(worst <= 0.01, "integrator divergence {worst} m between dt levels");
    }

    #[test]
    fn impossible_reference_diverges() {
        let start = Vec3::new(0.0, 0.0, 1.0);
        let sprint = solve_spline(
            &BoundaryState::rest(start),
            &BoundaryState::rest(start + Vec3::new(8.0, 0.0, 0.0)),
            &[],
            &[0.8],
        )
        .unwrap();
        let track = open_track(start, 2.0);
        let err = simulate(&sprint, &track, DEFAULT_DT, TrackingGains::default()).unwrap_err();
        assert!(matches!(err, RaceError::DivergedTracking { .. }));
    }

    fn coasting_states(from: Vec3, to: Vec3, n: usize) -> Vec<SimState> {
        (0..=n)
            .map(|k| {
                let s = k as f64 / n as f64;
                SimState {
                    time: s * 2.0,
                    position: from + (to - from) * s,
                    velocity: (to - from) / 2.0,
                    accel_cmd: Vec3::zeros(),
                    attitude: Mat3::identity(),
                }
            })
            .collect()
    }

    fn plain_gate(x: f64) -> Gate {
        Gate {
            center: Vec3::new(x, 0.0, 0.0),
            normal: Vec3::new(1.0, 0.0, 0.0),
            up: Vec3::new(0.0, 0.0, 1.0),
            half_extents: [0.5, 0.5],
        }
    }

    fn small_hull() -> BodyHull {
        BodyHull::new(vec![
            Vec3::new(-0.23, -0.23, -0.05),
            Vec3::new(0.23, -0.23, -0.05),
            Vec3::new(-0.23, 0.23, -0.05),
            Vec3::new(0.23, 0.23, -0.05),
            Vec3::new(-0.23, -0.23, 0.05),
            Vec3::new(0.23, -0.23, 0.05),
            Vec3::new(-0.23, 0.23, 0.05),
            Vec3::new(0.23, 0.23, 0.05),
        ])
        .unwrap()
    }

    #[test]
    fn gates_pass_in_order_with_interpolated_times() {
        let mut track = open_track(Vec3::new(-1.0, 0.0, 0.0), 18.0);
        track.gates = vec![plain_gate(0.0), plain_gate(1.0)];
        let states = coasting_states(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), 30);
        let result = monitor(&states, &small_hull(), &track);
        assert_eq!(result.gates_passed, 2);
        assert!(result.finished);
        assert!(!result.collided);
        // Crossings at x = 0 and x = 1 of a 3 m line flown in 2 s.
        assert_relative_eq!(result.gate_times[0], 2.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(result.gate_times[1], 4.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(result.racing_time, 4.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(result.score, 100.0 - 4.0 / 3.0 + 8.0, epsilon = 1e-9);
    }

    #[test]
    fn out_of_order_crossing_is_ignored() {
        let mut track = open_track(Vec3::new(-1.0, 0.0, 0.0), 18.0);
        // Track order expects the far gate first.
        track.gates = vec![plain_gate(1.0), plain_gate(0.0)];
        let states = coasting_states(Vec3::new(-1.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), 30);
        let result = monitor(&states, &small_hull(), &track);
        assert_eq!(result.gates_passed, 1);
        assert!(!result.finished);
        assert_eq!(result.gate_times.len(), 1);
        // The one counted pass is the far gate; the near gate was crossed
        // too early and never again.
        assert_relative_eq!(result.gate_times[0], 4.0 / 3.0, epsilon = 1e-9);
        assert_relative_eq!(result.racing_time, 2.0, epsilon = 1e-12);
    }

    #[test]
    fn aperture_miss_does_not_count() {
        let mut track = open_track(Vec3::new(-1.0, 0.9, 0.0), 18.0);
        track.gates = vec![plain_gate(0.0)];
        let states = coasting_states(Vec3::new(-1.0, 0.9, 0.0), Vec3::new(1.0, 0.9, 0.0), 20);
        let result = monitor(&states, &small_hull(), &track);
        assert_eq!(result.gates_passed, 0);
        assert!(!result.finished);
        assert_relative_eq!(result.racing_time, 2.0, epsilon = 1e-12);
        assert_relative_eq!(result.score, 98.0, epsilon = 1e-12);
    }

    #[test]
    fn oscillation_across_a_gate_counts_once() {
        let mut track = open_track(Vec3::new(-1.0, 0.0, 0.0), 18.0);
        track.gates = vec![plain_gate(0.0)];
        let xs = [-1.0, 0.5, -0.5, 1.0, -0.8, 0.9];
        let states: Vec<SimState> = xs
            .iter()
            .enumerate()
            .map(|(k, &x)| SimState {
                time: k as f64 * 0.5,
                position: Vec3::new(x, 0.0, 0.0),
                velocity: Vec3::zeros(),
                accel_cmd: Vec3::zeros(),
                attitude: Mat3::identity(),
            })
            .collect();
        let result = monitor(&states, &small_hull(), &track);
        assert_eq!(result.gates_passed, 1);
        assert_eq!(result.gate_times.len(), 1);
        assert!(result.gate_times[0] < 0.5);
    }

    #[test]
    fn collision_flags_once_and_race_continues() {
        let mut track = open_track(Vec3::new(-2.0, 0.0, 0.0), 18.0);
        track.gates = vec![plain_gate(1.0)];
        track.boxes = vec![ObstacleBox {
            min: Vec3::new(-0.5, -0.3, -0.2),
            max: Vec3::new(0.0, 0.3, 0.2),
        }];
        let states = coasting_states(Vec3::new(-2.0, 0.0, 0.0), Vec3::new(2.0, 0.0, 0.0), 80);
        let result = monitor(&states, &small_hull(), &track);
        assert!(result.collided);
        assert!(result.collision_time.is_some());
        assert_eq!(result.gates_passed, 1, "race must continue past a collision");
        assert!(result.finished);
        let expected = 100.0 - result.racing_time + 4.0 - 30.0;
        assert_relative_eq!(result.score, expected, epsilon = 1e-12);
    }

    #[test]
    fn rolled_hull_graze_matches_fine_grained_oracle() {
        // Constant 31.4 deg roll from a sideways command; the hull sweeps
        // past a box whose face is placed 1 cm inside the widest vertex's
        // track, so only a rolled corner clips it.
        let a_cmd = Vec3::new(0.0, 6.0, 0.0);
        let att = attitude(&a_cmd, 0.0).unwrap();
        let hull = small_hull();
        let top_y = hull
            .vertices
            .iter()
            .map(|v| (att * v).y)
            .fold(f64::NEG_INFINITY, f64::max);
        let boxes = vec![ObstacleBox {
            min: Vec3::new(1.0, top_y - 0.01, -1.0),
            max: Vec3::new(1.5, top_y + 1.0, 1.0),
        }];
        let mut track = open_track(Vec3::new(0.0, 0.0, 0.0), 18.0);
        track.boxes = boxes.clone();

        let dt = 0.005;
        let speed = 2.0;
        let path = |t: f64| Vec3::new(speed * t, 0.0, 0.0);
        let states: Vec<SimState> = (0..=400)
            .map(|k| {
                let t = k as f64 * dt;
                SimState {
                    time: t,
                    position: path(t),
                    velocity: Vec3::new(speed, 0.0, 0.0),
                    accel_cmd: a_cmd,
                    attitude: att,
                }
            })
            .collect();
        let result = monitor(&states, &hull, &track);
        assert!(result.collided);
        let flagged = result.collision_time.unwrap();

        // Brute-force first contact on the continuous motion at dt/100.
        let fine = dt / 100.0;
        let mut first = None;
        for k in 0..=40_000 {
            let t = k as f64 * fine;
            let pos = path(t);
            if hull
                .vertices
                .iter()
                .any(|v| boxes.iter().any(|b| b.contains(&(att * v + pos))))
            {
                first = Some(t);
                break;
            }
        }
        let first = first.expect("oracle found no contact");
        assert!(
            (flagged - first).abs() <= dt + 1e-9,
            "monitor flagged {flagged}, oracle {first}"
        );
    }

    #[test]
    fn track_json_loads_and_validates() {
        let text = r#"{
            "name": "demo",
            "bounds": {"min": [0, 0, 0], "max": [10, 6, 3]},
            "resolution": 0.1,
            "gates": [
                {"center": [5, 3, 1.5], "normal": [1, 0, 0], "up": [0, 0, 1],
                 "half_extents": [0.4, 0.4]}
            ],
            "obstacles": {"boxes": [{"min": [4, 0, 0], "max": [4.5, 2, 3]}]},
            "start": {"position": [1, 3, 1.5]},
            "goal": [9, 3, 1.5],
            "limits": {"v_max": 5.0, "a_max": 18.0}
        }"#;
        let track = TrackSpec::from_json_str(text).unwrap();
        assert_eq!(track.name, "demo");
        assert_eq!(track.gates.len(), 1);
        assert_eq!(track.boxes.len(), 1);
        assert!(track.cloud.is_none());
        assert_eq!(track.start.velocity, Vec3::zeros());
        assert_relative_eq!(track.a_max, 18.0);

        let skewed = text.replace("\"up\": [0, 0, 1]", "\"up\": [0.3, 0, 1]");
        assert!(matches!(
            TrackSpec::from_json_str(&skewed),
            Err(RaceError::Invalid(_))
        ));
        let missing = text.replace("\"limits\": {\"v_max\": 5.0, \"a_max\": 18.0}", "\"limits\": {}");
        assert!(matches!(
            TrackSpec::from_json_str(&missing),
            Err(RaceError::Parse(_))
        ));
    }
}

//! Unconstrained trajectory refinement inside a corridor.
//!
//! The decision variables are not the waypoints and durations themselves but
//! smooth reparameterizations that cannot leave the feasible set:
//!
//! * each interior waypoint is a convex combination of the vertices of the
//!   overlap of its two corridor polytopes, with squared-weight barycentric
//!   coordinates, so any weight vector maps into the overlap;
//! * each piece duration is the exponential of a free variable, so any real
//!   maps to a positive time.
//!
//! That turns the corridor-constrained problem into a smooth unconstrained
//! one, solved here with limited-memory BFGS and a weak Wolfe line search.
//! Cost evaluation can fan out across worker threads per piece; partials are
//! merged in piece order, so the result is bit-identical for any worker
//! count.

use crate::cost::{self, CostError, CostEval, CostParams, CostReport, PiecePartial};
use crate::geom::{BodyHull, ConvexPolytope, GeomError};
use crate::traj::{BoundaryState, SplineSystem, TrajError, Trajectory};
use crate::Vec3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::sync::mpsc;
use thiserror::Error;

/// Hard clamp on the log-duration variables; exp of anything outside this
/// range is a useless duration and risks overflow.
const LOG_DURATION_RANGE: f64 = 20.0;
/// Relative jitter on the initial barycentric weights. Breaks symmetric
/// saddle points (a waypoint starting exactly on a mirror plane of its
/// overlap polytope has a zero cross-gradient).
const WEIGHT_JITTER: f64 = 1e-3;
/// Line search Armijo (sufficient decrease) constant.
const WOLFE_C1: f64 = 1e-4;
/// Line search curvature constant.
const WOLFE_C2: f64 = 0.9;
/// Bisection/expansion steps before the line search gives up.
const MAX_LINE_SEARCH_STEPS: usize = 60;
/// L-BFGS history pairs.
const LBFGS_MEMORY: usize = 8;
/// Curvature pairs with y.s below this (relative) threshold are discarded.
const CURVATURE_FLOOR: f64 = 1e-12;
/// Iterations the relative-decrease stop looks back over.
const DECREASE_WINDOW: usize = 5;

#[derive(Debug, Error)]
pub enum OptimizeError {
    #[error("corridor has no polytopes")]
    EmptyCorridor,
    #[error("start position is outside the first corridor polytope")]
    StartOutsideCorridor,
    #[error("goal position is outside the last corridor polytope")]
    GoalOutsideCorridor,
    /// Consecutive corridor polytopes must share a full-dimensional overlap
    /// for the waypoint between them to have room to move.
    #[error("corridor polytopes {0} and {1} overlap degenerately: {2}")]
    JointOverlapInfeasible(usize, usize, GeomError),
    #[error("cost undefined at the initial guess: {0}")]
    InitialCost(#[from] CostError),
    #[error(transparent)]
    Spline(#[from] TrajError),
}

/// Knobs for [`optimize`]; `cost` carries the weights and limits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OptimizeParams {
    pub cost: CostParams,
    pub max_iterations: usize,
    /// Gradient norm stop, scaled by sqrt(problem dimension).
    pub gradient_tol: f64,
    /// Relative cost decrease over the look-back window below which the
    /// search is considered converged.
    pub relative_decrease_tol: f64,
    /// Cost evaluation worker threads (1 = serial).
    pub workers: usize,
    /// Seed for the initial weight jitter.
    pub seed: u64,
}

impl Default for OptimizeParams {
    fn default() -> OptimizeParams {
        OptimizeParams {
            cost: CostParams::default(),
            max_iterations: 3000,
            gradient_tol: 1e-5,
            relative_decrease_tol: 1e-9,
            workers: 1,
            seed: 0,
        }
    }
}

/// Why the optimizer stopped.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    GradientNorm,
    RelativeDecrease,
    IterationLimit,
    LineSearchStalled,
}

#[derive(Debug, Clone)]
pub struct PlanResult {
    pub trajectory: Trajectory,
    pub report: CostReport,
    pub iterations: usize,
    pub evaluations: usize,
    pub stop: StopReason,
}

/// Per-piece cost evaluation, serial or fanned out over a worker pool.
///
/// Workers get contiguous piece ranges by index; the coordinator merges
/// their partials back in piece order and folds them exactly as the serial
/// path does, so any worker count produces bit-identical results. On
/// failure the error for the smallest piece index wins.
pub struct EvalEngine<'a> {
    workers: usize,
    params: &'a CostParams,
    hull: &'a BodyHull,
    corridors: &'a [ConvexPolytope],
}

impl<'a> EvalEngine<'a> {
    pub fn new(
        workers: usize,
        params: &'a CostParams,
        hull: &'a BodyHull,
        corridors: &'a [ConvexPolytope],
    ) -> EvalEngine<'a> {
        EvalEngine {
            workers: workers.max(1),
            params,
            hull,
            corridors,
        }
    }

    pub fn evaluate(&self, traj: &Trajectory) -> Result<CostEval, CostError> {
        let pieces = traj.piece_count();
        assert_eq!(self.corridors.len(), pieces);
        if self.workers == 1 || pieces == 1 {
            return cost::total_cost(self.params, self.hull, self.corridors, traj);
        }
        let chunk = pieces.div_ceil(self.workers);
        let active = pieces.div_ceil(chunk);
        let mut slots: Vec<Option<Result<Vec<PiecePartial>, CostError>>> =
            (0..active).map(|_| None).collect();
        std::thread::scope(|scope| {
            let (tx, rx) = mpsc::channel();
            for w in 0..active {
                let lo = w * chunk;
                let hi = ((w + 1) * chunk).min(pieces);
                let tx = tx.clone();
                scope.spawn(move || {
                    let mut parts = Vec::with_capacity(hi - lo);
                    let mut failed = None;
                    for j in lo..hi {
                        match cost::piece_cost(
                            self.params,
                            self.hull,
                            &self.corridors[j],
                            &traj.coeffs()[j],
                            traj.durations()[j],
                            j,
                        ) {
                            Ok(p) => parts.push(p),
                            Err(e) => {
                                failed = Some(e);
                                break;
                            }
                        }
                    }
                    let result = match failed {
                        None => Ok(parts),
                        Some(e) => Err(e),
                    };
                    let _ = tx.send((w, result));
                });
            }
            drop(tx);
            for _ in 0..active {
                // A worker that panicked drops its sender; the scope will
                // re-raise its panic, so just surface the broken channel.
                let (w, result) = rx.recv().expect("cost worker vanished");
                slots[w] = Some(result);
            }
        });
        let mut parts = Vec::with_capacity(pieces);
        for slot in slots {
            parts.extend(slot.expect("all workers report")?);
        }
        Ok(cost::fold_partials(parts))
    }
}

/// Squared-weight barycentric coordinates over each joint's overlap
/// vertices, plus log durations. Maps the unconstrained vector the optimizer
/// sees to (waypoints, durations) and pulls gradients back.
#[derive(Debug, Clone)]
struct VariableMap {
    /// Overlap polytope vertices per interior joint.
    joints: Vec<Vec<Vec3>>,
    pieces: usize,
}

impl VariableMap {
    fn dim(&self) -> usize {
        self.joints.iter().map(Vec::len).sum::<usize>() + self.pieces
    }

    fn joint_offsets(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        self.joints.iter().scan(0usize, |off, verts| {
            let here = *off;
            *off += verts.len();
            Some((here, verts.len()))
        })
    }

    fn duration_offset(&self) -> usize {
        self.dim() - self.pieces
    }

    /// Returns (waypoints, durations, clamped-any-log-duration).
    fn decode(&self, x: &[f64]) -> (Vec<Vec3>, Vec<f64>, bool) {
        debug_assert_eq!(x.len(), self.dim());
        let mut waypoints = Vec::with_capacity(self.joints.len());
        for ((off, n), verts) in self.joint_offsets().zip(&self.joints) {
            let w = &x[off..off + n];
            let sum: f64 = w.iter().map(|v| v * v).sum();
            let mut q = Vec3::zeros();
            if sum > 0.0 {
                for (wk, vk) in w.iter().zip(verts) {
                    q += vk * (wk * wk / sum);
                }
            } else {
                // All-zero weights carry no information; fall back to the
                // uniform combination instead of dividing by zero.
                for vk in verts {
                    q += vk / n as f64;
                }
            }
            waypoints.push(q);
        }
        let mut clamped = false;
        let durations = x[self.duration_offset()..]
            .iter()
            .map(|&tau| {
                let t = tau.clamp(-LOG_DURATION_RANGE, LOG_DURATION_RANGE);
                clamped |= t != tau;
                t.exp()
            })
            .collect();
        (waypoints, durations, clamped)
    }

    /// Chain rule from (waypoint, duration) gradients back to the
    /// unconstrained vector.
    fn backward(
        &self,
        x: &[f64],
        grad_waypoints: &[Vec3],
        grad_durations: &[f64],
        out: &mut [f64],
    ) {
        debug_assert_eq!(out.len(), self.dim());
        let (waypoints, durations, _) = self.decode(x);
        for (i, ((off, n), verts)) in self.joint_offsets().zip(&self.joints).enumerate() {
            let w = &x[off..off + n];
            let sum: f64 = w.iter().map(|v| v * v).sum();
            for (k, (wk, vk)) in w.iter().zip(verts).enumerate() {
                out[off + k] = if sum > 0.0 {
                    2.0 * wk / sum * (vk - waypoints[i]).dot(&grad_waypoints[i])
                } else {
                    0.0
                };
            }
        }
        let doff = self.duration_offset();
        for j in 0..self.pieces {
            let tau = x[doff + j];
            // Inside the clamp, d(delta)/d(tau) = delta; outside, the clamp
            // makes the duration locally constant.
            out[doff + j] = if tau.abs() <= LOG_DURATION_RANGE {
                durations[j] * grad_durations[j]
            } else {
                0.0
            };
        }
    }
}

/// The corridor-constrained cost as a smooth unconstrained function.
///
/// Exposes plain value/gradient evaluation so the chained gradient (cost
/// partials, spline adjoint, variable maps) can be validated against finite
/// differences from outside.
pub struct Objective<'a> {
    map: VariableMap,
    engine: EvalEngine<'a>,
    start: &'a BoundaryState,
    end: &'a BoundaryState,
    v_max: f64,
}

/// One successful objective evaluation.
#[derive(Debug, Clone)]
pub struct Evaluation {
    pub value: f64,
    pub gradient: Vec<f64>,
    pub report: CostReport,
    pub trajectory: Trajectory,
    pub duration_clamped: bool,
}

#[derive(Debug, Error, PartialEq)]
pub enum EvalError {
    #[error(transparent)]
    Cost(#[from] CostError),
    #[error(transparent)]
    Spline(#[from] TrajError),
}

impl<'a> Objective<'a> {
    pub fn new(
        params: &'a OptimizeParams,
        hull: &'a BodyHull,
        corridor: &'a [ConvexPolytope],
        start: &'a BoundaryState,
        end: &'a BoundaryState,
    ) -> Result<Objective<'a>, OptimizeError> {
        if corridor.is_empty() {
            return Err(OptimizeError::EmptyCorridor);
        }
        let tol = 1e-9;
        if !corridor[0].contains(&start.position, tol) {
            return Err(OptimizeError::StartOutsideCorridor);
        }
        if !corridor[corridor.len() - 1].contains(&end.position, tol) {
            return Err(OptimizeError::GoalOutsideCorridor);
        }
        let mut joints = Vec::with_capacity(corridor.len().saturating_sub(1));
        for i in 0..corridor.len() - 1 {
            let overlap = corridor[i]
                .intersect(&corridor[i + 1])
                .map_err(|e| OptimizeError::JointOverlapInfeasible(i, i + 1, e))?;
            let verts = overlap
                .enumerate_vertices()
                .map_err(|e| OptimizeError::JointOverlapInfeasible(i, i + 1, e))?;
            joints.push(verts);
        }
        let map = VariableMap {
            joints,
            pieces: corridor.len(),
        };
        Ok(Objective {
            map,
            engine: EvalEngine::new(params.workers, &params.cost, hull, corridor),
            start,
            end,
            v_max: params.cost.v_max,
        })
    }

    pub fn dim(&self) -> usize {
        self.map.dim()
    }

    pub fn piece_count(&self) -> usize {
        self.map.pieces
    }

    /// Jittered uniform weights; durations sized so the seed segments are
    /// flown at half the speed limit (with a floor to keep the spline well
    /// conditioned).
    pub fn initial_point(&self, seed: u64) -> Vec<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut x = vec![0.0; self.dim()];
        for (off, n) in self.map.joint_offsets() {
            for k in 0..n {
                x[off + k] = 1.0 + WEIGHT_JITTER * rng.gen_range(-1.0..1.0);
            }
        }
        let (waypoints, _, _) = self.map.decode(&x);
        let mut pts = Vec::with_capacity(self.map.pieces + 1);
        pts.push(self.start.position);
        pts.extend(waypoints);
        pts.push(self.end.position);
        let doff = self.map.duration_offset();
        for j in 0..self.map.pieces {
            let len = (pts[j + 1] - pts[j]).norm();
            let duration = (len / (0.5 * self.v_max)).max(0.1);
            x[doff + j] = duration.ln();
        }
        x
    }

    pub fn evaluate(&self, x: &[f64]) -> Result<Evaluation, EvalError> {
        let (waypoints, durations, duration_clamped) = self.map.decode(x);
        let system = SplineSystem::new(&durations)?;
        let traj = system.solve(self.start, self.end, &waypoints);
        let eval = self.engine.evaluate(&traj)?;
        let (grad_q, grad_d) =
            system.propagate_gradient(&traj, &eval.grad_coeffs, &eval.grad_durations);
        let mut gradient = vec![0.0; self.dim()];
        self.map.backward(x, &grad_q, &grad_d, &mut gradient);
        Ok(Evaluation {
            value: eval.report.total,
            gradient,
            report: eval.report,
            trajectory: traj,
            duration_clamped,
        })
    }

    /// Value only; what finite-difference probes should call.
    pub fn value(&self, x: &[f64]) -> Result<f64, EvalError> {
        let (waypoints, durations, _) = self.map.decode(x);
        let system = SplineSystem::new(&durations)?;
        let traj = system.solve(self.start, self.end, &waypoints);
        let eval = self.engine.evaluate(&traj)?;
        Ok(eval.report.total)
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Two-loop recursion over the stored curvature pairs.
fn lbfgs_direction(
    s_hist: &VecDeque<Vec<f64>>,
    y_hist: &VecDeque<Vec<f64>>,
    grad: &[f64],
) -> Vec<f64> {
    let mut q: Vec<f64> = grad.to_vec();
    let k = s_hist.len();
    let mut alphas = vec![0.0; k];
    let mut rhos = vec![0.0; k];
    for i in (0..k).rev() {
        rhos[i] = 1.0 / dot(&y_hist[i], &s_hist[i]);
        let a = rhos[i] * dot(&s_hist[i], &q);
        alphas[i] = a;
        for (qv, yv) in q.iter_mut().zip(&y_hist[i]) {
            *qv -= a * yv;
        }
    }
    if k > 0 {
        let last = k - 1;
        let gamma = dot(&s_hist[last], &y_hist[last]) / dot(&y_hist[last], &y_hist[last]);
        for qv in &mut q {
            *qv *= gamma;
        }
    }
    for i in 0..k {
        let b = rhos[i] * dot(&y_hist[i], &q);
        for (qv, sv) in q.iter_mut().zip(&s_hist[i]) {
            *qv += (alphas[i] - b) * sv;
        }
    }
    for qv in &mut q {
        *qv = -*qv;
    }
    q
}

enum SearchOutcome {
    /// Step satisfying both weak Wolfe conditions.
    Accepted(Evaluation, Vec<f64>),
    /// Conditions never met within the step budget, but some trial still
    /// lowered the cost; take the best of those.
    BestEffort(Evaluation, Vec<f64>),
    Exhausted,
}

/// Weak Wolfe line search after Lewis-Overton: bracket by bisection and
/// expansion, but pick the next trial inside the bracket by a quadratic fit
/// through (0, f0, d0) and the rejected point. Penalty cliffs put the useful
/// step many orders of magnitude below 1, and interpolation gets there in a
/// few probes where plain halving would spend its whole budget. Trial points
/// where the cost is undefined (attitude singularities) are treated as
/// +infinity: the upper bracket moves in and the search continues.
fn line_search(
    objective: &Objective,
    x: &[f64],
    f0: f64,
    d0: f64,
    dir: &[f64],
    evaluations: &mut usize,
) -> SearchOutcome {
    let mut lo = 0.0f64;
    let mut hi = f64::INFINITY;
    let mut alpha = 1.0f64;
    let mut best: Option<(f64, Evaluation, Vec<f64>)> = None;
    for _ in 0..MAX_LINE_SEARCH_STEPS {
        let trial: Vec<f64> = x.iter().zip(dir).map(|(xi, di)| xi + alpha * di).collect();
        *evaluations += 1;
        // The minimizer of the quadratic matching f0, d0, and the trial
        // value; NaN/non-positive when the trial is infeasible or the model
        // has no interior minimum.
        let mut fit = f64::NAN;
        match objective.evaluate(&trial) {
            Err(_) => {
                hi = alpha;
            }
            Ok(eval) => {
                let slope = dot(&eval.gradient, dir);
                if !eval.value.is_finite() || eval.value > f0 + WOLFE_C1 * alpha * d0 {
                    hi = alpha;
                    fit = -0.5 * d0 * alpha * alpha / (eval.value - f0 - d0 * alpha);
                } else if slope < WOLFE_C2 * d0 {
                    lo = alpha;
                    if best.as_ref().is_none_or(|(bf, _, _)| eval.value < *bf) {
                        best = Some((eval.value, eval.clone(), trial.clone()));
                    }
                } else {
                    return SearchOutcome::Accepted(eval, trial);
                }
                if eval.value.is_finite()
                    && eval.value < f0
                    && best.as_ref().is_none_or(|(bf, _, _)| eval.value < *bf)
                {
                    best = Some((eval.value, eval, trial));
                }
            }
        }
        alpha = if hi.is_finite() {
            // Keep the interpolated step a safe distance inside the bracket,
            // falling back to its midpoint when the fit lands outside.
            let pad = 0.1 * (hi - lo);
            if fit.is_finite() && fit > lo + pad && fit < hi - pad {
                fit
            } else {
                0.5 * (lo + hi)
            }
        } else {
            2.0 * alpha
        };
    }
    match best {
        Some((_, eval, trial)) => SearchOutcome::BestEffort(eval, trial),
        None => SearchOutcome::Exhausted,
    }
}

/// Plans a trajectory through the corridor: one spline piece per polytope,
/// boundary states pinned, interior waypoints and durations optimized.
pub fn optimize(
    params: &OptimizeParams,
    hull: &BodyHull,
    corridor: &[ConvexPolytope],
    start: &BoundaryState,
    end: &BoundaryState,
) -> Result<PlanResult, OptimizeError> {
    let objective = Objective::new(params, hull, corridor, start, end)?;
    let n = objective.dim();
    let grad_stop = params.gradient_tol * (n as f64).sqrt();
    let wall = std::time::Instant::now();

    let mut x = objective.initial_point(params.seed);
    let mut evaluations = 1usize;
    let mut current = match objective.evaluate(&x) {
        Ok(e) => e,
        Err(EvalError::Cost(e)) => return Err(OptimizeError::InitialCost(e)),
        Err(EvalError::Spline(e)) => return Err(OptimizeError::Spline(e)),
    };
    let mut warned_clamp = false;
    let mut best = current.clone();
    let mut s_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut y_hist: VecDeque<Vec<f64>> = VecDeque::with_capacity(LBFGS_MEMORY);
    let mut window: VecDeque<f64> = VecDeque::with_capacity(DECREASE_WINDOW + 1);
    window.push_back(current.value);
    let mut iterations = 0usize;
    let mut stop = StopReason::IterationLimit;

    // Stale curvature pairs from a steep penalty cliff shrink the quasi-
    // Newton metric in every direction and the search crawls, so stagnation
    // first drops the history and continues from steepest descent. The value
    // at the last reset decides whether a second stagnation means real
    // convergence or another bad metric.
    let mut value_at_reset = current.value;

    'outer: for iter in 1..=params.max_iterations {
        iterations = iter;
        if norm(&current.gradient) <= grad_stop {
            stop = StopReason::GradientNorm;
            break;
        }
        let mut fresh_memory = s_hist.is_empty();
        let (eval, trial) = loop {
            let mut dir = lbfgs_direction(&s_hist, &y_hist, &current.gradient);
            let mut d0 = dot(&dir, &current.gradient);
            if d0 >= 0.0 {
                // The quasi-Newton model lost descent; fall back to steepest
                // descent for this step.
                dir = current.gradient.iter().map(|g| -g).collect();
                d0 = -dot(&current.gradient, &current.gradient);
            }
            match line_search(&objective, &x, current.value, d0, &dir, &mut evaluations) {
                SearchOutcome::Accepted(eval, trial)
                | SearchOutcome::BestEffort(eval, trial) => break (eval, trial),
                SearchOutcome::Exhausted if !fresh_memory => {
                    s_hist.clear();
                    y_hist.clear();
                    fresh_memory = true;
                    value_at_reset = current.value;
                }
                SearchOutcome::Exhausted => {
                    stop = StopReason::LineSearchStalled;
                    break 'outer;
                }
            }
        };
        if eval.duration_clamped && !warned_clamp {
            log::warn!("log-duration variable clamped to +-{LOG_DURATION_RANGE}");
            warned_clamp = true;
        }
        let s: Vec<f64> = trial.iter().zip(&x).map(|(a, b)| a - b).collect();
        let y: Vec<f64> = eval
            .gradient
            .iter()
            .zip(&current.gradient)
            .map(|(a, b)| a - b)
            .collect();
        if log::log_enabled!(log::Level::Debug) {
            log::debug!(
                "{{\"iteration\":{},\"cost\":{:e},\"grad_norm\":{:e},\"step\":{:e},\"wall_s\":{:.6},\"components\":{}}}",
                iter,
                eval.value,
                norm(&eval.gradient),
                norm(&s),
                wall.elapsed().as_secs_f64(),
                serde_json::to_string(&eval.report).expect("cost report serializes"),
            );
        }
        if dot(&y, &s) > CURVATURE_FLOOR * norm(&y) * norm(&s) {
            if s_hist.len() == LBFGS_MEMORY {
                s_hist.pop_front();
                y_hist.pop_front();
            }
            s_hist.push_back(s);
            y_hist.push_back(y);
        }
        x = trial;
        current = eval;
        if current.value < best.value {
            best = current.clone();
        }
        window.push_back(current.value);
        if window.len() > DECREASE_WINDOW {
            let then = window.pop_front().expect("window non-empty");
            if then - current.value <= params.relative_decrease_tol * then.abs().max(1.0) {
                let tol_since_reset =
                    params.relative_decrease_tol * value_at_reset.abs().max(1.0);
                if s_hist.is_empty()
                    || value_at_reset - current.value <= tol_since_reset
                {
                    stop = StopReason::RelativeDecrease;
                    break;
                }
                s_hist.clear();
                y_hist.clear();
                window.clear();
                window.push_back(current.value);
                value_at_reset = current.value;
            }
        }
    }

    Ok(PlanResult {
        trajectory: best.trajectory,
        report: best.report,
        iterations,
        evaluations,
        stop,
    })
}

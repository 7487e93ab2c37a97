//! Trajectory cost: jerk smoothness, weighted total time, and penalized
//! velocity, acceleration, and whole-body corridor constraints.
//!
//! Everything is evaluated per piece and summed in ascending piece order, so
//! a parallel evaluator that merges per-piece partials in the same order
//! reproduces the serial result bit for bit. Constraints are soft: each
//! violation x enters as max(x, 0)^3, which is C^2 and leaves the total cost
//! twice differentiable, as the quasi-Newton optimizer requires.
//!
//! The collision term is the whole-body part: every hull vertex, rotated by
//! the attitude the current acceleration implies, must stay inside the
//! piece's corridor polytope. Its gradient therefore couples position and
//! acceleration through the attitude Jacobian.

use crate::flatness::{self, FlatnessError};
use crate::geom::{BodyHull, ConvexPolytope};
use crate::traj::{basis, CoeffBlock, Trajectory};
use crate::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

type Basis = nalgebra::SVector<f64, 6>;

/// Weights and limits for the trajectory cost.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostParams {
    /// Weight on total trajectory time.
    pub time_weight: f64,
    /// Weight on squared-speed limit violations.
    pub velocity_weight: f64,
    /// Weight on squared-acceleration limit violations.
    pub accel_weight: f64,
    /// Weight on hull-vertex corridor violations.
    pub collision_weight: f64,
    /// Constraint samples per piece.
    pub samples_per_piece: usize,
    /// Speed limit, m/s.
    pub v_max: f64,
    /// Acceleration limit, m/s^2.
    pub a_max: f64,
}

impl Default for CostParams {
    fn default() -> CostParams {
        CostParams {
            time_weight: 100.0,
            velocity_weight: 1e4,
            accel_weight: 1e4,
            collision_weight: 1e5,
            samples_per_piece: 16,
            v_max: 5.0,
            a_max: 18.0,
        }
    }
}

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    /// The attitude map failed at a constraint sample, so the whole-body
    /// term is undefined there.
    #[error("attitude undefined at piece {piece} sample {sample}: {source}")]
    AttitudeSingular {
        piece: usize,
        sample: usize,
        source: FlatnessError,
    },
}

/// Cost decomposition; `total` is the sum of the other five fields.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize)]
pub struct CostReport {
    pub smoothness: f64,
    pub time: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub collision: f64,
    pub total: f64,
}

/// One piece's cost contributions and partial derivatives, with the
/// coefficients treated as free variables (no spline coupling).
#[derive(Debug, Clone, PartialEq)]
pub struct PiecePartial {
    pub smoothness: f64,
    pub time: f64,
    pub velocity: f64,
    pub acceleration: f64,
    pub collision: f64,
    pub grad_coeffs: CoeffBlock,
    pub grad_duration: f64,
}

/// Full evaluation over a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct CostEval {
    pub report: CostReport,
    pub grad_coeffs: Vec<CoeffBlock>,
    pub grad_durations: Vec<f64>,
}

impl CostReport {
    pub fn accumulate(&mut self, p: &PiecePartial) {
        self.smoothness += p.smoothness;
        self.time += p.time;
        self.velocity += p.velocity;
        self.acceleration += p.acceleration;
        self.collision += p.collision;
    }

    pub fn finish(&mut self) {
        self.total = self.smoothness + self.time + self.velocity + self.acceleration
            + self.collision;
    }
}

fn eval_piece(c: &CoeffBlock, t: f64, order: usize) -> Vec3 {
    let beta = basis(t, order);
    let mut out = Vec3::zeros();
    for (m, &b) in beta.iter().enumerate() {
        if b != 0.0 {
            out += c.row(m).transpose() * b;
        }
    }
    out
}

/// Cost and partials of one piece.
///
/// The smoothness term integrates squared jerk in closed form; the limit and
/// collision terms are sampled at `l/L * duration` for `l = 0..L-1` with the
/// rectangle weight `duration / L`, so their duration partial carries both
/// the weight term and the drift of the sample times.
pub fn piece_cost(
    params: &CostParams,
    hull: &BodyHull,
    corridor: &ConvexPolytope,
    coeffs: &CoeffBlock,
    duration: f64,
    piece_index: usize,
) -> Result<PiecePartial, CostError> {
    let mut out = PiecePartial {
        smoothness: 0.0,
        time: params.time_weight * duration,
        velocity: 0.0,
        acceleration: 0.0,
        collision: 0.0,
        grad_coeffs: CoeffBlock::zeros(),
        grad_duration: params.time_weight,
    };

    // Jerk energy: integral of ||p'''||^2 over the piece, a quadratic form in
    // the degree >= 3 coefficients.
    let mut q = nalgebra::SMatrix::<f64, 6, 6>::zeros();
    for m in 3..6 {
        for n in 3..6 {
            let cm = (m * (m - 1) * (m - 2)) as f64;
            let cn = (n * (n - 1) * (n - 2)) as f64;
            let p = (m + n - 5) as i32;
            q[(m, n)] = cm * cn * duration.powi(p) / p as f64;
        }
    }
    for ax in 0..3 {
        let col = coeffs.column(ax);
        out.smoothness += (col.transpose() * q * col)[(0, 0)];
    }
    out.grad_coeffs += 2.0 * q * coeffs;
    out.grad_duration += eval_piece(coeffs, duration, 3).norm_squared();

    let l_total = params.samples_per_piece;
    let weight = duration / l_total as f64;
    for l in 0..l_total {
        let frac = l as f64 / l_total as f64;
        let t = frac * duration;
        let b0 = Basis::from(basis(t, 0));
        let b1 = Basis::from(basis(t, 1));
        let b2 = Basis::from(basis(t, 2));
        let pos = eval_piece(coeffs, t, 0);
        let vel = eval_piece(coeffs, t, 1);
        let acc = eval_piece(coeffs, t, 2);
        let jerk = eval_piece(coeffs, t, 3);

        let v_excess = vel.norm_squared() - params.v_max * params.v_max;
        if v_excess > 0.0 {
            let x2 = v_excess * v_excess;
            out.velocity += params.velocity_weight * weight * x2 * v_excess;
            out.grad_coeffs +=
                6.0 * params.velocity_weight * weight * x2 * b1 * vel.transpose();
            out.grad_duration += params.velocity_weight / l_total as f64
                * x2
                * (v_excess + 6.0 * duration * frac * vel.dot(&acc));
        }

        let a_excess = acc.norm_squared() - params.a_max * params.a_max;
        if a_excess > 0.0 {
            let x2 = a_excess * a_excess;
            out.acceleration += params.accel_weight * weight * x2 * a_excess;
            out.grad_coeffs +=
                6.0 * params.accel_weight * weight * x2 * b2 * acc.transpose();
            out.grad_duration += params.accel_weight / l_total as f64
                * x2
                * (a_excess + 6.0 * duration * frac * acc.dot(&jerk));
        }

        if params.collision_weight == 0.0
            || corridor.planes.is_empty()
            || hull.vertices.is_empty()
        {
            continue;
        }
        let (rot, rot_jac) =
            flatness::attitude_jacobian(&acc, 0.0).map_err(|source| {
                CostError::AttitudeSingular {
                    piece: piece_index,
                    sample: l,
                    source,
                }
            })?;
        for vtx in &hull.vertices {
            let world = rot * vtx + pos;
            for plane in &corridor.planes {
                let g = plane.normal.dot(&(world - plane.point));
                if g <= 0.0 {
                    continue;
                }
                // How the violated distance responds to acceleration through
                // the attitude.
                let m_vec = Vec3::new(
                    plane.normal.dot(&(rot_jac[0] * vtx)),
                    plane.normal.dot(&(rot_jac[1] * vtx)),
                    plane.normal.dot(&(rot_jac[2] * vtx)),
                );
                let g2 = g * g;
                out.collision += params.collision_weight * weight * g2 * g;
                out.grad_coeffs += 3.0 * params.collision_weight * weight * g2
                    * (b0 * plane.normal.transpose() + b2 * m_vec.transpose());
                out.grad_duration += params.collision_weight / l_total as f64 * g2 * g
                    + 3.0 * params.collision_weight * weight * g2 * frac
                        * (plane.normal.dot(&vel) + m_vec.dot(&jerk));
            }
        }
    }
    Ok(out)
}

/// Reduces per-piece partials, in the order given, to a full evaluation.
/// Serial and parallel evaluation both end here with pieces in ascending
/// order, which is what makes their results bit-identical.
pub fn fold_partials(parts: Vec<PiecePartial>) -> CostEval {
    let mut report = CostReport::default();
    let mut grad_coeffs = Vec::with_capacity(parts.len());
    let mut grad_durations = Vec::with_capacity(parts.len());
    for part in parts {
        report.accumulate(&part);
        grad_coeffs.push(part.grad_coeffs);
        grad_durations.push(part.grad_duration);
    }
    report.finish();
    CostEval {
        report,
        grad_coeffs,
        grad_durations,
    }
}

/// Integrated squared jerk of the whole trajectory: the smoothness term by
/// itself, with no weights attached.
pub fn jerk_energy(traj: &Trajectory) -> f64 {
    let mut total = 0.0;
    for (coeffs, &duration) in traj.coeffs().iter().zip(traj.durations()) {
        let mut q = nalgebra::SMatrix::<f64, 6, 6>::zeros();
        for m in 3..6 {
            for n in 3..6 {
                let cm = (m * (m - 1) * (m - 2)) as f64;
                let cn = (n * (n - 1) * (n - 2)) as f64;
                let p = (m + n - 5) as i32;
                q[(m, n)] = cm * cn * duration.powi(p) / p as f64;
            }
        }
        for ax in 0..3 {
            let col = coeffs.column(ax);
            total += (col.transpose() * q * col)[(0, 0)];
        }
    }
    total
}

/// Evaluates the whole trajectory serially, folding pieces in ascending
/// order. `corridors[j]` constrains piece j.
pub fn total_cost(
    params: &CostParams,
    hull: &BodyHull,
    corridors: &[ConvexPolytope],
    traj: &Trajectory,
) -> Result<CostEval, CostError> {
    let pieces = traj.piece_count();
    assert_eq!(corridors.len(), pieces, "one corridor polytope per piece");
    let parts = (0..pieces)
        .map(|j| {
            piece_cost(
                params,
                hull,
                &corridors[j],
                &traj.coeffs()[j],
                traj.durations()[j],
                j,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(fold_partials(parts))
}

//! Piecewise quintic trajectories and the interpolating spline solver.
//!
//! A trajectory is M quintic pieces in R^3, each parameterized by a local
//! time in `[0, delta_j]`. Boundary position/velocity/acceleration, interior
//! waypoint positions, and C^4 continuity at every joint pin down all 6M
//! coefficients per axis through one banded linear system. Because the
//! coefficients are an implicit function of the waypoints and durations, any
//! cost gradient with respect to coefficients can be pulled back to waypoint
//! and duration gradients with two more banded solves; that adjoint map is
//! `SplineSystem::propagate_gradient`.

use crate::banded::{BandError, BandedLu, BandedMatrix};
use crate::Vec3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Coefficients of one piece: row m holds the coefficient of t^m, columns are
/// the x, y, z axes.
pub type CoeffBlock = nalgebra::SMatrix<f64, 6, 3>;

#[derive(Debug, Error, PartialEq)]
pub enum TrajError {
    #[error("piece {0} has a non-positive or non-finite duration")]
    NonPositiveDuration(usize),
    /// The interpolation system lost rank; cannot happen for valid durations.
    #[error("spline system is singular")]
    SingularSystem,
    #[error("bad trajectory data: {0}")]
    Malformed(String),
}

impl From<BandError> for TrajError {
    fn from(_: BandError) -> Self {
        TrajError::SingularSystem
    }
}

/// Full dynamic state at a trajectory endpoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundaryState {
    pub position: Vec3,
    pub velocity: Vec3,
    pub acceleration: Vec3,
}

impl BoundaryState {
    /// At rest: zero velocity and acceleration.
    pub fn rest(position: Vec3) -> BoundaryState {
        BoundaryState {
            position,
            velocity: Vec3::zeros(),
            acceleration: Vec3::zeros(),
        }
    }
}

/// Monomial basis row for the k-th time derivative: entry m is
/// d^k/dt^k (t^m) = m!/(m-k)! t^(m-k).
pub(crate) fn basis(t: f64, order: usize) -> [f64; 6] {
    let mut out = [0.0; 6];
    for m in order..6 {
        let mut c = 1.0;
        for f in (m - order + 1)..=m {
            c *= f as f64;
        }
        out[m] = c * t.powi((m - order) as i32);
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "TrajectoryRepr", into = "TrajectoryRepr")]
pub struct Trajectory {
    durations: Vec<f64>,
    coeffs: Vec<CoeffBlock>,
}

/// On-disk form: `s` is the integrator chain order (3 for jerk-smooth
/// quintics); coefficient rows are ordered by monomial degree.
#[derive(Serialize, Deserialize)]
struct TrajectoryRepr {
    s: usize,
    durations: Vec<f64>,
    coeffs: Vec<[[f64; 3]; 6]>,
}

impl TryFrom<TrajectoryRepr> for Trajectory {
    type Error = TrajError;
    fn try_from(r: TrajectoryRepr) -> Result<Trajectory, TrajError> {
        if r.s != 3 {
            return Err(TrajError::Malformed(format!(
                "unsupported smoothness order s={} (expected 3)",
                r.s
            )));
        }
        if r.coeffs.len() != r.durations.len() || r.durations.is_empty() {
            return Err(TrajError::Malformed(
                "durations and coefficient blocks must be non-empty and equal length".into(),
            ));
        }
        let coeffs = r
            .coeffs
            .iter()
            .map(|rows| CoeffBlock::from_fn(|m, ax| rows[m][ax]))
            .collect();
        Trajectory::new(r.durations, coeffs)
    }
}

impl From<Trajectory> for TrajectoryRepr {
    fn from(t: Trajectory) -> TrajectoryRepr {
        TrajectoryRepr {
            s: 3,
            durations: t.durations.clone(),
            coeffs: t
                .coeffs
                .iter()
                .map(|c| std::array::from_fn(|m| std::array::from_fn(|ax| c[(m, ax)])))
                .collect(),
        }
    }
}

impl Trajectory {
    pub fn new(durations: Vec<f64>, coeffs: Vec<CoeffBlock>) -> Result<Trajectory, TrajError> {
        if durations.is_empty() || durations.len() != coeffs.len() {
            return Err(TrajError::Malformed(
                "durations and coefficient blocks must be non-empty and equal length".into(),
            ));
        }
        for (j, d) in durations.iter().enumerate() {
            if !(d.is_finite() && *d > 0.0) {
                return Err(TrajError::NonPositiveDuration(j));
            }
        }
        Ok(Trajectory { durations, coeffs })
    }

    pub fn piece_count(&self) -> usize {
        self.durations.len()
    }

    pub fn durations(&self) -> &[f64] {
        &self.durations
    }

    pub fn coeffs(&self) -> &[CoeffBlock] {
        &self.coeffs
    }

    pub fn total_time(&self) -> f64 {
        self.durations.iter().sum()
    }

    /// Piece index and local time for a global time, clamped to the ends.
    pub fn locate(&self, t: f64) -> (usize, f64) {
        if t <= 0.0 {
            return (0, 0.0);
        }
        let mut rem = t;
        for (j, &d) in self.durations.iter().enumerate() {
            if rem <= d || j + 1 == self.durations.len() {
                return (j, rem.min(d));
            }
            rem -= d;
        }
        unreachable!("durations is non-empty")
    }

    /// k-th derivative of piece `j` at local time `tau`.
    pub fn piece_eval(&self, j: usize, tau: f64, order: usize) -> Vec3 {
        if order > 5 {
            return Vec3::zeros();
        }
        let beta = basis(tau, order);
        let mut out = Vec3::zeros();
        for (m, &b) in beta.iter().enumerate() {
            if b != 0.0 {
                out += self.coeffs[j].row(m).transpose() * b;
            }
        }
        out
    }

    /// k-th derivative at global time, clamped to `[0, total_time]`.
    pub fn derivative(&self, t: f64, order: usize) -> Vec3 {
        let (j, tau) = self.locate(t);
        self.piece_eval(j, tau, order)
    }

    pub fn position(&self, t: f64) -> Vec3 {
        self.derivative(t, 0)
    }

    pub fn velocity(&self, t: f64) -> Vec3 {
        self.derivative(t, 1)
    }

    pub fn acceleration(&self, t: f64) -> Vec3 {
        self.derivative(t, 2)
    }
}

/// The factored interpolation system for a fixed duration vector.
///
/// Both the matrix and its transpose are factored up front: the forward
/// solve produces coefficients, the transpose solve pulls cost gradients
/// back through the implicit function theorem.
#[derive(Debug)]
pub struct SplineSystem {
    durations: Vec<f64>,
    lu: BandedLu,
    lu_t: BandedLu,
}

/// Subdiagonals of the interpolation matrix: the k=4 continuity row reaches 8
/// columns left of the diagonal.
const BAND_LOWER: usize = 8;
/// Superdiagonals: the k=0 continuity row reaches 7 columns right.
const BAND_UPPER: usize = 7;

impl SplineSystem {
    pub fn new(durations: &[f64]) -> Result<SplineSystem, TrajError> {
        if durations.is_empty() {
            return Err(TrajError::Malformed("no pieces".into()));
        }
        for (j, d) in durations.iter().enumerate() {
            if !(d.is_finite() && *d > 0.0) {
                return Err(TrajError::NonPositiveDuration(j));
            }
        }
        let pieces = durations.len();
        let n = 6 * pieces;
        let mut a = BandedMatrix::zeros(n, BAND_LOWER, BAND_UPPER);
        let mut a_t = BandedMatrix::zeros(n, BAND_UPPER, BAND_LOWER);
        let put = |a: &mut BandedMatrix, a_t: &mut BandedMatrix, r: usize, c: usize, v: f64| {
            if v != 0.0 {
                a.set(r, c, v);
                a_t.set(c, r, v);
            }
        };
        // Start state: derivatives 0..2 of piece 0 at tau = 0.
        for k in 0..3 {
            let beta = basis(0.0, k);
            for (m, &v) in beta.iter().enumerate() {
                put(&mut a, &mut a_t, k, m, v);
            }
        }
        // One block of 6 rows per interior joint: a waypoint interpolation
        // row, then continuity of derivatives 0..4 across the joint.
        for i in 0..pieces - 1 {
            let rb = 3 + 6 * i;
            let delta = durations[i];
            let beta = basis(delta, 0);
            for (m, &v) in beta.iter().enumerate() {
                put(&mut a, &mut a_t, rb, 6 * i + m, v);
            }
            for k in 0..5 {
                let r = rb + 1 + k;
                let left = basis(delta, k);
                for (m, &v) in left.iter().enumerate() {
                    put(&mut a, &mut a_t, r, 6 * i + m, v);
                }
                let right = basis(0.0, k);
                for (m, &v) in right.iter().enumerate() {
                    put(&mut a, &mut a_t, r, 6 * (i + 1) + m, -v);
                }
            }
        }
        // End state: derivatives 0..2 of the last piece at tau = delta.
        let last = pieces - 1;
        for k in 0..3 {
            let beta = basis(durations[last], k);
            for (m, &v) in beta.iter().enumerate() {
                put(&mut a, &mut a_t, n - 3 + k, 6 * last + m, v);
            }
        }
        Ok(SplineSystem {
            durations: durations.to_vec(),
            lu: a.factor()?,
            lu_t: a_t.factor()?,
        })
    }

    pub fn piece_count(&self) -> usize {
        self.durations.len()
    }

    /// Solves for the unique C^4 quintic spline hitting the boundary states
    /// and the `piece_count - 1` interior waypoints.
    pub fn solve(
        &self,
        start: &BoundaryState,
        end: &BoundaryState,
        waypoints: &[Vec3],
    ) -> Trajectory {
        let pieces = self.durations.len();
        assert_eq!(
            waypoints.len(),
            pieces - 1,
            "need exactly one waypoint per interior joint"
        );
        let n = 6 * pieces;
        let mut coeffs = vec![CoeffBlock::zeros(); pieces];
        for ax in 0..3 {
            let mut rhs = vec![0.0; n];
            rhs[0] = start.position[ax];
            rhs[1] = start.velocity[ax];
            rhs[2] = start.acceleration[ax];
            for (i, q) in waypoints.iter().enumerate() {
                rhs[3 + 6 * i] = q[ax];
            }
            rhs[n - 3] = end.position[ax];
            rhs[n - 2] = end.velocity[ax];
            rhs[n - 1] = end.acceleration[ax];
            self.lu.solve_in_place(&mut rhs);
            for (j, block) in coeffs.iter_mut().enumerate() {
                for m in 0..6 {
                    block[(m, ax)] = rhs[6 * j + m];
                }
            }
        }
        Trajectory {
            durations: self.durations.clone(),
            coeffs,
        }
    }

    /// Pulls a cost gradient back through the spline solve.
    ///
    /// Inputs are the partials of a cost H with the coefficients held as the
    /// free variable: `grad_coeffs[j]` is dH/dC_j and `grad_durations[j]` the
    /// direct dH/d(delta_j) at fixed coefficients. Returns the total
    /// gradients with respect to the interior waypoints and the durations,
    /// accounting for how the solved coefficients move when either input
    /// moves. Cost: three banded solves plus O(pieces) dot products.
    pub fn propagate_gradient(
        &self,
        traj: &Trajectory,
        grad_coeffs: &[CoeffBlock],
        grad_durations: &[f64],
    ) -> (Vec<Vec3>, Vec<f64>) {
        let pieces = self.durations.len();
        assert_eq!(grad_coeffs.len(), pieces);
        assert_eq!(grad_durations.len(), pieces);
        let n = 6 * pieces;
        // adj = M^-T * dH/dC, one solve per axis.
        let mut adj = [vec![0.0; n], vec![0.0; n], vec![0.0; n]];
        for ax in 0..3 {
            for (j, g) in grad_coeffs.iter().enumerate() {
                for m in 0..6 {
                    adj[ax][6 * j + m] = g[(m, ax)];
                }
            }
            self.lu_t.solve_in_place(&mut adj[ax]);
        }
        let adj_row = |r: usize| Vec3::new(adj[0][r], adj[1][r], adj[2][r]);
        // Waypoint q_i enters only its interpolation row of the RHS.
        let grad_waypoints: Vec<Vec3> = (0..pieces - 1).map(|i| adj_row(3 + 6 * i)).collect();
        // Duration delta_j enters through every matrix row that evaluates
        // piece j at its end: d(row)/d(delta) bumps the derivative order by
        // one, so each row contributes -adj_row . p_j^(k+1)(delta_j).
        let mut grad_dur = grad_durations.to_vec();
        for i in 0..pieces - 1 {
            let rb = 3 + 6 * i;
            let delta = self.durations[i];
            let mut acc = adj_row(rb).dot(&traj.piece_eval(i, delta, 1));
            for k in 0..5 {
                acc += adj_row(rb + 1 + k).dot(&traj.piece_eval(i, delta, k + 1));
            }
            grad_dur[i] -= acc;
        }
        let last = pieces - 1;
        let delta = self.durations[last];
        let mut acc = 0.0;
        for k in 0..3 {
            acc += adj_row(n - 3 + k).dot(&traj.piece_eval(last, delta, k + 1));
        }
        grad_dur[last] -= acc;
        (grad_waypoints, grad_dur)
    }
}

/// Convenience wrapper: assemble, factor, and solve in one call.
pub fn solve_spline(
    start: &BoundaryState,
    end: &BoundaryState,
    waypoints: &[Vec3],
    durations: &[f64],
) -> Result<Trajectory, TrajError> {
    Ok(SplineSystem::new(durations)?.solve(start, end, waypoints))
}

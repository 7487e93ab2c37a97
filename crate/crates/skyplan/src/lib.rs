//! Whole-body SE(3) trajectory planning and racing evaluation for multirotors.
//!
//! The crate covers the pipeline from an obstacle point cloud to a smooth,
//! collision-aware polynomial trajectory, plus a racing harness that tracks
//! the trajectory in closed loop and scores gate passes:
//!
//! 1. [`envmap`] — voxel occupancy grid, A* seed path, Euclidean distance field
//! 2. [`corridor`] — safe flight corridor of overlapping convex polytopes
//! 3. [`traj`] — piecewise quintic trajectories pinned to waypoints and times
//! 4. [`cost`] — jerk smoothness plus soft limit/collision penalties, with
//!    analytic gradients
//! 5. [`optimizer`] — unconstrained reparameterization and L-BFGS descent,
//!    with a deterministic parallel cost evaluator
//! 6. [`flatness`] — body attitude recovered from the flat outputs
//! 7. [`racing`] — closed-loop tracking simulation, gate passing, scoring
//!
//! [`geom`] holds the convex-geometry primitives shared by all stages, and
//! [`banded`] the banded linear solver behind the trajectory mapping. The
//! `skyplan` binary (see [`cli`]) exposes the pipeline as subcommands.

pub mod banded;
pub mod cli;
pub mod corridor;
pub mod cost;
pub mod envmap;
pub mod flatness;
pub mod geom;
pub mod optimizer;
pub mod racing;
pub mod traj;

/// 3-vector of f64, used for positions, velocities, accelerations, normals.
pub type Vec3 = nalgebra::Vector3<f64>;
/// 3x3 matrix of f64, used for rotations and Jacobian blocks.
pub type Mat3 = nalgebra::Matrix3<f64>;

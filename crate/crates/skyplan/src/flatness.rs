//! Attitude from flat outputs.
//!
//! A multirotor's thrust axis must align with the mass-normalized thrust
//! vector `f = a + g*e_z`, so acceleration plus a yaw angle determines the
//! full body rotation. This module computes that rotation and its exact
//! derivative with respect to acceleration, which the collision penalty needs
//! to push hull vertices around by steering the attitude.

use crate::{Mat3, Vec3};
use thiserror::Error;

/// Standard gravity, m/s^2.
pub const GRAVITY: f64 = 9.81;

/// Thrust below this fraction of hover leaves the thrust direction, and with
/// it the attitude, numerically undefined.
const MIN_THRUST_RATIO: f64 = 1e-3;

/// Threshold on the cross product that builds the body-y axis; below it the
/// thrust axis is parallel to the yaw reference and roll is undefined.
const MIN_YAW_CROSS: f64 = 1e-6;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum FlatnessError {
    /// Commanded acceleration cancels gravity; no thrust direction exists.
    #[error("thrust vector vanishes (free fall)")]
    FreefallSingularity,
    /// Thrust axis is parallel to the yaw heading; roll is undefined.
    #[error("thrust axis parallel to yaw heading")]
    GimbalLockSingularity,
}

/// Body rotation (columns are body x, y, z axes in world frame) for a given
/// world acceleration and yaw.
pub fn attitude(acc: &Vec3, yaw: f64) -> Result<Mat3, FlatnessError> {
    let (rot, _) = axes(acc, yaw)?;
    Ok(rot)
}

/// Rotation plus its derivative with respect to each acceleration component:
/// `jac[d]` is the elementwise d(R)/d(acc[d]).
pub fn attitude_jacobian(acc: &Vec3, yaw: f64) -> Result<(Mat3, [Mat3; 3]), FlatnessError> {
    let (rot, parts) = axes(acc, yaw)?;
    let (f, c, r_ix) = parts;
    let r_bz = rot.column(2).into_owned();
    let r_by = rot.column(1).into_owned();
    let nf = normalized_dir_jacobian(&f);
    let nc = normalized_dir_jacobian(&c);
    let mut jac = [Mat3::zeros(); 3];
    for d in 0..3 {
        let dz: Vec3 = nf.column(d).into_owned();
        let dc = dz.cross(&r_ix);
        let dy = nc * dc;
        let dx = dy.cross(&r_bz) + r_by.cross(&dz);
        jac[d].set_column(0, &dx);
        jac[d].set_column(1, &dy);
        jac[d].set_column(2, &dz);
    }
    Ok((rot, jac))
}

/// Shared construction; returns the rotation and the unnormalized
/// intermediates (thrust vector, yaw cross product, heading) the Jacobian
/// reuses.
fn axes(acc: &Vec3, yaw: f64) -> Result<(Mat3, (Vec3, Vec3, Vec3)), FlatnessError> {
    let f = acc + Vec3::new(0.0, 0.0, GRAVITY);
    if f.norm() <= MIN_THRUST_RATIO * GRAVITY {
        return Err(FlatnessError::FreefallSingularity);
    }
    let r_bz = f / f.norm();
    let r_ix = Vec3::new(yaw.cos(), yaw.sin(), 0.0);
    let c = r_bz.cross(&r_ix);
    if c.norm() <= MIN_YAW_CROSS {
        return Err(FlatnessError::GimbalLockSingularity);
    }
    let r_by = c / c.norm();
    let r_bx = r_by.cross(&r_bz);
    let mut rot = Mat3::zeros();
    rot.set_column(0, &r_bx);
    rot.set_column(1, &r_by);
    rot.set_column(2, &r_bz);
    Ok((rot, (f, c, r_ix)))
}

/// Jacobian of u/|u|: (I - uu^T/|u|^2) / |u|.
fn normalized_dir_jacobian(u: &Vec3) -> Mat3 {
    let n = u.norm();
    let hat = u / n;
    (Mat3::identity() - hat * hat.transpose()) / n
}

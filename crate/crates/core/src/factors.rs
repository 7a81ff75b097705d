//! Raw error functions and their analytic Jacobians.
//!
//! State blocks are ordered `(x, y, z, phi, delta, delta_dot)`. Each error
//! here is the unweighted difference between model and measurement; the
//! solver applies the noise model on top.

use nalgebra::{DMatrix, DVector, Matrix2, Matrix4, RowVector6, Vector2, Vector4};

use crate::error::{invalid, Result};
use crate::model::{wrap, ClockState, OdometryMeasurement, PoseState, PseudorangeMeasurement};

/// Scalar pseudorange error and its derivative with respect to the state
/// block `(x, y, z, phi, delta, delta_dot)`.
pub fn pseudorange_error(
    pose: &PoseState,
    clock: &ClockState,
    z: &PseudorangeMeasurement,
) -> Result<(f64, RowVector6<f64>)> {
    let los = z.sat_pos - pose.position();
    let dist = los.norm();
    if !(dist > 0.0) {
        return invalid(format!("satellite {} coincides with the receiver", z.sat_id));
    }
    let u = los / dist;
    let e = dist + clock.delta - z.range;
    Ok((e, RowVector6::new(-u.x, -u.y, -u.z, 0.0, 1.0, 0.0)))
}

/// Odometry error `[R(-phi_t) (p_t1 - p_t) - (fwd, lat, vert); wrap(phi_t1 - phi_t - dyaw)]`
/// with Jacobians with respect to `pose_t` and `pose_t1`.
pub fn odometry_error(
    pose_t: &PoseState,
    pose_t1: &PoseState,
    z: &OdometryMeasurement,
) -> (Vector4<f64>, Matrix4<f64>, Matrix4<f64>) {
    let (s, c) = pose_t.phi.sin_cos();
    let dx = pose_t1.x - pose_t.x;
    let dy = pose_t1.y - pose_t.y;
    let dz = pose_t1.z - pose_t.z;
    let bx = c * dx + s * dy;
    let by = -s * dx + c * dy;
    let e = Vector4::new(bx - z.forward, by - z.lateral, dz - z.vertical, wrap(pose_t1.phi - pose_t.phi - z.dyaw));
    #[rustfmt::skip]
    let j1 = Matrix4::new(
        c, s, 0.0, 0.0,
        -s, c, 0.0, 0.0,
        0.0, 0.0, 1.0, 0.0,
        0.0, 0.0, 0.0, 1.0,
    );
    let mut j0 = -j1;
    j0[(0, 3)] = by;
    j0[(1, 3)] = -bx;
    (e, j0, j1)
}

/// Constant-drift clock error `[delta_1 - delta_0 - delta_dot_0 dt; delta_dot_1 - delta_dot_0]`.
/// Its Jacobians are constant: returned as `(e, d/dclock_t, d/dclock_t1)`.
pub fn clock_cced_error(clock_t: &ClockState, clock_t1: &ClockState, dt: f64) -> (Vector2<f64>, Matrix2<f64>, Matrix2<f64>) {
    let e = Vector2::new(
        clock_t1.delta - (clock_t.delta + clock_t.delta_dot * dt),
        clock_t1.delta_dot - clock_t.delta_dot,
    );
    (e, Matrix2::new(-1.0, -dt, 0.0, -1.0), Matrix2::identity())
}

/// Default CCED square-root information per second of `dt`: diag(10, 10).
pub fn cced_sqrt_info(dt: f64, per_second: [f64; 2]) -> Matrix2<f64> {
    let scale = 1.0 / dt.sqrt();
    Matrix2::new(per_second[0] * scale, 0.0, 0.0, per_second[1] * scale)
}

/// Whitened prior error `sqrt_info (x - mean)`.
pub fn prior_error(state: &DVector<f64>, mean: &DVector<f64>, sqrt_info: &DMatrix<f64>) -> Result<DVector<f64>> {
    if state.len() != mean.len() || sqrt_info.ncols() != state.len() {
        return invalid(format!(
            "prior dimensions disagree: state {}, mean {}, sqrt_info {}x{}",
            state.len(),
            mean.len(),
            sqrt_info.nrows(),
            sqrt_info.ncols()
        ));
    }
    Ok(sqrt_info * (state - mean))
}

//! Poses, exposure windows and pose interpolation.
//!
//! Conventions used throughout the crate:
//!
//! * Poses are **camera-to-world**: `x_world = R * x_cam + t`, so `t` is the
//!   camera center in world coordinates.
//! * Quaternions are stored `[w, x, y, z]` in the generic helpers and
//!   canonicalized to `w >= 0` at API boundaries (both signs denote the same
//!   rotation; pinning the sign makes serialization and residuals unambiguous).
//! * Rotation tangents, rotational velocities and axis-angle vectors are
//!   expressed in the **world** frame and act by left multiplication:
//!   a perturbation `e` moves `R` to `exp(e^) * R`.
//!
//! An [`ExposureWindow`] models one frame's shutter interval: the camera moves
//! at constant (rotational + translational) velocity through the window, so
//! the pose at any time inside the window is a Slerp/Lerp between the start
//! and end poses, which are themselves derived from the center pose and the
//! velocity. The center+velocity form is the canonical parameterization; the
//! start/end poses are always derived, never stored.
//!
//! The interpolation chain is written generically over [`Real`] so the exact
//! same code path can run on dual numbers, giving exact Jacobians of fan
//! poses with respect to the window parameters (see
//! [`ExposureWindow::pose_jacobian`]).

use std::fmt::Write as _;
use std::path::Path;

use nalgebra::{Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::real::{Dual, Real};

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("time {t} outside exposure window [{t_start}, {t_end}]")]
    OutOfWindow { t: f64, t_start: f64, t_end: f64 },
    #[error("exposure duration must be positive, got {0}")]
    BadDuration(f64),
    #[error("trajectory parse error at line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

// ---------------------------------------------------------------------------
// Generic quaternion helpers ([w, x, y, z] component order)
// ---------------------------------------------------------------------------

#[inline]
pub(crate) fn qmul<T: Real>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    [
        a[0] * b[0] - a[1] * b[1] - a[2] * b[2] - a[3] * b[3],
        a[0] * b[1] + a[1] * b[0] + a[2] * b[3] - a[3] * b[2],
        a[0] * b[2] - a[1] * b[3] + a[2] * b[0] + a[3] * b[1],
        a[0] * b[3] + a[1] * b[2] - a[2] * b[1] + a[3] * b[0],
    ]
}

#[inline]
fn qdot<T: Real>(a: [T; 4], b: [T; 4]) -> T {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2] + a[3] * b[3]
}

#[inline]
fn qscale<T: Real>(q: [T; 4], s: T) -> [T; 4] {
    [q[0] * s, q[1] * s, q[2] * s, q[3] * s]
}

#[inline]
fn qadd<T: Real>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2], a[3] + b[3]]
}

#[inline]
fn qsub<T: Real>(a: [T; 4], b: [T; 4]) -> [T; 4] {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2], a[3] - b[3]]
}

#[inline]
fn qneg<T: Real>(q: [T; 4]) -> [T; 4] {
    [-q[0], -q[1], -q[2], -q[3]]
}

fn qnormalize<T: Real>(q: [T; 4]) -> [T; 4] {
    let n = qdot(q, q).sqrt();
    qscale(q, T::cst(1.0) / n)
}

/// Quaternion for a rotation by the axis-angle vector `r` (angle `|r|` about
/// `r/|r|`). Series expansion near zero keeps this smooth for dual numbers.
pub(crate) fn qexp<T: Real>(r: [T; 3]) -> [T; 4] {
    let t2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    // cos(t/2) and sin(t/2)/t as functions of t^2, finite at 0.
    let (c, k) = if t2.val() < 1e-12 {
        let c = T::cst(1.0) - t2 * T::cst(1.0 / 8.0) + t2 * t2 * T::cst(1.0 / 384.0);
        let k = T::cst(0.5) - t2 * T::cst(1.0 / 48.0) + t2 * t2 * T::cst(1.0 / 3840.0);
        (c, k)
    } else {
        let t = t2.sqrt();
        let half = t * T::cst(0.5);
        (half.cos(), half.sin() / t)
    };
    [c, r[0] * k, r[1] * k, r[2] * k]
}

/// Deterministic unit quaternion orthogonal to `q` (used by the antipodal
/// Slerp fallback): `[-x, w, z, -y]` has zero dot with `[w, x, y, z]`.
fn qortho<T: Real>(q: [T; 4]) -> [T; 4] {
    [-q[1], q[0], q[3], -q[2]]
}

/// Spherical linear interpolation between unit quaternions.
///
/// Takes the shorter arc (sign-flips `q1` if needed). Exactly antipodal
/// inputs have no unique shortest arc; they fall back to the fixed orthogonal
/// great circle through [`qortho`], which is deterministic. Near-identical
/// inputs fall back to normalized linear interpolation (difference is
/// O(angle^3), far below working precision at the switch threshold).
pub(crate) fn slerp_q<T: Real>(q0: [T; 4], q1: [T; 4], u: T) -> [T; 4] {
    // Identical endpoints reproduce the input bit-for-bit (a zero-velocity
    // window must render exactly like its center pose).
    if (0..4).all(|i| q0[i].identical(q1[i])) {
        return q0;
    }
    let d0 = qdot(q0, q1);
    if d0.val() < -1.0 + 1e-9 {
        let p = qortho(q0);
        let ang = u * T::cst(std::f64::consts::PI);
        return qadd(qscale(q0, ang.cos()), qscale(p, ang.sin()));
    }
    let (q1s, d) = if d0.val() < 0.0 { (qneg(q1), -d0) } else { (q1, d0) };
    let perp = qsub(q1s, qscale(q0, d));
    let s2 = qdot(perp, perp);
    if s2.val() < 1e-18 {
        let one = T::cst(1.0);
        return qnormalize(qadd(qscale(q0, one - u), qscale(q1s, u)));
    }
    let s = s2.sqrt();
    let omega = s.atan2(d);
    let a = (omega * u).cos();
    let b = (omega * u).sin() / s;
    qadd(qscale(q0, a), qscale(perp, b))
}

#[inline]
pub(crate) fn lerp3<T: Real>(a: [T; 3], b: [T; 3], u: T) -> [T; 3] {
    [
        a[0] + (b[0] - a[0]) * u,
        a[1] + (b[1] - a[1]) * u,
        a[2] + (b[2] - a[2]) * u,
    ]
}

// ---------------------------------------------------------------------------
// Pose / Twist
// ---------------------------------------------------------------------------

/// Rigid camera-to-world transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    pub rotation: UnitQuaternion<f64>,
    pub translation: Vector3<f64>,
}

impl Pose {
    /// Builds a pose, canonicalizing the quaternion sign to `w >= 0`.
    pub fn new(rotation: UnitQuaternion<f64>, translation: Vector3<f64>) -> Self {
        Pose {
            rotation: canonicalize(rotation),
            translation,
        }
    }

    pub fn identity() -> Self {
        Pose {
            rotation: UnitQuaternion::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn from_quat_wxyz(q: [f64; 4], t: Vector3<f64>) -> Self {
        let quat = Quaternion::new(q[0], q[1], q[2], q[3]);
        Pose::new(UnitQuaternion::from_quaternion(quat), t)
    }

    /// Quaternion components `[w, x, y, z]` (canonical sign).
    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = canonicalize(self.rotation);
        [q.w, q.i, q.j, q.k]
    }

    /// `self` applied after `rhs`: `(self * rhs)(x) = self(rhs(x))`.
    pub fn compose(&self, rhs: &Pose) -> Pose {
        Pose::new(
            self.rotation * rhs.rotation,
            self.rotation * rhs.translation + self.translation,
        )
    }

    pub fn inverse(&self) -> Pose {
        let rinv = self.rotation.inverse();
        Pose::new(rinv, -(rinv * self.translation))
    }

    /// Camera-frame point to world frame.
    pub fn transform(&self, p_cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * p_cam + self.translation
    }

    /// World point to camera frame.
    pub fn inverse_transform(&self, p_world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.inverse() * (p_world - self.translation)
    }
}

fn canonicalize(q: UnitQuaternion<f64>) -> UnitQuaternion<f64> {
    if q.w < 0.0 {
        UnitQuaternion::new_unchecked(-q.into_inner())
    } else {
        q
    }
}

/// Rigid-body velocity: world-frame angular rate (rad/s, axis-angle rate) and
/// translational rate (m/s).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Twist {
    pub rot: Vector3<f64>,
    pub trans: Vector3<f64>,
}

impl Twist {
    pub fn zero() -> Self {
        Twist {
            rot: Vector3::zeros(),
            trans: Vector3::zeros(),
        }
    }

    pub fn new(rot: Vector3<f64>, trans: Vector3<f64>) -> Self {
        Twist { rot, trans }
    }
}

// ---------------------------------------------------------------------------
// Camera intrinsics
// ---------------------------------------------------------------------------

/// Pinhole intrinsics. Continuous pixel coordinates sample pixel `(ix, iy)`
/// at `(ix + 0.5, iy + 0.5)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CameraIntrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    /// Symmetric pinhole with the given horizontal field of view (radians).
    pub fn from_fov(width: usize, height: usize, fov_x: f64) -> Self {
        let fx = width as f64 / (2.0 * (fov_x / 2.0).tan());
        CameraIntrinsics {
            width,
            height,
            fx,
            fy: fx,
            cx: width as f64 / 2.0,
            cy: height as f64 / 2.0,
        }
    }

    /// Unit ray direction in the camera frame for pixel indices `(ix, iy)`,
    /// sampled at the pixel center. Camera looks down +z.
    pub fn ray_dir(&self, ix: usize, iy: usize) -> Vector3<f64> {
        let x = (ix as f64 + 0.5 - self.cx) / self.fx;
        let y = (iy as f64 + 0.5 - self.cy) / self.fy;
        Vector3::new(x, y, 1.0).normalize()
    }

    /// z-component of the unit ray for `(ix, iy)`; converts distance along the
    /// ray into z-depth.
    pub fn ray_dir_z(&self, ix: usize, iy: usize) -> f64 {
        self.ray_dir(ix, iy).z
    }

    /// Projects a camera-frame point to continuous pixel coordinates.
    /// Caller must ensure `p.z > 0`.
    pub fn project(&self, p: &Vector3<f64>) -> (f64, f64) {
        (
            self.fx * p.x / p.z + self.cx,
            self.fy * p.y / p.z + self.cy,
        )
    }

    pub fn n_pixels(&self) -> usize {
        self.width * self.height
    }
}

// ---------------------------------------------------------------------------
// Exposure window
// ---------------------------------------------------------------------------

/// One frame's shutter interval with a constant-velocity camera motion model.
///
/// `center` is the pose at the temporal midpoint; the poses at the window
/// endpoints are derived as `exp(±0.5 * duration * velocity)` applied to the
/// center (rotation by left multiplication, translation additively). Poses at
/// interior times interpolate the endpoints by Slerp (rotation) and Lerp
/// (translation), which for this parameterization traces the constant-velocity
/// path exactly.
#[derive(Debug, Clone, Copy)]
pub struct ExposureWindow {
    pub frame_index: usize,
    pub t_start: f64,
    pub t_end: f64,
    pub center: Pose,
    pub velocity: Twist,
}

/// Number of scalar parameters a window's fan poses depend on: 3 center
/// rotation tangent + 3 center translation + 3 rotational velocity +
/// 3 translational velocity + 1 log-duration.
pub const WINDOW_PARAM_DIM: usize = 13;

/// Column index of the log-duration parameter in [`ExposureWindow::pose_jacobian`].
pub const WINDOW_PARAM_LOG_DUR: usize = 12;

impl ExposureWindow {
    /// Window centered at `t_mid` with the given duration (seconds).
    pub fn new(
        frame_index: usize,
        t_mid: f64,
        duration: f64,
        center: Pose,
        velocity: Twist,
    ) -> Result<Self, GeometryError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(GeometryError::BadDuration(duration));
        }
        Ok(ExposureWindow {
            frame_index,
            t_start: t_mid - 0.5 * duration,
            t_end: t_mid + 0.5 * duration,
            center,
            velocity,
        })
    }

    pub fn duration(&self) -> f64 {
        self.t_end - self.t_start
    }

    pub fn t_mid(&self) -> f64 {
        0.5 * (self.t_start + self.t_end)
    }

    /// Re-centers the window on the same midpoint with a new duration
    /// (used when the learned exposure time changes).
    pub fn set_duration(&mut self, duration: f64) -> Result<(), GeometryError> {
        if !(duration > 0.0 && duration.is_finite()) {
            return Err(GeometryError::BadDuration(duration));
        }
        let mid = self.t_mid();
        self.t_start = mid - 0.5 * duration;
        self.t_end = mid + 0.5 * duration;
        Ok(())
    }

    /// Pose at interpolation parameter `u` in `[0, 1]` (0 = start, 1 = end).
    pub fn pose_at_u(&self, u: f64) -> Pose {
        let (q, t) = window_pose_generic(
            self.center.quat_wxyz(),
            to3(self.center.translation),
            to3(self.velocity.rot),
            to3(self.velocity.trans),
            self.duration(),
            u,
        );
        Pose::from_quat_wxyz(q, Vector3::new(t[0], t[1], t[2]))
    }

    /// Pose at time `t`, which must lie inside the window (tiny slack for
    /// floating-point endpoints).
    pub fn pose_at(&self, t: f64) -> Result<Pose, GeometryError> {
        let slack = 1e-9 * self.duration().max(1e-30);
        if t < self.t_start - slack || t > self.t_end + slack {
            return Err(GeometryError::OutOfWindow {
                t,
                t_start: self.t_start,
                t_end: self.t_end,
            });
        }
        let u = ((t - self.t_start) / self.duration()).clamp(0.0, 1.0);
        Ok(self.pose_at_u(u))
    }

    pub fn start_pose(&self) -> Pose {
        self.pose_at_u(0.0)
    }

    pub fn end_pose(&self) -> Pose {
        self.pose_at_u(1.0)
    }

    /// Interpolation parameters of the `n_cam` virtual cameras: uniformly
    /// spaced over the window, `[0.5]` (the center) for `n_cam == 1`.
    pub fn fan_us(n_cam: usize) -> Vec<f64> {
        assert!(n_cam >= 1, "n_cam must be >= 1");
        if n_cam == 1 {
            vec![0.5]
        } else {
            (0..n_cam)
                .map(|j| j as f64 / (n_cam - 1) as f64)
                .collect()
        }
    }

    /// Shutter-open times of the `n_cam` virtual cameras.
    pub fn fan_times(&self, n_cam: usize) -> Vec<f64> {
        Self::fan_us(n_cam)
            .iter()
            .map(|u| self.t_start + u * self.duration())
            .collect()
    }

    /// The virtual camera poses spread across the window.
    pub fn virtual_camera_fan(&self, n_cam: usize) -> Vec<Pose> {
        Self::fan_us(n_cam)
            .iter()
            .map(|&u| self.pose_at_u(u))
            .collect()
    }

    /// Exact Jacobian of the pose at parameter `u` with respect to the window
    /// parameters, computed by running the interpolation chain on dual
    /// numbers.
    ///
    /// Returns `(pose, jac)` where `jac[k]` is the 6-vector derivative of the
    /// pose (world-frame rotation tangent at the pose, then translation) with
    /// respect to parameter `k`:
    ///
    /// * 0..3  — center rotation tangent (world frame)
    /// * 3..6  — center translation
    /// * 6..9  — rotational velocity
    /// * 9..12 — translational velocity
    /// * 12    — log duration
    pub fn pose_jacobian(&self, u: f64) -> (Pose, [[f64; 6]; WINDOW_PARAM_DIM]) {
        let pose = self.pose_at_u(u);
        let qv = pose.quat_wxyz();

        let mut jac = [[0.0; 6]; WINDOW_PARAM_DIM];
        for k in 0..WINDOW_PARAM_DIM {
            // Seed direction k and re-run the chain on duals.
            let mut delta = [Dual::c(0.0); WINDOW_PARAM_DIM];
            delta[k] = Dual::new(0.0, 1.0);
            let (q_d, t_d) = window_pose_perturbed(self, &delta, Dual::c(u));
            // Quaternion-component rate -> world-frame tangent rate:
            // eps_dot = 2 * Im(q_dot * conj(q)).
            let qdotv = [q_d[0].dx, q_d[1].dx, q_d[2].dx, q_d[3].dx];
            let qconj = [qv[0], -qv[1], -qv[2], -qv[3]];
            let p = qmul(qdotv, qconj);
            jac[k] = [
                2.0 * p[1],
                2.0 * p[2],
                2.0 * p[3],
                t_d[0].dx,
                t_d[1].dx,
                t_d[2].dx,
            ];
        }
        (pose, jac)
    }
}

#[inline]
fn to3(v: Vector3<f64>) -> [f64; 3] {
    [v.x, v.y, v.z]
}

/// Evaluate a window's pose at parameter `u` under a 13-dimensional
/// perturbation `delta` of its parameters (all-zero deltas reproduce the
/// window exactly). Columns match [`ExposureWindow::pose_jacobian`]; the
/// duration column perturbs multiplicatively (`duration * exp(delta)`), so a
/// unit dual seed yields the log-duration derivative. Used for every
/// derivative that flows through the pose-interpolation chain.
pub(crate) fn window_pose_perturbed<T: Real>(
    win: &ExposureWindow,
    delta: &[T; WINDOW_PARAM_DIM],
    u: T,
) -> ([T; 4], [T; 3]) {
    let qc = win.center.quat_wxyz().map(T::cst);
    let tc = to3(win.center.translation);
    let w = to3(win.velocity.rot);
    let v = to3(win.velocity.trans);
    let q_c = qmul(qexp([delta[0], delta[1], delta[2]]), qc);
    let t_c = [
        T::cst(tc[0]) + delta[3],
        T::cst(tc[1]) + delta[4],
        T::cst(tc[2]) + delta[5],
    ];
    let w_d = [
        T::cst(w[0]) + delta[6],
        T::cst(w[1]) + delta[7],
        T::cst(w[2]) + delta[8],
    ];
    let v_d = [
        T::cst(v[0]) + delta[9],
        T::cst(v[1]) + delta[10],
        T::cst(v[2]) + delta[11],
    ];
    let dur = T::cst(win.duration()) * delta[WINDOW_PARAM_LOG_DUR].exp();
    window_pose_generic(q_c, t_c, w_d, v_d, dur, u)
}

/// The shared interpolation chain: derive start/end poses from
/// center + velocity + duration, then Slerp/Lerp at parameter `u`.
fn window_pose_generic<T: Real>(
    q_c: [T; 4],
    t_c: [T; 3],
    vel_rot: [T; 3],
    vel_trans: [T; 3],
    duration: T,
    u: T,
) -> ([T; 4], [T; 3]) {
    let half = duration * T::cst(0.5);
    let dr = [vel_rot[0] * half, vel_rot[1] * half, vel_rot[2] * half];
    let dt = [vel_trans[0] * half, vel_trans[1] * half, vel_trans[2] * half];
    let q_s = qmul(qexp([-dr[0], -dr[1], -dr[2]]), q_c);
    let q_e = qmul(qexp(dr), q_c);
    let t_s = [t_c[0] - dt[0], t_c[1] - dt[1], t_c[2] - dt[2]];
    let t_e = [t_c[0] + dt[0], t_c[1] + dt[1], t_c[2] + dt[2]];
    (slerp_q(q_s, q_e, u), lerp3(t_s, t_e, u))
}

/// Constant-velocity initialization of the next frame's window: the next
/// center extrapolates the last inter-frame motion, and the velocity is sized
/// so the window's start-to-end travel is `init_separation` of that motion.
pub fn extrapolate_next_window(
    prev: &ExposureWindow,
    curr: &ExposureWindow,
    frame_index: usize,
    t_mid: f64,
    duration: f64,
    init_separation: f64,
) -> Result<ExposureWindow, GeometryError> {
    // World-frame delta satisfying q_curr = dq * q_prev.
    let dq = curr.center.rotation * prev.center.rotation.inverse();
    let dp = curr.center.translation - prev.center.translation;
    let next_center = Pose::new(dq * curr.center.rotation, curr.center.translation + dp);
    let rotvec = dq.scaled_axis();
    let velocity = Twist::new(
        rotvec * (init_separation / duration),
        dp * (init_separation / duration),
    );
    ExposureWindow::new(frame_index, t_mid, duration, next_center, velocity)
}

// ---------------------------------------------------------------------------
// Trajectory I/O: "timestamp tx ty tz qx qy qz qw" text lines
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrajectoryPoint {
    pub t: f64,
    pub pose: Pose,
}

/// Parses a trajectory file. Lines starting with `#` and blank lines are
/// skipped; every other line must hold 8 whitespace-separated numbers
/// `timestamp tx ty tz qx qy qz qw`.
pub fn read_trajectory(path: &Path) -> Result<Vec<TrajectoryPoint>, GeometryError> {
    parse_trajectory(&std::fs::read_to_string(path)?)
}

pub fn parse_trajectory(text: &str) -> Result<Vec<TrajectoryPoint>, GeometryError> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split_whitespace().collect();
        if fields.len() != 8 {
            return Err(GeometryError::Parse {
                line: i + 1,
                msg: format!("expected 8 fields, got {}", fields.len()),
            });
        }
        let mut v = [0.0f64; 8];
        for (j, f) in fields.iter().enumerate() {
            v[j] = f.parse().map_err(|e| GeometryError::Parse {
                line: i + 1,
                msg: format!("bad number {f:?}: {e}"),
            })?;
        }
        let q = Quaternion::new(v[7], v[4], v[5], v[6]); // qw, qx, qy, qz
        let norm = q.norm();
        if !(norm.is_finite() && norm > 1e-6) {
            return Err(GeometryError::Parse {
                line: i + 1,
                msg: "quaternion has (near-)zero norm".to_string(),
            });
        }
        out.push(TrajectoryPoint {
            t: v[0],
            pose: Pose::new(
                UnitQuaternion::from_quaternion(q),
                Vector3::new(v[1], v[2], v[3]),
            ),
        });
    }
    Ok(out)
}

pub fn format_trajectory(points: &[TrajectoryPoint]) -> String {
    let mut s = String::new();
    s.push_str("# timestamp tx ty tz qx qy qz qw\n");
    for p in points {
        let q = p.pose.quat_wxyz();
        let t = p.pose.translation;
        writeln!(
            s,
            "{:.6} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9} {:.9}",
            p.t, t.x, t.y, t.z, q[1], q[2], q[3], q[0]
        )
        .expect("string write cannot fail");
    }
    s
}

pub fn write_trajectory(path: &Path, points: &[TrajectoryPoint]) -> Result<(), GeometryError> {
    std::fs::write(path, format_trajectory(points))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::{assert_abs_diff_eq, assert_relative_eq};
    use proptest::prelude::*;
    use rand::Rng;
    use std::f64::consts::PI;

    fn quat(axis: Vector3<f64>, angle: f64) -> UnitQuaternion<f64> {
        UnitQuaternion::from_axis_angle(&nalgebra::Unit::new_normalize(axis), angle)
    }

    fn angle_between(a: &UnitQuaternion<f64>, b: &UnitQuaternion<f64>) -> f64 {
        (a.inverse() * b).angle()
    }

    #[test]
    fn slerp_midpoint_halves_angle() {
        let q0 = [1.0, 0.0, 0.0, 0.0];
        let q1v = quat(Vector3::z(), PI / 2.0);
        let q1 = [q1v.w, q1v.i, q1v.j, q1v.k];
        let m = slerp_q(q0, q1, 0.5);
        let mq = Pose::from_quat_wxyz(m, Vector3::zeros()).rotation;
        assert_relative_eq!(mq.angle(), PI / 4.0, epsilon = 1e-12);
        assert_relative_eq!(mq.axis().unwrap().z, 1.0, epsilon = 1e-12);
    }

    #[test]
    fn slerp_one_third_of_120_degrees() {
        let axis = Vector3::new(1.0, 1.0, 1.0).normalize();
        let q1v = quat(axis, 2.0 * PI / 3.0);
        let q = slerp_q([1.0, 0.0, 0.0, 0.0], [q1v.w, q1v.i, q1v.j, q1v.k], 1.0 / 3.0);
        let r = Pose::from_quat_wxyz(q, Vector3::zeros()).rotation;
        assert_relative_eq!(r.angle(), 2.0 * PI / 9.0, epsilon = 1e-12); // 40 degrees
        assert_relative_eq!((r.axis().unwrap().into_inner() - axis).norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn slerp_endpoints_exact() {
        let q0v = quat(Vector3::new(0.3, -0.2, 0.9), 0.7);
        let q1v = quat(Vector3::new(-0.5, 0.1, 0.2), 1.9);
        let q0 = [q0v.w, q0v.i, q0v.j, q0v.k];
        let q1 = [q1v.w, q1v.i, q1v.j, q1v.k];
        let s0 = slerp_q(q0, q1, 0.0);
        let s1 = slerp_q(q0, q1, 1.0);
        for i in 0..4 {
            assert_abs_diff_eq!(s0[i], q0[i], epsilon = 1e-15);
            assert_abs_diff_eq!(s1[i], q1[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn slerp_takes_shorter_arc_on_sign_flip() {
        let q0v = quat(Vector3::z(), 0.2);
        let q1v = quat(Vector3::z(), 0.4);
        let q0 = [q0v.w, q0v.i, q0v.j, q0v.k];
        let q1 = [-q1v.w, -q1v.i, -q1v.j, -q1v.k]; // same rotation, opposite sign
        let m = slerp_q(q0, q1, 0.5);
        let r = Pose::from_quat_wxyz(m, Vector3::zeros()).rotation;
        assert_relative_eq!(r.angle(), 0.3, epsilon = 1e-12);
    }

    #[test]
    fn slerp_antipodal_fallback_is_deterministic_and_unit() {
        // 180-degree rotations about +x and -x: identical rotation, dot = -1.
        let q0 = [0.0, 1.0, 0.0, 0.0];
        let q1 = [0.0, -1.0, 0.0, 0.0];
        let a = slerp_q(q0, q1, 0.3);
        let b = slerp_q(q0, q1, 0.3);
        assert_eq!(a, b);
        let n: f64 = a.iter().map(|x| x * x).sum();
        assert_relative_eq!(n, 1.0, epsilon = 1e-12);
        // Endpoints still land on the inputs.
        let e = slerp_q(q0, q1, 1.0);
        for i in 0..4 {
            assert_abs_diff_eq!(e[i], q1[i], epsilon = 1e-12);
        }
    }

    fn test_window() -> ExposureWindow {
        let center = Pose::new(
            quat(Vector3::new(0.2, -0.7, 0.4), 0.8),
            Vector3::new(1.0, -2.0, 0.5),
        );
        let velocity = Twist::new(Vector3::new(0.6, 0.2, -0.4), Vector3::new(0.5, 1.2, -0.3));
        ExposureWindow::new(3, 1.0, 0.04, center, velocity).unwrap()
    }

    #[test]
    fn pose_at_center_time_is_center_pose() {
        let w = test_window();
        let p = w.pose_at(w.t_mid()).unwrap();
        assert_relative_eq!(
            (p.translation - w.center.translation).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert!(angle_between(&p.rotation, &w.center.rotation) < 1e-12);
    }

    #[test]
    fn zero_velocity_window_is_constant() {
        let center = test_window().center;
        let w = ExposureWindow::new(0, 0.0, 0.02, center, Twist::zero()).unwrap();
        for &u in &[0.0, 0.25, 0.6, 1.0] {
            let p = w.pose_at_u(u);
            assert_relative_eq!((p.translation - center.translation).norm(), 0.0, epsilon = 1e-12);
            assert!(angle_between(&p.rotation, &center.rotation) < 1e-12);
        }
    }

    #[test]
    fn pose_at_outside_window_errors() {
        let w = test_window();
        assert!(matches!(
            w.pose_at(w.t_end + 0.01),
            Err(GeometryError::OutOfWindow { .. })
        ));
        assert!(w.pose_at(w.t_start).is_ok());
        assert!(w.pose_at(w.t_end).is_ok());
    }

    #[test]
    fn bad_duration_rejected() {
        let c = Pose::identity();
        assert!(matches!(
            ExposureWindow::new(0, 0.0, 0.0, c, Twist::zero()),
            Err(GeometryError::BadDuration(_))
        ));
        assert!(matches!(
            ExposureWindow::new(0, 0.0, -1.0, c, Twist::zero()),
            Err(GeometryError::BadDuration(_))
        ));
    }

    #[test]
    fn endpoints_center_velocity_round_trip() {
        // Slerp midpoint of the derived endpoints recovers the center, and the
        // endpoint delta recovers velocity * duration.
        let w = test_window();
        let (s, e) = (w.start_pose(), w.end_pose());
        let mid_q = slerp_q(s.quat_wxyz(), e.quat_wxyz(), 0.5);
        let mid = Pose::from_quat_wxyz(mid_q, (s.translation + e.translation) / 2.0);
        assert!(angle_between(&mid.rotation, &w.center.rotation) < 1e-9);
        assert_relative_eq!(
            (mid.translation - w.center.translation).norm(),
            0.0,
            epsilon = 1e-9
        );
        let dq = e.rotation * s.rotation.inverse();
        let recovered_rate = dq.scaled_axis() / w.duration();
        assert_relative_eq!((recovered_rate - w.velocity.rot).norm(), 0.0, epsilon = 1e-9);
        let recovered_v = (e.translation - s.translation) / w.duration();
        assert_relative_eq!((recovered_v - w.velocity.trans).norm(), 0.0, epsilon = 1e-9);
    }

    #[test]
    fn fan_endpoints_and_center() {
        let w = test_window();
        let fan = w.virtual_camera_fan(5);
        assert_eq!(fan.len(), 5);
        assert!(angle_between(&fan[0].rotation, &w.start_pose().rotation) < 1e-12);
        assert!(angle_between(&fan[4].rotation, &w.end_pose().rotation) < 1e-12);
        assert!(angle_between(&fan[2].rotation, &w.center.rotation) < 1e-12);

        let fan2 = w.virtual_camera_fan(2);
        assert_relative_eq!(
            (fan2[0].translation - w.start_pose().translation).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            (fan2[1].translation - w.end_pose().translation).norm(),
            0.0,
            epsilon = 1e-12
        );

        let fan1 = w.virtual_camera_fan(1);
        assert_eq!(fan1.len(), 1);
        assert!(angle_between(&fan1[0].rotation, &w.center.rotation) < 1e-12);
    }

    #[test]
    fn fan_lies_on_pose_at_curve() {
        let w = test_window();
        let n = 7;
        let fan = w.virtual_camera_fan(n);
        for (t, p) in w.fan_times(n).iter().zip(&fan) {
            let q = w.pose_at(*t).unwrap();
            assert!(angle_between(&q.rotation, &p.rotation) < 1e-12);
            assert_relative_eq!((q.translation - p.translation).norm(), 0.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn extrapolation_doubles_translation() {
        let mk = |x: f64, idx: usize| {
            ExposureWindow::new(idx, idx as f64, 0.02, Pose::new(
                UnitQuaternion::identity(),
                Vector3::new(x, 0.0, 0.0),
            ), Twist::zero())
            .unwrap()
        };
        let prev = mk(0.0, 0);
        let curr = mk(1.0, 1);
        let next = extrapolate_next_window(&prev, &curr, 2, 2.0, 0.02, 0.1).unwrap();
        assert_relative_eq!(next.center.translation.x, 2.0, epsilon = 1e-12);
        // Start/end separation = init_separation * inter-frame motion.
        let sep = (next.end_pose().translation - next.start_pose().translation).norm();
        assert_relative_eq!(sep, 0.1, epsilon = 1e-12);
    }

    #[test]
    fn extrapolation_static_camera() {
        let w = test_window();
        let next = extrapolate_next_window(&w, &w, 4, 2.0, 0.04, 0.1).unwrap();
        assert!(angle_between(&next.center.rotation, &w.center.rotation) < 1e-12);
        assert_relative_eq!(
            (next.center.translation - w.center.translation).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(next.velocity.rot.norm(), 0.0, epsilon = 1e-12);
        assert_relative_eq!(next.velocity.trans.norm(), 0.0, epsilon = 1e-12);
    }

    #[test]
    fn pose_jacobian_matches_finite_differences() {
        // Independent oracle: rebuild the window with each parameter nudged
        // and difference the resulting poses.
        let w = test_window();
        let h = 1e-6;
        for &u in &[0.0, 0.3, 0.5, 1.0] {
            let (pose, jac) = w.pose_jacobian(u);
            for k in 0..WINDOW_PARAM_DIM {
                let perturbed = |sign: f64| -> Pose {
                    let mut center = w.center;
                    let mut vel = w.velocity;
                    let mut dur = w.duration();
                    match k {
                        0..=2 => {
                            let mut axis = Vector3::zeros();
                            axis[k] = sign * h;
                            center = Pose::new(
                                UnitQuaternion::from_scaled_axis(axis) * center.rotation,
                                center.translation,
                            );
                        }
                        3..=5 => center.translation[k - 3] += sign * h,
                        6..=8 => vel.rot[k - 6] += sign * h,
                        9..=11 => vel.trans[k - 9] += sign * h,
                        _ => dur *= (sign * h).exp(),
                    }
                    ExposureWindow::new(w.frame_index, w.t_mid(), dur, center, vel)
                        .unwrap()
                        .pose_at_u(u)
                };
                let (pp, pm) = (perturbed(1.0), perturbed(-1.0));
                // Rotation tangent by finite differences of q, mapped through
                // eps_dot = 2 * Im(q_dot * conj(q)).
                let (qp, qm) = (pp.quat_wxyz(), pm.quat_wxyz());
                let qd = [
                    (qp[0] - qm[0]) / (2.0 * h),
                    (qp[1] - qm[1]) / (2.0 * h),
                    (qp[2] - qm[2]) / (2.0 * h),
                    (qp[3] - qm[3]) / (2.0 * h),
                ];
                let qv = pose.quat_wxyz();
                let p = qmul(qd, [qv[0], -qv[1], -qv[2], -qv[3]]);
                let fd = [
                    2.0 * p[1],
                    2.0 * p[2],
                    2.0 * p[3],
                    (pp.translation.x - pm.translation.x) / (2.0 * h),
                    (pp.translation.y - pm.translation.y) / (2.0 * h),
                    (pp.translation.z - pm.translation.z) / (2.0 * h),
                ];
                for i in 0..6 {
                    assert_abs_diff_eq!(jac[k][i], fd[i], epsilon = 1e-6);
                }
            }
        }
    }

    #[test]
    fn trajectory_round_trip_with_comments() {
        let pts = vec![
            TrajectoryPoint {
                t: 0.0,
                pose: Pose::identity(),
            },
            TrajectoryPoint {
                t: 1.0 / 30.0,
                pose: Pose::new(
                    quat(Vector3::new(0.1, 0.9, -0.2), 0.6),
                    Vector3::new(0.25, -1.5, 3.0),
                ),
            },
        ];
        let text = format!("# comment line\n\n{}", format_trajectory(&pts));
        let parsed = parse_trajectory(&text).unwrap();
        assert_eq!(parsed.len(), pts.len());
        for (a, b) in parsed.iter().zip(&pts) {
            assert_relative_eq!(a.t, b.t, epsilon = 1e-6);
            assert_relative_eq!(
                (a.pose.translation - b.pose.translation).norm(),
                0.0,
                epsilon = 1e-8
            );
            assert!(angle_between(&a.pose.rotation, &b.pose.rotation) < 1e-8);
        }
    }

    #[test]
    fn trajectory_parse_errors_carry_line_numbers() {
        let err = parse_trajectory("# ok\n1.0 0 0 0 0 0 0\n").unwrap_err();
        match err {
            GeometryError::Parse { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected error {other:?}"),
        }
        let err = parse_trajectory("0 0 0 0 x 0 0 1").unwrap_err();
        assert!(matches!(err, GeometryError::Parse { line: 1, .. }));
    }

    #[test]
    fn compose_inverse_is_identity() {
        let mut rng = crate::seedstream::stream(11, "geom/test/compose");
        for _ in 0..50 {
            let p = Pose::new(
                quat(
                    Vector3::new(rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5, rng.gen::<f64>() - 0.5),
                    rng.gen::<f64>() * 3.0,
                ),
                Vector3::new(rng.gen(), rng.gen(), rng.gen()),
            );
            let id = p.compose(&p.inverse());
            assert!(id.rotation.angle() < 1e-12);
            assert!(id.translation.norm() < 1e-12);
            // Canonical sign after every construction.
            assert!(p.quat_wxyz()[0] >= 0.0);
        }
    }

    #[test]
    fn intrinsics_project_ray_round_trip() {
        let intr = CameraIntrinsics::from_fov(64, 48, 1.0);
        for &(ix, iy) in &[(0usize, 0usize), (31, 20), (63, 47)] {
            let d = intr.ray_dir(ix, iy);
            let p = d * 2.5; // any point along the ray
            let (u, v) = intr.project(&p);
            assert_relative_eq!(u, ix as f64 + 0.5, epsilon = 1e-10);
            assert_relative_eq!(v, iy as f64 + 0.5, epsilon = 1e-10);
        }
    }

    proptest! {
        #[test]
        fn slerp_output_is_unit(ax in -1.0f64..1.0, ay in -1.0f64..1.0, az in -1.0f64..1.0,
                                bx in -1.0f64..1.0, by in -1.0f64..1.0, bz in -1.0f64..1.0,
                                aa in 0.01f64..3.0, ba in 0.01f64..3.0, u in 0.0f64..1.0) {
            prop_assume!(Vector3::new(ax, ay, az).norm() > 1e-3);
            prop_assume!(Vector3::new(bx, by, bz).norm() > 1e-3);
            let q0v = quat(Vector3::new(ax, ay, az), aa);
            let q1v = quat(Vector3::new(bx, by, bz), ba);
            let s = slerp_q([q0v.w, q0v.i, q0v.j, q0v.k], [q1v.w, q1v.i, q1v.j, q1v.k], u);
            let n: f64 = s.iter().map(|x| x * x).sum();
            prop_assert!((n - 1.0).abs() < 1e-9);
        }

        #[test]
        fn window_round_trip_property(
            wx in -2.0f64..2.0, wy in -2.0f64..2.0, wz in -2.0f64..2.0,
            vx in -3.0f64..3.0, vy in -3.0f64..3.0, vz in -3.0f64..3.0,
            dur in 0.001f64..0.12) {
            let center = Pose::new(quat(Vector3::new(0.3, 0.4, -0.2), 1.1), Vector3::new(0.4, 0.1, -2.0));
            let w = ExposureWindow::new(0, 0.5, dur, center, Twist::new(
                Vector3::new(wx, wy, wz), Vector3::new(vx, vy, vz))).unwrap();
            let (s, e) = (w.start_pose(), w.end_pose());
            let mid_q = slerp_q(s.quat_wxyz(), e.quat_wxyz(), 0.5);
            let mid = Pose::from_quat_wxyz(mid_q, Vector3::zeros());
            prop_assert!(angle_between(&mid.rotation, &center.rotation) < 1e-9);
            let tm = (s.translation + e.translation) / 2.0;
            prop_assert!((tm - center.translation).norm() < 1e-9);
        }
    }
}

//! The three loss terms fitted jointly: photometric, depth, and trajectory
//! smoothness, plus the per-step CSV log format.
//!
//! Photometric: mean absolute error between modelled and observed LDR values
//! over the sampled pixel-channels.
//!
//! Depth: each frame renders one depth per virtual camera; per pixel the
//! camera whose depth best explains the observation is selected (ties prefer
//! the camera nearest the window center, then the lowest index), and the
//! mean absolute error of the selected depths is penalized. The selection is
//! made once per optimization step and treated as constant by the backward
//! pass. A pixel participates only if the sensor depth is valid and the
//! selected rendering is solid (opacity at least 0.5).
//!
//! Trajectory: consecutive exposure windows should look like one smooth
//! motion. Interpolating the two window centers by `a * dt` (from the
//! earlier center) predicts where the earlier window should end, and by
//! `1 - a * dt` where the later window should start; squared pose error
//! against both predictions is penalized. With `a = fps / 2` and genuinely
//! constant velocity the prediction is exact and the loss vanishes. `a` is
//! optimized in log space alongside the poses.

use std::io::Write;
use std::path::Path;

use crate::geometry::{
    lerp3, slerp_q, window_pose_perturbed, ExposureWindow, WINDOW_PARAM_DIM,
};
use crate::real::{Dual, Real};

/// Opacity below which a rendered depth is considered unreliable.
pub const DEPTH_OPACITY_MIN: f64 = 0.5;

/// Mean absolute error and its gradient with respect to the rendered values.
/// Entries are pixel-aligned; `None` observations are excluded from the mean.
pub fn image_loss(
    rendered: &[[f64; 3]],
    observed: &[[f64; 3]],
    d_rendered: &mut [[f64; 3]],
) -> f64 {
    assert_eq!(rendered.len(), observed.len());
    assert_eq!(rendered.len(), d_rendered.len());
    let n = (3 * rendered.len()) as f64;
    if rendered.is_empty() {
        return 0.0;
    }
    let mut loss = 0.0;
    for i in 0..rendered.len() {
        for ch in 0..3 {
            let diff = rendered[i][ch] - observed[i][ch];
            loss += diff.abs();
            d_rendered[i][ch] = if diff > 0.0 {
                1.0 / n
            } else if diff < 0.0 {
                -1.0 / n
            } else {
                0.0
            };
        }
    }
    loss / n
}

/// Per-pixel virtual-camera choice for the depth loss; `-1` marks pixels
/// excluded from the term.
#[derive(Debug, Clone)]
pub struct DepthSelection {
    pub cam: Vec<i32>,
}

/// Choose, per pixel, the virtual camera whose rendered depth best matches
/// the observation. `depths[j]` / `opacities[j]` hold virtual camera `j`'s
/// renderings for the same pixel list; `observed[i] <= 0` marks invalid
/// sensor depth.
pub fn select_depth_cams(
    depths: &[Vec<f64>],
    opacities: &[Vec<f64>],
    observed: &[f64],
) -> DepthSelection {
    let n_cam = depths.len();
    assert!(n_cam >= 1);
    let n_px = observed.len();
    let center = (n_cam - 1) / 2;
    let mut cam = vec![-1i32; n_px];
    for i in 0..n_px {
        if observed[i] <= 0.0 {
            continue;
        }
        let mut best: Option<(f64, usize, usize)> = None; // (err, |j-center|, j)
        for j in 0..n_cam {
            if opacities[j][i] < DEPTH_OPACITY_MIN || !depths[j][i].is_finite() {
                continue;
            }
            let key = (
                (depths[j][i] - observed[i]).abs(),
                j.abs_diff(center),
                j,
            );
            let better = match &best {
                None => true,
                Some(b) => (key.0, key.1, key.2) < *b,
            };
            if better {
                best = Some(key);
            }
        }
        if let Some((_, _, j)) = best {
            cam[i] = j as i32;
        }
    }
    DepthSelection { cam }
}

/// Mean absolute selected-depth error; writes `d loss / d depth` for every
/// virtual camera (zero except at the selected one) and returns the loss.
pub fn depth_loss(
    selection: &DepthSelection,
    depths: &[Vec<f64>],
    observed: &[f64],
    d_depths: &mut [Vec<f64>],
) -> f64 {
    let n_valid = selection.cam.iter().filter(|&&c| c >= 0).count();
    for dd in d_depths.iter_mut() {
        dd.iter_mut().for_each(|g| *g = 0.0);
    }
    if n_valid == 0 {
        return 0.0;
    }
    let scale = 1.0 / n_valid as f64;
    let mut loss = 0.0;
    for (i, &c) in selection.cam.iter().enumerate() {
        if c < 0 {
            continue;
        }
        let j = c as usize;
        let diff = depths[j][i] - observed[i];
        loss += diff.abs();
        d_depths[j][i] = if diff > 0.0 {
            scale
        } else if diff < 0.0 {
            -scale
        } else {
            0.0
        };
    }
    loss * scale
}

/// Parameters of one consecutive-window smoothness term: 13 for each window
/// plus the log of the interpolation rate `a`.
pub const TRAJ_PAIR_DIM: usize = 2 * WINDOW_PARAM_DIM + 1;

/// Smoothness penalty for one pair of consecutive windows. The rate `a`
/// (passed in log space) has units 1/s, so `a * duration` is already the
/// interpolation fraction between the two centers.
pub fn traj_pair_loss(prev: &ExposureWindow, curr: &ExposureWindow, log_a: f64) -> f64 {
    let zeros = [0.0f64; WINDOW_PARAM_DIM];
    pair_term(prev, curr, &zeros, &zeros, log_a)
}

/// Loss plus its gradient over `[prev 13, curr 13, log_a]`.
pub fn traj_pair_loss_grad(
    prev: &ExposureWindow,
    curr: &ExposureWindow,
    log_a: f64,
) -> (f64, [f64; TRAJ_PAIR_DIM]) {
    let mut grad = [0.0f64; TRAJ_PAIR_DIM];
    let mut value = 0.0;
    for k in 0..TRAJ_PAIR_DIM {
        let mut d_prev = [Dual::c(0.0); WINDOW_PARAM_DIM];
        let mut d_curr = [Dual::c(0.0); WINDOW_PARAM_DIM];
        let mut log_a_d = Dual::c(log_a);
        if k < WINDOW_PARAM_DIM {
            d_prev[k] = Dual::new(0.0, 1.0);
        } else if k < 2 * WINDOW_PARAM_DIM {
            d_curr[k - WINDOW_PARAM_DIM] = Dual::new(0.0, 1.0);
        } else {
            log_a_d.dx = 1.0;
        }
        let out = pair_term(prev, curr, &d_prev, &d_curr, log_a_d);
        grad[k] = out.dx;
        value = out.x;
    }
    (value, grad)
}

fn pair_term<T: Real>(
    prev: &ExposureWindow,
    curr: &ExposureWindow,
    d_prev: &[T; WINDOW_PARAM_DIM],
    d_curr: &[T; WINDOW_PARAM_DIM],
    log_a: T,
) -> T {
    // Window centers (u = 0.5 reproduces the center exactly) and the two
    // poses being constrained.
    let (q_pc, t_pc) = window_pose_perturbed(prev, d_prev, T::cst(0.5));
    let (q_cc, t_cc) = window_pose_perturbed(curr, d_curr, T::cst(0.5));
    let (q_pe, t_pe) = window_pose_perturbed(prev, d_prev, T::cst(1.0));
    let (q_cs, t_cs) = window_pose_perturbed(curr, d_curr, T::cst(0.0));

    let a = log_a.exp();
    let dt_prev = T::cst(prev.duration()) * d_prev[WINDOW_PARAM_DIM - 1].exp();
    let dt_curr = T::cst(curr.duration()) * d_curr[WINDOW_PARAM_DIM - 1].exp();
    let u_end = a * dt_prev;
    let u_start = T::cst(1.0) - a * dt_curr;

    let mut loss = pose_err2(
        q_pe,
        t_pe,
        slerp_q(q_pc, q_cc, u_end),
        lerp3(t_pc, t_cc, u_end),
    );
    loss = loss
        + pose_err2(
            q_cs,
            t_cs,
            slerp_q(q_pc, q_cc, u_start),
            lerp3(t_pc, t_cc, u_start),
        );
    loss
}

/// Squared pose distance: translation L2 plus sign-aligned quaternion
/// component L2.
fn pose_err2<T: Real>(q: [T; 4], t: [T; 3], q_ref: [T; 4], t_ref: [T; 3]) -> T {
    let dot = q[0].val() * q_ref[0].val()
        + q[1].val() * q_ref[1].val()
        + q[2].val() * q_ref[2].val()
        + q[3].val() * q_ref[3].val();
    let s = if dot < 0.0 { T::cst(-1.0) } else { T::cst(1.0) };
    let mut e = T::cst(0.0);
    for i in 0..4 {
        let d = q[i] - q_ref[i] * s;
        e = e + d * d;
    }
    for i in 0..3 {
        let d = t[i] - t_ref[i];
        e = e + d * d;
    }
    e
}

/// Total trajectory loss over a window sequence (first frame contributes
/// nothing).
pub fn trajectory_loss(windows: &[ExposureWindow], log_a: f64) -> f64 {
    windows
        .windows(2)
        .map(|w| traj_pair_loss(&w[0], &w[1], log_a))
        .sum()
}

/// One logged optimization step.
#[derive(Debug, Clone)]
pub struct LossRow {
    pub step: usize,
    pub frame: usize,
    pub l_img: f64,
    pub l_depth: f64,
    pub l_traj: f64,
    pub total: f64,
    pub a: f64,
}

pub fn write_losses_csv(path: &Path, rows: &[LossRow]) -> std::io::Result<()> {
    let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(w, "step,frame,L_img,L_depth,L_traj,total,a")?;
    for r in rows {
        writeln!(
            w,
            "{},{},{:.9},{:.9},{:.9},{:.9},{:.6}",
            r.step, r.frame, r.l_img, r.l_depth, r.l_traj, r.total, r.a
        )?;
    }
    w.flush()
}

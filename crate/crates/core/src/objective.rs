//! Composition of the forward model into a scalar objective, and its exact
//! gradient with respect to every model parameter.
//!
//! Per frame: render the map at each virtual camera of the exposure window,
//! average the radiance, tone-map to LDR, and compare against the observed
//! frame (photometric L1). Depth supervision compares observed depth to the
//! best-matching virtual camera's rendered depth. A smoothness term couples
//! consecutive windows. The exposure duration influences the objective along
//! two routes — brightness (through the tone mapper) and blur extent (through
//! the fan geometry) — and both gradient contributions land on the same
//! `log_dt` entry.
//!
//! Depth-camera selection is discrete; it is computed once per evaluation and
//! frozen, which [`loss_frozen`] exposes so finite-difference probes see a
//! fixed selection.

use crate::geometry::{ExposureWindow, Pose, WINDOW_PARAM_DIM};
use crate::img::{DepthImage, LdrImage, PixelSet};
use crate::losses::{
    depth_loss, image_loss, select_depth_cams, traj_pair_loss, traj_pair_loss_grad,
    DepthSelection,
};
use crate::map::{PixelUpstream, RenderedPixel};
use crate::model::{Gradients, Model, WINDOW_OPT_DIM};

/// One observed frame: the blurred LDR image and its (possibly sparse) depth.
#[derive(Debug, Clone, Copy)]
pub struct FrameObservation<'a> {
    pub frame: usize,
    pub ldr: &'a LdrImage,
    pub depth: &'a DepthImage,
}

/// Loss weighting and fan resolution for one objective evaluation.
#[derive(Debug, Clone)]
pub struct ObjectiveParams {
    pub n_cam: usize,
    pub lambda_image: f64,
    pub lambda_depth: f64,
    pub lambda_traj: f64,
    /// Consecutive-window pairs `(prev, curr)` contributing the smoothness
    /// term. Callers choose the scope (tracked frame only, keyframe set, ...).
    pub traj_pairs: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    /// Unweighted photometric term.
    pub image: f64,
    /// Unweighted depth term.
    pub depth: f64,
    /// Unweighted trajectory-smoothness term.
    pub traj: f64,
    /// Weighted sum; the quantity actually optimized.
    pub total: f64,
}

/// Discrete choices frozen during one evaluation (per-frame depth-camera
/// selections, aligned with the `frames` slice they were computed from).
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub selections: Vec<DepthSelection>,
}

fn dot6(a: &[f64; 6], b: &[f64; 6]) -> f64 {
    (0..6).map(|i| a[i] * b[i]).sum()
}

fn gather_observed(
    obs: &FrameObservation,
    px: &PixelSet,
) -> (Vec<[f64; 3]>, Vec<f64>) {
    let colors = px.indices.iter().map(|&i| obs.ldr.data[i as usize]).collect();
    let depths = px.indices.iter().map(|&i| obs.depth.data[i as usize]).collect();
    (colors, depths)
}

/// Forward+backward pass. Accumulates weighted gradients into `grads` (which
/// the caller zeroes) and returns the loss together with the frozen discrete
/// choices of this evaluation.
pub fn loss_and_grads(
    model: &Model,
    frames: &[FrameObservation],
    pixels: &[PixelSet],
    params: &ObjectiveParams,
    grads: &mut Gradients,
) -> (LossBreakdown, PreparedStep) {
    assert_eq!(frames.len(), pixels.len(), "pixel sets not frame-aligned");
    let intr = &model.intrinsics;
    let n_cam = params.n_cam;
    let inv_n = 1.0 / n_cam as f64;
    let us = ExposureWindow::fan_us(n_cam);

    let mut bd = LossBreakdown::default();
    let mut selections = Vec::with_capacity(frames.len());

    for (obs, px) in frames.iter().zip(pixels) {
        let frame = obs.frame;
        let n_px = px.len();
        let (obs_c, obs_d) = gather_observed(obs, px);

        // Virtual-camera fan with pose Jacobians, rendered per camera.
        let fan: Vec<(Pose, [[f64; 6]; WINDOW_PARAM_DIM])> =
            us.iter().map(|&u| model.windows[frame].pose_jacobian(u)).collect();
        let rendered: Vec<Vec<RenderedPixel>> =
            fan.iter().map(|(p, _)| model.map.render_pixels(p, intr, px)).collect();

        let mean = crate::model::fan_mean(&rendered, n_px);
        let pred: Vec<[f64; 3]> = mean.iter().map(|&m| model.tone.apply(frame, m)).collect();

        let mut d_pred = vec![[0.0f64; 3]; n_px];
        let l_img = image_loss(&pred, &obs_c, &mut d_pred);

        let depths: Vec<Vec<f64>> =
            rendered.iter().map(|r| r.iter().map(|p| p.depth).collect()).collect();
        let opac: Vec<Vec<f64>> =
            rendered.iter().map(|r| r.iter().map(|p| p.opacity).collect()).collect();
        let sel = select_depth_cams(&depths, &opac, &obs_d);
        let mut d_depths: Vec<Vec<f64>> = depths.iter().map(|d| vec![0.0; d.len()]).collect();
        let l_depth = depth_loss(&sel, &depths, &obs_d, &mut d_depths);

        bd.image += l_img;
        bd.depth += l_depth;

        // Backward. Photometric upstream flows through the tone mapper to the
        // per-camera mean; depth upstream goes straight to the selected camera.
        let mut upstream: Vec<Vec<PixelUpstream>> =
            (0..n_cam).map(|_| vec![PixelUpstream::default(); n_px]).collect();
        for p in 0..n_px {
            let up = [
                params.lambda_image * d_pred[p][0],
                params.lambda_image * d_pred[p][1],
                params.lambda_image * d_pred[p][2],
            ];
            let d_mean = model.tone.apply_grad(frame, mean[p], up, &mut grads.tone);
            for cam_up in upstream.iter_mut() {
                for ch in 0..3 {
                    cam_up[p].d_color[ch] = d_mean[ch] * inv_n;
                }
            }
        }
        for (j, cam_up) in upstream.iter_mut().enumerate() {
            for p in 0..n_px {
                cam_up[p].d_depth = params.lambda_depth * d_depths[j][p];
            }
        }

        for (j, (pose, jac)) in fan.iter().enumerate() {
            let pose_grad = model.map.render_pixels_grad(pose, intr, px, &upstream[j], &mut grads.map);
            for (k, wg) in grads.windows[frame].iter_mut().enumerate() {
                *wg += dot6(&jac[k], &pose_grad);
            }
            // Duration column: blur-extent route of d/d log_dt.
            grads.tone.log_dt[frame] += dot6(&jac[WINDOW_OPT_DIM], &pose_grad);
        }

        selections.push(sel);
    }

    for &(pf, cf) in &params.traj_pairs {
        let (v, g) = traj_pair_loss_grad(&model.windows[pf], &model.windows[cf], model.log_a);
        bd.traj += v;
        let s = params.lambda_traj;
        for k in 0..WINDOW_OPT_DIM {
            grads.windows[pf][k] += s * g[k];
            grads.windows[cf][k] += s * g[WINDOW_PARAM_DIM + k];
        }
        grads.tone.log_dt[pf] += s * g[WINDOW_OPT_DIM];
        grads.tone.log_dt[cf] += s * g[WINDOW_PARAM_DIM + WINDOW_OPT_DIM];
        grads.log_a += s * g[2 * WINDOW_PARAM_DIM];
    }

    bd.total = params.lambda_image * bd.image
        + params.lambda_depth * bd.depth
        + params.lambda_traj * bd.traj;
    (bd, PreparedStep { selections })
}

/// Forward-only evaluation reusing frozen discrete choices from a previous
/// [`loss_and_grads`] call. This is what finite-difference probes perturb.
pub fn loss_frozen(
    model: &Model,
    frames: &[FrameObservation],
    pixels: &[PixelSet],
    params: &ObjectiveParams,
    prep: &PreparedStep,
) -> LossBreakdown {
    assert_eq!(frames.len(), pixels.len(), "pixel sets not frame-aligned");
    assert_eq!(frames.len(), prep.selections.len(), "selections not frame-aligned");
    let intr = &model.intrinsics;
    let n_cam = params.n_cam;

    let mut bd = LossBreakdown::default();
    for ((obs, px), sel) in frames.iter().zip(pixels).zip(&prep.selections) {
        let frame = obs.frame;
        let n_px = px.len();
        let (obs_c, obs_d) = gather_observed(obs, px);

        let fan = model.windows[frame].virtual_camera_fan(n_cam);
        let rendered: Vec<Vec<RenderedPixel>> =
            fan.iter().map(|p| model.map.render_pixels(p, intr, px)).collect();

        let mean = crate::model::fan_mean(&rendered, n_px);
        let pred: Vec<[f64; 3]> = mean.iter().map(|&m| model.tone.apply(frame, m)).collect();
        let mut d_pred = vec![[0.0f64; 3]; n_px];
        bd.image += image_loss(&pred, &obs_c, &mut d_pred);

        let depths: Vec<Vec<f64>> =
            rendered.iter().map(|r| r.iter().map(|p| p.depth).collect()).collect();
        let mut d_depths: Vec<Vec<f64>> = depths.iter().map(|d| vec![0.0; d.len()]).collect();
        bd.depth += depth_loss(sel, &depths, &obs_d, &mut d_depths);
    }

    for &(pf, cf) in &params.traj_pairs {
        bd.traj += traj_pair_loss(&model.windows[pf], &model.windows[cf], model.log_a);
    }

    bd.total = params.lambda_image * bd.image
        + params.lambda_depth * bd.depth
        + params.lambda_traj * bd.traj;
    bd
}

/// Identifies one scalar parameter of a [`Model`] for probing.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ParamRef {
    /// Flat map-parameter index (see [`crate::map::RadianceMap::param_mut`]).
    MapScalar(usize),
    /// Window parameter `k < 12` of a frame's exposure window.
    Window { frame: usize, k: usize },
    ToneWb { frame: usize, ch: usize },
    ToneDt { frame: usize },
    ToneCrf { k: usize },
    LogA,
}

/// Every differentiable scalar in the model, in a fixed order.
pub fn enumerate_params(model: &Model) -> Vec<ParamRef> {
    let mut out = Vec::new();
    for i in 0..model.map.n_params() {
        out.push(ParamRef::MapScalar(i));
    }
    for frame in 0..model.n_frames() {
        for k in 0..WINDOW_OPT_DIM {
            out.push(ParamRef::Window { frame, k });
        }
    }
    for frame in 0..model.n_frames() {
        for ch in 0..3 {
            out.push(ParamRef::ToneWb { frame, ch });
        }
        out.push(ParamRef::ToneDt { frame });
    }
    for k in 0..model.tone.crf_raw.len() {
        out.push(ParamRef::ToneCrf { k });
    }
    out.push(ParamRef::LogA);
    out
}

/// Evaluates the frozen loss with one parameter offset by `h`.
fn probed_loss(
    model: &Model,
    frames: &[FrameObservation],
    pixels: &[PixelSet],
    params: &ObjectiveParams,
    prep: &PreparedStep,
    p: ParamRef,
    h: f64,
) -> f64 {
    let mut m = model.clone();
    match p {
        ParamRef::MapScalar(i) => *m.map.param_mut(i) += h,
        ParamRef::Window { frame, k } => {
            // apply_window_deltas subtracts, so negate to step by +h.
            let mut d = [0.0; WINDOW_OPT_DIM];
            d[k] = -h;
            m.apply_window_deltas(frame, &d);
        }
        ParamRef::ToneWb { frame, ch } => m.tone.log_wb[frame][ch] += h,
        ParamRef::ToneDt { frame } => {
            m.tone.log_dt[frame] += h;
            m.sync_windows_to_tone();
        }
        ParamRef::ToneCrf { k } => {
            m.tone.crf_raw[k] += h;
            m.tone.reproject();
        }
        ParamRef::LogA => m.log_a += h,
    }
    loss_frozen(&m, frames, pixels, params, prep).total
}

fn analytic_grad(grads: &Gradients, crf_raw_grad: &[f64], p: ParamRef) -> f64 {
    match p {
        ParamRef::MapScalar(i) => grads.map.grad_at(i),
        ParamRef::Window { frame, k } => grads.windows[frame][k],
        ParamRef::ToneWb { frame, ch } => grads.tone.log_wb[frame][ch],
        ParamRef::ToneDt { frame } => grads.tone.log_dt[frame],
        ParamRef::ToneCrf { k } => crf_raw_grad[k],
        ParamRef::LogA => grads.log_a,
    }
}

#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// Probes whose analytic or numeric gradient was significant.
    pub checked: usize,
    pub max_rel_err: f64,
    pub failures: usize,
    pub worst: String,
}

/// Central finite-difference verification of [`loss_and_grads`] over the
/// given probes. `floor` ignores probes where both gradients are tiny;
/// relative error uses `max(|analytic|, |numeric|, floor)` as denominator.
pub fn gradcheck(
    model: &Model,
    frames: &[FrameObservation],
    pixels: &[PixelSet],
    params: &ObjectiveParams,
    probes: &[ParamRef],
    h: f64,
    tol: f64,
    floor: f64,
) -> GradCheckReport {
    let mut grads = model.zero_grads();
    let (_, prep) = loss_and_grads(model, frames, pixels, params, &mut grads);
    let crf_raw_grad = grads.tone.crf_raw_grad(&model.tone.crf_raw);

    let mut report = GradCheckReport {
        checked: 0,
        max_rel_err: 0.0,
        failures: 0,
        worst: String::new(),
    };
    for &p in probes {
        let lp = probed_loss(model, frames, pixels, params, &prep, p, h);
        let lm = probed_loss(model, frames, pixels, params, &prep, p, -h);
        let numeric = (lp - lm) / (2.0 * h);
        let analytic = analytic_grad(&grads, &crf_raw_grad, p);
        if numeric.abs() < floor && analytic.abs() < floor {
            continue;
        }
        let denom = numeric.abs().max(analytic.abs()).max(floor);
        let rel = (numeric - analytic).abs() / denom;
        report.checked += 1;
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = format!("{p:?}: analytic {analytic:.6e} numeric {numeric:.6e}");
        }
        if rel > tol {
            report.failures += 1;
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{CameraIntrinsics, Twist};
    use crate::imaging::ToneMapper;
    use crate::map::{GaussianMap, RadianceMap, VoxelMap};
    use crate::model::Model;
    use crate::seedstream;
    use nalgebra::{UnitQuaternion, Vector3};
    use rand::Rng;

    /// A small scene with real structure: a box room whose walls carry a
    /// brightness gradient, two moving frames, observations rendered from a
    /// slightly different model so gradients are nonzero everywhere.
    fn test_setup(backend: &str) -> (Model, Vec<LdrImage>, Vec<DepthImage>) {
        let mut rng = seedstream::stream(81, "objective/test/setup");
        let intr = CameraIntrinsics::from_fov(12, 10, 1.2);
        let fps = 30.0;
        let n_frames = 3;

        let map = match backend {
            "voxel" => {
                let mut m = VoxelMap::uniform(
                    [6, 6, 6],
                    Vector3::new(-2.0, -2.0, -2.0),
                    Vector3::new(2.0, 2.0, 2.0),
                    24,
                    0.05,
                    7.0,
                    2.0,
                    [0.0; 3],
                );
                for d in m.density_raw.iter_mut() {
                    *d += rng.gen_range(-1.0..1.0);
                }
                for c in m.color_raw.iter_mut() {
                    *c = rng.gen_range(-1.5..0.5);
                }
                RadianceMap::Voxel(m)
            }
            "gaussian" => {
                let mut m = GaussianMap::empty();
                for _ in 0..40 {
                    let c = Vector3::new(
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(-1.5..1.5),
                        rng.gen_range(0.8..2.5),
                    );
                    let lc = [
                        rng.gen_range(-1.5..0.5),
                        rng.gen_range(-1.5..0.5),
                        rng.gen_range(-1.5..0.5),
                    ];
                    m.push(c, (0.35f64).ln(), rng.gen_range(0.0..2.0), lc);
                }
                RadianceMap::Gaussian(m)
            }
            other => panic!("unknown backend {other}"),
        };

        let log_dt: Vec<f64> = (0..n_frames)
            .map(|i| (0.012 + 0.004 * i as f64).ln())
            .collect();
        let windows: Vec<_> = (0..n_frames)
            .map(|i| {
                let t = i as f64 / fps;
                let rot = UnitQuaternion::from_scaled_axis(Vector3::new(
                    0.02 * i as f64,
                    -0.01 * i as f64,
                    0.015,
                ));
                let pose = crate::geometry::Pose::new(
                    rot,
                    Vector3::new(0.05 * i as f64, -0.03 * i as f64, -0.2),
                );
                let vel = Twist {
                    rot: Vector3::new(0.3, -0.2, 0.25),
                    trans: Vector3::new(0.6, 0.4, -0.3),
                };
                ExposureWindow::new(i, t, log_dt[i].exp(), pose, vel).unwrap()
            })
            .collect();
        let tone = ToneMapper::new(log_dt);
        let mut model = Model::new(map, tone, windows, intr, fps);
        for (i, wb) in model.tone.log_wb.iter_mut().enumerate() {
            *wb = [0.05 * i as f64, -0.03, 0.02];
        }

        // Observations from a perturbed copy: shifted poses, different
        // exposure, mildly bent response curve.
        let mut gt = model.clone();
        for w in gt.windows.iter_mut() {
            let rot = UnitQuaternion::from_scaled_axis(Vector3::new(0.02, -0.015, 0.01))
                * w.center.rotation;
            w.center = crate::geometry::Pose::new(
                rot,
                w.center.translation + Vector3::new(0.04, -0.03, 0.05),
            );
        }
        for v in gt.tone.crf_raw.iter_mut() {
            *v = v.powf(1.2);
        }
        gt.tone.reproject();
        for dt in gt.tone.log_dt.iter_mut() {
            *dt += 0.15;
        }
        gt.sync_windows_to_tone();

        let mut ldrs = Vec::new();
        let mut depths = Vec::new();
        for i in 0..n_frames {
            ldrs.push(gt.render_blurred_ldr(i, 3));
            let (_, d, _) = gt.render_sharp_hdr(i);
            depths.push(d);
        }
        (model, ldrs, depths)
    }

    fn observations<'a>(
        ldrs: &'a [LdrImage],
        depths: &'a [DepthImage],
    ) -> Vec<FrameObservation<'a>> {
        ldrs.iter()
            .zip(depths)
            .enumerate()
            .map(|(frame, (ldr, depth))| FrameObservation { frame, ldr, depth })
            .collect()
    }

    fn full_pixels(model: &Model, n_frames: usize) -> Vec<PixelSet> {
        (0..n_frames)
            .map(|_| PixelSet::full(model.intrinsics.width, model.intrinsics.height))
            .collect()
    }

    fn default_params(n_frames: usize) -> ObjectiveParams {
        ObjectiveParams {
            n_cam: 3,
            lambda_image: 1.0,
            lambda_depth: 0.7,
            lambda_traj: 0.5,
            traj_pairs: (1..n_frames).map(|f| (f - 1, f)).collect(),
        }
    }

    #[test]
    fn total_is_weighted_sum_of_components() {
        let (model, ldrs, depths) = test_setup("voxel");
        let frames = observations(&ldrs, &depths);
        let pixels = full_pixels(&model, frames.len());
        let params = default_params(frames.len());
        let mut grads = model.zero_grads();
        let (bd, _) = loss_and_grads(&model, &frames, &pixels, &params, &mut grads);
        assert!(bd.image > 0.0 && bd.depth > 0.0 && bd.traj > 0.0);
        approx::assert_relative_eq!(
            bd.total,
            params.lambda_image * bd.image
                + params.lambda_depth * bd.depth
                + params.lambda_traj * bd.traj,
            epsilon = 1e-12
        );
    }

    #[test]
    fn frozen_loss_matches_grad_pass_at_same_point() {
        let (model, ldrs, depths) = test_setup("voxel");
        let frames = observations(&ldrs, &depths);
        let pixels = full_pixels(&model, frames.len());
        let params = default_params(frames.len());
        let mut grads = model.zero_grads();
        let (bd, prep) = loss_and_grads(&model, &frames, &pixels, &params, &mut grads);
        let bd2 = loss_frozen(&model, &frames, &pixels, &params, &prep);
        assert_eq!(bd.total.to_bits(), bd2.total.to_bits());
        assert_eq!(bd.image.to_bits(), bd2.image.to_bits());
        assert_eq!(bd.depth.to_bits(), bd2.depth.to_bits());
        assert_eq!(bd.traj.to_bits(), bd2.traj.to_bits());
    }

    #[test]
    fn evaluation_is_deterministic() {
        let (model, ldrs, depths) = test_setup("voxel");
        let frames = observations(&ldrs, &depths);
        let pixels = full_pixels(&model, frames.len());
        let params = default_params(frames.len());
        let mut g1 = model.zero_grads();
        let mut g2 = model.zero_grads();
        let (b1, _) = loss_and_grads(&model, &frames, &pixels, &params, &mut g1);
        let (b2, _) = loss_and_grads(&model, &frames, &pixels, &params, &mut g2);
        assert_eq!(b1.total.to_bits(), b2.total.to_bits());
        assert_eq!(g1.log_a.to_bits(), g2.log_a.to_bits());
        for (a, b) in g1.windows.iter().zip(&g2.windows) {
            for (x, y) in a.iter().zip(b) {
                assert_eq!(x.to_bits(), y.to_bits());
            }
        }
    }

    #[test]
    fn constant_velocity_keeps_smoothness_term_zero() {
        let (mut model, ldrs, depths) = test_setup("voxel");
        // Rebuild windows on an exact constant-velocity trajectory with the
        // cost-free rate a = fps/2 and uniform durations.
        let vel = Twist {
            rot: Vector3::new(0.2, -0.1, 0.3),
            trans: Vector3::new(0.5, 0.2, -0.4),
        };
        let dt = 0.014;
        let n = model.n_frames();
        for i in 0..n {
            let t = i as f64 / model.fps;
            let rot = UnitQuaternion::from_scaled_axis(vel.rot * t);
            let pose = crate::geometry::Pose::new(rot, vel.trans * t);
            model.windows[i] = ExposureWindow::new(i, t, dt, pose, vel).unwrap();
            model.tone.log_dt[i] = dt.ln();
        }
        model.log_a = (model.fps / 2.0).ln();
        let frames = observations(&ldrs, &depths);
        let pixels = full_pixels(&model, frames.len());
        let params = default_params(frames.len());
        let mut grads = model.zero_grads();
        let (bd, _) = loss_and_grads(&model, &frames, &pixels, &params, &mut grads);
        assert!(bd.traj < 1e-18, "smoothness term {} not ~0", bd.traj);
    }

    /// End-to-end gradient verification across every parameter family.
    fn run_gradcheck(backend: &str, h: f64, tol: f64) {
        let (model, ldrs, depths) = test_setup(backend);
        let frames = observations(&ldrs, &depths);
        let pixels = full_pixels(&model, frames.len());
        let params = default_params(frames.len());

        let all = enumerate_params(&model);
        let mut rng = seedstream::stream(82, "objective/test/gradcheck");
        let mut probes: Vec<ParamRef> = Vec::new();
        // All non-map families (cheap, and each has few scalars)...
        for &p in &all {
            if !matches!(p, ParamRef::MapScalar(_)) {
                probes.push(p);
            }
        }
        // ...plus a random slice of map scalars.
        let n_map = model.map.n_params();
        for _ in 0..120 {
            probes.push(ParamRef::MapScalar(rng.gen_range(0..n_map)));
        }

        let report = gradcheck(&model, &frames, &pixels, &params, &probes, h, tol, 1e-7);
        assert!(
            report.checked > 60,
            "too few significant probes: {}",
            report.checked
        );
        assert_eq!(
            report.failures, 0,
            "{} gradient mismatches, worst {} (rel {:.3e})",
            report.failures, report.worst, report.max_rel_err
        );
    }

    #[test]
    fn gradcheck_voxel_backend() {
        run_gradcheck("voxel", 1e-5, 2e-4);
    }

    #[test]
    fn gradcheck_gaussian_backend() {
        run_gradcheck("gaussian", 1e-6, 2e-3);
    }
}

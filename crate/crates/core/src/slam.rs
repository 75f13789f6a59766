//! Incremental tracking and mapping over a degraded RGB-D sequence.
//!
//! Frame 0 pins the gauge: its pose is the world origin, its velocity is
//! zero, its exposure duration is frozen at half the frame period (which
//! makes it the radiance/brightness unit), and its white balance is neutral
//! — none of these are optimized. Keeping the frozen duration physical means
//! later frames' durations converge to real exposure times and their white
//! balance stays near one instead of absorbing a huge gauge factor. Every
//! later frame is tracked by fitting its exposure window (center pose,
//! velocity) and per-frame tone parameters against the frozen map; every
//! `mapping_every`-th frame becomes a keyframe and triggers joint refinement
//! of the map, the response curve, and the active keyframes.

use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use thiserror::Error;

use crate::config::{Config, MapBackend};
use crate::dataset::Dataset;
use crate::geometry::{
    extrapolate_next_window, ExposureWindow, GeometryError, Pose, TrajectoryPoint, Twist,
    write_trajectory,
};
use crate::imaging::{write_crf, ToneMapper};
use crate::img::{write_ldr_png, write_pfm, HdrImage, ImgError, PixelSet};
use crate::losses::{write_losses_csv, LossRow};
use crate::map::{
    read_checkpoint, write_checkpoint, CheckpointError, ExtraArrays, GaussianMap, RadianceMap,
    SeedParams, VoxelMap,
};
use crate::metrics::{
    ate_rmse, depth_l1_cm, display_image, fit_global_exposure, geometric_mean_dt, psnr, ssim,
    Alignment, EvalReport, FrameMetrics, MetricsError,
};
use crate::model::{Gradients, Model, WINDOW_OPT_DIM};
use crate::objective::{loss_and_grads, FrameObservation, ObjectiveParams};
use crate::optim::Adam;
use crate::seedstream;

#[derive(Debug, Error)]
pub enum SlamError {
    #[error("dataset has no frames")]
    NoFrames,
    #[error("{0}")]
    Inconsistent(String),
    #[error("dataset lacks ground truth needed for evaluation: {0}")]
    MissingGroundTruth(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Checkpoint(#[from] CheckpointError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("I/O error: {0}")]
    Io(#[from] std::io::Error),
}

/// Run-time switches on top of the config (CLI flags map here).
#[derive(Debug, Clone)]
pub struct SlamOptions {
    /// Virtual cameras per exposure window.
    pub n_cam: usize,
    /// Drop the trajectory smoothness term.
    pub ablate_traj: bool,
    /// Freeze the tone stage: identity response, unit white balance, and a
    /// fixed half-frame exposure for every frame.
    pub ablate_tonemap: bool,
    /// Ignore motion blur: render one camera per window and freeze velocities.
    pub ablate_blur: bool,
}

impl SlamOptions {
    pub fn from_config(config: &Config) -> Self {
        use crate::config::AblateMode;
        let mode = config.slam.ablate;
        SlamOptions {
            n_cam: config.geometry.n_cam,
            ablate_traj: mode == Some(AblateMode::Traj),
            ablate_tonemap: mode == Some(AblateMode::Tonemap),
            ablate_blur: mode == Some(AblateMode::Blur),
        }
    }
}

#[derive(Debug)]
pub struct SlamResult {
    pub model: Model,
    pub keyframes: Vec<usize>,
    /// Frames whose tracking was reverted after the loss blew up.
    pub diverged: Vec<usize>,
    pub losses: Vec<LossRow>,
}

struct Runner<'a> {
    ds: &'a Dataset,
    cfg: &'a Config,
    opt: SlamOptions,
    model: Model,
    adam: Adam,
    grads: Gradients,
    keyframes: Vec<usize>,
    diverged: Vec<usize>,
    losses: Vec<LossRow>,
    step: usize,
}

/// Piecewise-linear inverse of the projected response grid.
fn crf_inverse(crf: &[f64], v: f64) -> f64 {
    let v = v.clamp(0.0, 1.0);
    let n = crf.len();
    let k = crf.partition_point(|&g| g < v).min(n - 1);
    if k == 0 {
        return 0.0;
    }
    let (lo, hi) = (crf[k - 1], crf[k]);
    let f = if hi > lo { (v - lo) / (hi - lo) } else { 0.0 };
    ((k - 1) as f64 + f) / (n - 1) as f64
}

impl<'a> Runner<'a> {
    fn new(ds: &'a Dataset, cfg: &'a Config, opt: SlamOptions) -> Result<Self, SlamError> {
        let n = ds.n_frames();
        if n == 0 {
            return Err(SlamError::NoFrames);
        }
        let fps = ds.meta.fps;
        let half_frame = 0.5 / fps;

        // Frame 0's duration is frozen at half the frame period and doubles
        // as the brightness gauge; keeping the gauge physical means white
        // balance and later durations start near their converged values.
        let tone = ToneMapper::new(vec![half_frame.ln(); n]);

        let mut windows = Vec::with_capacity(n);
        for i in 0..n {
            windows.push(ExposureWindow::new(
                i,
                i as f64 / fps,
                half_frame,
                Pose::identity(),
                Twist::new(Vector3::zeros(), Vector3::zeros()),
            )?);
        }

        let map = match self_backend(cfg) {
            MapBackend::Voxel => {
                let mut m = VoxelMap::uniform(
                    cfg.map.resolution,
                    Vector3::from(cfg.map.bounds_min),
                    Vector3::from(cfg.map.bounds_max),
                    cfg.map.n_samples,
                    cfg.map.near,
                    cfg.map.far,
                    cfg.map.init_density_raw,
                    [cfg.map.init_log_color; 3],
                );
                m.seed_density_raw = cfg.map.seed_density_raw;
                RadianceMap::Voxel(m)
            }
            MapBackend::Gaussian => {
                let mut m = GaussianMap::empty();
                m.seed_opacity_logit = cfg.map.seed_opacity_logit;
                m.seed_scale_factor = cfg.map.seed_scale_factor;
                RadianceMap::Gaussian(m)
            }
        };

        let model = Model::new(map, tone, windows, ds.meta.intrinsics.clone(), fps);
        let grads = model.zero_grads();
        Ok(Runner {
            ds,
            cfg,
            opt,
            model,
            adam: Adam::new(),
            grads,
            keyframes: Vec::new(),
            diverged: Vec::new(),
            losses: Vec::new(),
            step: 0,
        })
    }

    /// Per-pixel radiance implied by an observed frame under the current tone
    /// parameters (used as the color of newly seeded geometry).
    fn radiance_estimate(&self, frame: usize) -> HdrImage {
        let tone = &self.model.tone;
        let dt = tone.duration(frame);
        let ldr = &self.ds.ldr[frame];
        let mut out = HdrImage::new(ldr.width, ldr.height);
        for (o, p) in out.data.iter_mut().zip(&ldr.data) {
            for ch in 0..3 {
                let wb = tone.log_wb[frame][ch].exp();
                o[ch] = crf_inverse(&tone.crf, p[ch]) / (wb * dt);
            }
        }
        out
    }

    fn effective_ncam(&self) -> usize {
        if self.opt.ablate_blur { 1 } else { self.opt.n_cam }
    }

    fn objective_params(&self, traj_pairs: Vec<(usize, usize)>) -> ObjectiveParams {
        ObjectiveParams {
            n_cam: self.effective_ncam(),
            lambda_image: self.cfg.losses.lambda_image,
            lambda_depth: self.cfg.losses.lambda_depth,
            lambda_traj: if self.opt.ablate_traj {
                0.0
            } else {
                self.cfg.losses.lambda_traj
            },
            traj_pairs: if self.opt.ablate_traj { Vec::new() } else { traj_pairs },
        }
    }

    fn observation(&self, frame: usize) -> FrameObservation<'a> {
        FrameObservation {
            frame,
            ldr: &self.ds.ldr[frame],
            depth: &self.ds.depth[frame],
        }
    }

    fn push_row(&mut self, frame: usize, b: &crate::objective::LossBreakdown) {
        self.losses.push(LossRow {
            step: self.step,
            frame,
            l_img: b.image,
            l_depth: b.depth,
            l_traj: b.traj,
            total: b.total,
            a: self.model.log_a.exp(),
        });
        self.step += 1;
    }

    /// Subtract optimizer deltas for one window, splitting the 12 parameters
    /// into their named groups. Velocity groups are absent when blur handling
    /// is ablated.
    fn window_step(&mut self, frame: usize) {
        let g = &self.grads.windows[frame];
        let pose_name = format!("win/{frame:06}/pose");
        let mut d = [0.0f64; WINDOW_OPT_DIM];
        let dp = self.adam.deltas(&pose_name, &g[0..6]);
        d[..6].copy_from_slice(&dp);
        if !self.opt.ablate_blur {
            let dr = self.adam.deltas(&format!("win/{frame:06}/vel_rot"), &g[6..9]);
            let dt = self.adam.deltas(&format!("win/{frame:06}/vel_trans"), &g[9..12]);
            d[6..9].copy_from_slice(&dr);
            d[9..12].copy_from_slice(&dt);
        }
        self.model.apply_window_deltas(frame, &d);
    }

    fn ensure_window_groups(&mut self, frame: usize) {
        let lr = self.cfg.optim.lr_tracking;
        self.adam.ensure_group(&format!("win/{frame:06}/pose"), 6, lr);
        if !self.opt.ablate_blur {
            self.adam.ensure_group(
                &format!("win/{frame:06}/vel_rot"),
                3,
                lr * self.cfg.optim.rot_vel_scale,
            );
            self.adam.ensure_group(&format!("win/{frame:06}/vel_trans"), 3, lr);
        }
    }

    fn ensure_tone_groups(&mut self, frame: usize) {
        if self.opt.ablate_tonemap || frame == 0 {
            return;
        }
        let lr = self.cfg.optim.lr_tone;
        self.adam.ensure_group(&format!("tone/{frame:06}/wb"), 3, lr);
        self.adam.ensure_group(&format!("tone/{frame:06}/dt"), 1, lr);
    }

    /// Subtract tone deltas for one frame and propagate the new duration into
    /// its window span.
    fn tone_step(&mut self, frame: usize) {
        if self.opt.ablate_tonemap || frame == 0 {
            return;
        }
        let dwb = self
            .adam
            .deltas(&format!("tone/{frame:06}/wb"), &self.grads.tone.log_wb[frame]);
        for ch in 0..3 {
            self.model.tone.log_wb[frame][ch] -= dwb[ch];
        }
        let ddt = self
            .adam
            .deltas(&format!("tone/{frame:06}/dt"), &[self.grads.tone.log_dt[frame]]);
        self.model.tone.log_dt[frame] -= ddt[0];
        let dt = self.model.tone.duration(frame);
        if dt.is_finite() {
            self.model.windows[frame]
                .set_duration(dt)
                .expect("exp of finite value is positive");
        }
    }

    fn track_frame(&mut self, i: usize) -> Result<(), SlamError> {
        let fps = self.model.fps;
        let t_mid = i as f64 / fps;

        // Initialize tone from the previous frame.
        if !self.opt.ablate_tonemap {
            self.model.tone.log_dt[i] = self.model.tone.log_dt[i - 1];
            self.model.tone.log_wb[i] = self.model.tone.log_wb[i - 1];
        }
        let duration = if self.opt.ablate_tonemap {
            0.5 / fps
        } else {
            self.model.tone.duration(i)
        };

        let init_window = if i == 1 {
            ExposureWindow::new(
                i,
                t_mid,
                duration,
                self.model.windows[0].center.clone(),
                Twist::new(Vector3::zeros(), Vector3::zeros()),
            )?
        } else {
            let mut w = extrapolate_next_window(
                &self.model.windows[i - 2],
                &self.model.windows[i - 1],
                i,
                t_mid,
                duration,
                self.cfg.geometry.init_separation,
            )?;
            if self.opt.ablate_blur {
                w.velocity = Twist::new(Vector3::zeros(), Vector3::zeros());
            }
            w
        };
        self.model.windows[i] = init_window.clone();
        let init_log_dt = self.model.tone.log_dt[i];
        let init_log_wb = self.model.tone.log_wb[i];

        self.ensure_window_groups(i);
        self.ensure_tone_groups(i);

        let params = self.objective_params(vec![(i - 1, i)]);
        let obs = [self.observation(i)];
        let mut rng = seedstream::stream(self.cfg.seed, &format!("slam/track/{i:06}"));
        let (w, h) = (self.model.intrinsics.width, self.model.intrinsics.height);

        let mut init_loss = f64::INFINITY;
        for iter in 0..self.cfg.optim.tracking_iters {
            let px = [PixelSet::sample(&mut rng, w, h, self.cfg.optim.pixels_tracking)];
            self.grads.zero();
            let (loss, _) = loss_and_grads(&self.model, &obs, &px, &params, &mut self.grads);
            if iter == 0 {
                init_loss = loss.total;
            } else if loss.total > self.cfg.slam.divergence_factor * init_loss {
                self.model.windows[i] = init_window;
                self.model.tone.log_dt[i] = init_log_dt;
                self.model.tone.log_wb[i] = init_log_wb;
                self.diverged.push(i);
                self.push_row(i, &loss);
                return Ok(());
            }
            self.window_step(i);
            self.tone_step(i);
            self.push_row(i, &loss);
        }
        Ok(())
    }

    fn map_frame(&mut self, i: usize) -> Result<(), SlamError> {
        self.keyframes.push(i);

        // Claim geometry the map does not cover yet, then refresh gradient
        // buffers (the Gaussian backend grows here).
        let pose = self.model.windows[i].pose_at_u(0.5);
        let estimate = self.radiance_estimate(i);
        let seed_params = SeedParams {
            stride: self.cfg.map.seed_stride,
            opacity_threshold: self.cfg.map.seed_opacity_threshold,
        };
        self.model.map.seed_from_depth(
            &pose,
            &self.model.intrinsics,
            &self.ds.depth[i],
            &estimate,
            &seed_params,
        );
        self.grads = self.model.zero_grads();

        // Active keyframes: the most recent few plus one random earlier one.
        let recent_from = self.keyframes.len().saturating_sub(self.cfg.slam.keyframes_recent);
        let recent: Vec<usize> = self.keyframes[recent_from..].to_vec();
        let mut active = recent.clone();
        let mut rng = seedstream::stream(self.cfg.seed, &format!("slam/keysel/{i:06}"));
        let past = &self.keyframes[..recent_from];
        if !past.is_empty() {
            use rand::Rng;
            for _ in 0..self.cfg.slam.keyframes_random_past {
                let k = past[rng.gen_range(0..past.len())];
                if !active.contains(&k) {
                    active.push(k);
                }
            }
        }
        active.sort_unstable();

        self.adam
            .ensure_group("map", self.model.map.n_params(), self.cfg.optim.lr_map);
        if !self.opt.ablate_tonemap {
            self.adam
                .ensure_group("tone/crf", crate::imaging::CRF_SIZE, self.cfg.optim.lr_tone);
        }
        if !self.opt.ablate_traj {
            self.adam.ensure_group("traj/log_a", 1, self.cfg.optim.lr_log_a);
        }
        for &k in &active {
            self.ensure_tone_groups(k);
        }
        let refine: Vec<usize> = if self.cfg.slam.refine_keyframe_windows {
            recent.iter().copied().filter(|&k| k != 0).collect()
        } else {
            Vec::new()
        };
        for &k in &refine {
            self.ensure_window_groups(k);
        }

        let pairs: Vec<(usize, usize)> = (1..=i).map(|j| (j - 1, j)).collect();
        let params = self.objective_params(pairs);
        let obs: Vec<FrameObservation> = active.iter().map(|&k| self.observation(k)).collect();
        let mut px_rng = seedstream::stream(self.cfg.seed, &format!("slam/map/{i:06}"));
        let (w, h) = (self.model.intrinsics.width, self.model.intrinsics.height);

        for _ in 0..self.cfg.optim.mapping_iters {
            let px: Vec<PixelSet> = active
                .iter()
                .map(|_| PixelSet::sample(&mut px_rng, w, h, self.cfg.optim.pixels_mapping))
                .collect();
            self.grads.zero();
            let (loss, _) = loss_and_grads(&self.model, &obs, &px, &params, &mut self.grads);

            let flat: Vec<f64> = (0..self.model.map.n_params())
                .map(|p| self.grads.map.grad_at(p))
                .collect();
            let dmap = self.adam.deltas("map", &flat);
            for (p, d) in dmap.iter().enumerate() {
                *self.model.map.param_mut(p) -= d;
            }

            if !self.opt.ablate_tonemap {
                let raw = self.grads.tone.crf_raw_grad(&self.model.tone.crf_raw);
                let dcrf = self.adam.deltas("tone/crf", &raw);
                for (g, d) in self.model.tone.crf_raw.iter_mut().zip(&dcrf) {
                    *g -= d;
                }
                self.model.tone.reproject();
            }
            for k in active.clone() {
                self.tone_step(k);
            }
            for k in refine.clone() {
                self.window_step(k);
            }
            if !self.opt.ablate_traj {
                let da = self.adam.deltas("traj/log_a", &[self.grads.log_a]);
                self.model.log_a -= da[0];
            }
            self.push_row(i, &loss);
        }
        Ok(())
    }

    fn run(mut self) -> Result<SlamResult, SlamError> {
        // Bootstrap: frame 0 is the gauge; seed and fit the initial map.
        self.map_frame(0)?;
        for i in 1..self.ds.n_frames() {
            self.track_frame(i)?;
            if i % self.cfg.slam.mapping_every == 0 {
                self.map_frame(i)?;
            }
        }
        Ok(SlamResult {
            model: self.model,
            keyframes: self.keyframes,
            diverged: self.diverged,
            losses: self.losses,
        })
    }
}

fn self_backend(cfg: &Config) -> MapBackend {
    cfg.map.backend
}

/// Run the full pipeline over a loaded dataset.
pub fn run_slam(
    dataset: &Dataset,
    config: &Config,
    options: &SlamOptions,
) -> Result<SlamResult, SlamError> {
    Runner::new(dataset, config, options.clone())?.run()
}

// ---------------------------------------------------------------------------
// Output files
// ---------------------------------------------------------------------------

pub fn trajectory_path(out: &Path) -> PathBuf {
    out.join("trajectory.txt")
}
pub fn checkpoint_path(out: &Path) -> PathBuf {
    out.join("map.ckpt")
}
pub fn tonemap_path(out: &Path) -> PathBuf {
    out.join("tonemap.txt")
}
pub fn crf_path(out: &Path) -> PathBuf {
    out.join("crf.txt")
}
pub fn losses_path(out: &Path) -> PathBuf {
    out.join("losses.csv")
}
pub fn render_path(out: &Path, frame: usize) -> PathBuf {
    out.join("renders").join(format!("{frame:06}.png"))
}
pub fn render_hdr_path(out: &Path, frame: usize) -> PathBuf {
    out.join("renders_hdr").join(format!("{frame:06}.pfm"))
}

/// Estimated trajectory: one line per frame, center pose at the frame time.
fn result_trajectory(model: &Model) -> Vec<TrajectoryPoint> {
    model
        .windows
        .iter()
        .enumerate()
        .map(|(i, w)| TrajectoryPoint {
            t: i as f64 / model.fps,
            pose: w.center.clone(),
        })
        .collect()
}

/// Checkpoint extras: everything beyond the map needed to re-render a result
/// (tone parameters and timing) plus the trajectory rate parameter.
fn checkpoint_extras(model: &Model) -> ExtraArrays {
    let intr = &model.intrinsics;
    let mut extras = ExtraArrays::new();
    extras.insert("meta/fps".into(), vec![model.fps]);
    extras.insert("meta/log_a".into(), vec![model.log_a]);
    extras.insert(
        "meta/intrinsics".into(),
        vec![
            intr.width as f64,
            intr.height as f64,
            intr.fx,
            intr.fy,
            intr.cx,
            intr.cy,
        ],
    );
    extras.insert("tone/log_dt".into(), model.tone.log_dt.clone());
    extras.insert(
        "tone/log_wb".into(),
        model.tone.log_wb.iter().flat_map(|w| w.iter().copied()).collect(),
    );
    extras.insert("tone/crf_raw".into(), model.tone.crf_raw.clone());
    extras
}

/// Write all result files for a finished run.
pub fn write_outputs(out: &Path, result: &SlamResult) -> Result<(), SlamError> {
    std::fs::create_dir_all(out.join("renders"))?;
    std::fs::create_dir_all(out.join("renders_hdr"))?;
    let model = &result.model;

    write_trajectory(&trajectory_path(out), &result_trajectory(model))?;
    write_checkpoint(&checkpoint_path(out), &model.map, &checkpoint_extras(model))?;
    write_crf(&crf_path(out), &model.tone.crf)?;
    write_losses_csv(&losses_path(out), &result.losses)?;

    {
        use std::io::Write;
        let mut f = std::io::BufWriter::new(std::fs::File::create(tonemap_path(out))?);
        writeln!(f, "# frame dt wb_r wb_g wb_b")?;
        for i in 0..model.n_frames() {
            let wb = model.tone.log_wb[i];
            writeln!(
                f,
                "{i} {:.9} {:.9} {:.9} {:.9}",
                model.tone.duration(i),
                wb[0].exp(),
                wb[1].exp(),
                wb[2].exp(),
            )?;
        }
        f.flush()?;
    }

    for i in 0..model.n_frames() {
        let (hdr, _, _) = model.render_sharp_hdr(i);
        write_pfm(&render_hdr_path(out, i), &hdr)?;
        // Preview: the recovered sharp radiance exposed by the frame's own
        // recovered duration, linear clamp (no learned response applied).
        let preview = display_image(&hdr, model.tone.duration(i));
        write_ldr_png(&render_path(out, i), &preview)?;
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Evaluation against ground truth
// ---------------------------------------------------------------------------

/// Compare a finished result directory against its (synthetic) dataset:
/// trajectory error plus sharp-image and depth quality at the estimated
/// poses, in the normalized display space described in [`crate::metrics`].
///
/// A dataset without any sharp reference frames yields a trajectory-only
/// report (image-quality fields absent); a dataset with sharp frames for
/// only some of the sequence is rejected as inconsistent.
pub fn evaluate(result_dir: &Path, dataset: &Dataset) -> Result<EvalReport, SlamError> {
    let est = crate::geometry::read_trajectory(&trajectory_path(result_dir))?;
    let n = dataset.n_frames();
    if est.len() != n {
        return Err(SlamError::Inconsistent(format!(
            "estimated trajectory has {} poses for {} frames",
            est.len(),
            n
        )));
    }
    let gt_traj = dataset
        .gt_trajectory
        .as_ref()
        .ok_or_else(|| SlamError::MissingGroundTruth("groundtruth.txt".into()))?;

    let with_sharp = (0..n)
        .filter(|&i| crate::dataset::hdr_sharp_path(&dataset.dir, i).exists())
        .count();
    if with_sharp == 0 {
        let ate = ate_rmse(&est, gt_traj, Alignment::Similarity)?;
        return Ok(EvalReport::trajectory_only(n, ate));
    }
    if with_sharp != n {
        return Err(SlamError::Inconsistent(format!(
            "dataset has sharp reference frames for {with_sharp} of {n} frames"
        )));
    }
    let (map, _extras) = read_checkpoint(&checkpoint_path(result_dir))?;

    let mut preds: Vec<HdrImage> = Vec::with_capacity(n);
    let mut pred_depths = Vec::with_capacity(n);
    let mut gts: Vec<HdrImage> = Vec::with_capacity(n);
    for (i, e) in est.iter().enumerate() {
        let (hdr, depth, _) = map.render_frame(&e.pose, &dataset.meta.intrinsics);
        preds.push(hdr);
        pred_depths.push(depth);
        gts.push(dataset.load_sharp_hdr(i).ok_or_else(|| {
            SlamError::MissingGroundTruth(format!("hdr_sharp frame {i}"))
        })?);
    }

    let dt_ref = geometric_mean_dt(
        &dataset.meta.frames.iter().map(|f| f.dt).collect::<Vec<_>>(),
    );
    let fit = fit_global_exposure(&preds, &gts, dt_ref);
    let k = fit.log_scale.exp();

    let mut rows = Vec::with_capacity(n);
    for i in 0..n {
        let dp = display_image(&preds[i], dt_ref * k);
        let dg = display_image(&gts[i], dt_ref);
        rows.push(FrameMetrics {
            frame: i,
            psnr_db: psnr(&dp, &dg, 1.0)?,
            ssim: ssim(&dp, &dg)?,
            depth_l1_cm: depth_l1_cm(&pred_depths[i], &dataset.depth[i])?,
        });
    }
    let ate = ate_rmse(&est, gt_traj, Alignment::Similarity)?;
    Ok(EvalReport::from_frames(rows, ate, k))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::{generate, SequenceSpec};

    fn tiny_config() -> Config {
        let mut cfg = Config::default();
        cfg.seed = 11;
        cfg.geometry.n_cam = 3;
        cfg.map.resolution = [24, 24, 24];
        cfg.map.n_samples = 16;
        cfg.map.far = 9.0;
        cfg.optim.tracking_iters = 60;
        cfg.optim.mapping_iters = 20;
        // Aggressive rates suit the coarse test scale; the defaults target
        // full-length runs.
        cfg.optim.lr_tracking = 2e-3;
        cfg.optim.pixels_tracking = 160;
        cfg.optim.pixels_mapping = 320;
        cfg.slam.mapping_every = 3;
        cfg
    }

    fn tiny_dataset(dir: &Path) {
        let mut spec = SequenceSpec::new("room");
        spec.n_frames = 7;
        spec.width = 32;
        spec.height = 24;
        spec.seed = 5;
        generate(&spec, dir).unwrap();
    }

    #[test]
    fn end_to_end_smoke_runs_and_is_deterministic() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let ds = Dataset::load(data.path()).unwrap();
        let cfg = tiny_config();
        let opts = SlamOptions::from_config(&cfg);

        let r1 = run_slam(&ds, &cfg, &opts).unwrap();
        assert_eq!(r1.model.n_frames(), 7);
        assert_eq!(r1.keyframes, vec![0, 3, 6]);
        assert!(r1.losses.iter().all(|row| row.total.is_finite()));

        // Gauge: frame 0 untouched.
        let w0 = &r1.model.windows[0];
        assert_eq!(w0.center.translation, Vector3::zeros());
        assert_eq!(r1.model.tone.log_dt[0], (0.5f64 / 30.0).ln());
        assert_eq!(r1.model.tone.log_wb[0], [0.0; 3]);
        assert_eq!(w0.duration(), 0.5 / 30.0);

        assert!(r1.diverged.is_empty(), "unexpected divergence: {:?}", r1.diverged);

        // Bootstrap mapping descends. Frame 0's rows cover that frame alone,
        // so head and tail means are directly comparable; rows logged during
        // later mapping phases sum over every active keyframe instead.
        let boot: Vec<f64> =
            r1.losses.iter().filter(|r| r.frame == 0).map(|r| r.total).collect();
        assert_eq!(boot.len(), cfg.optim.mapping_iters);
        let head = boot[..5].iter().sum::<f64>() / 5.0;
        let tail = boot[boot.len() - 5..].iter().sum::<f64>() / 5.0;
        assert!(tail < head, "bootstrap mapping did not descend: {head:.4} -> {tail:.4}");

        // Tracking stays stable on the pure tracking frames. At this scale the
        // map error dominates the objective, so require non-explosion rather
        // than strict descent (averaged to smooth pixel-sampling noise).
        for f in [1usize, 2, 4, 5] {
            let rows: Vec<f64> =
                r1.losses.iter().filter(|r| r.frame == f).map(|r| r.total).collect();
            assert_eq!(rows.len(), cfg.optim.tracking_iters);
            let head = rows[..3].iter().sum::<f64>() / 3.0;
            let tail = rows[rows.len() - 3..].iter().sum::<f64>() / 3.0;
            assert!(tail < 2.0 * head, "tracking blew up on frame {f}: {head:.4} -> {tail:.4}");
        }

        // The true motion spans a few centimetres; estimates must stay sane.
        for w in &r1.model.windows {
            assert!(w.center.translation.norm() < 1.0);
        }

        // Determinism: bit-identical outputs on a re-run.
        let r2 = run_slam(&ds, &cfg, &opts).unwrap();
        assert_eq!(r1.losses.len(), r2.losses.len());
        for (a, b) in r1.losses.iter().zip(&r2.losses) {
            assert_eq!(a.total.to_bits(), b.total.to_bits());
        }
        for (wa, wb) in r1.model.windows.iter().zip(&r2.model.windows) {
            assert_eq!(wa.center.translation, wb.center.translation);
            assert_eq!(wa.center.rotation, wb.center.rotation);
        }

        // Output files + evaluation round trip.
        let out = tempfile::tempdir().unwrap();
        write_outputs(out.path(), &r1).unwrap();
        for p in [
            trajectory_path(out.path()),
            checkpoint_path(out.path()),
            tonemap_path(out.path()),
            crf_path(out.path()),
            losses_path(out.path()),
            render_path(out.path(), 6),
            render_hdr_path(out.path(), 6),
        ] {
            assert!(p.exists(), "missing output {p:?}");
        }
        let report = evaluate(out.path(), &ds).unwrap();
        assert_eq!(report.n_frames, 7);
        assert!(report.ate_rmse_m.is_finite());
        let psnr = report.mean_psnr_db.unwrap();
        assert!(psnr > 5.0, "psnr {psnr}");
        let k = report.exposure_scale.unwrap();
        assert!(k.is_finite() && k > 0.0);
    }

    #[test]
    fn divergence_reverts_and_flags() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let ds = Dataset::load(data.path()).unwrap();
        let mut cfg = tiny_config();
        // A huge step size destroys tracking immediately; the near-unity
        // factor then flags it.
        cfg.optim.lr_tracking = 5.0;
        cfg.slam.divergence_factor = 1.0 + 1e-9;
        let opts = SlamOptions::from_config(&cfg);
        let r = run_slam(&ds, &cfg, &opts).unwrap();
        assert!(!r.diverged.is_empty(), "expected at least one diverged frame");
        // Reverted frames keep their extrapolated initialization: frame 1
        // starts from frame 0's pose.
        if r.diverged.contains(&1) {
            assert_eq!(r.model.windows[1].center.translation, Vector3::zeros());
        }
    }

    #[test]
    fn ablations_change_the_right_knobs() {
        let data = tempfile::tempdir().unwrap();
        tiny_dataset(data.path());
        let ds = Dataset::load(data.path()).unwrap();
        let mut cfg = tiny_config();
        cfg.optim.tracking_iters = 4;
        cfg.optim.mapping_iters = 2;

        let mut opts = SlamOptions::from_config(&cfg);
        opts.ablate_tonemap = true;
        let r = run_slam(&ds, &cfg, &opts).unwrap();
        let ident: Vec<f64> = (0..crate::imaging::CRF_SIZE)
            .map(|k| k as f64 / (crate::imaging::CRF_SIZE - 1) as f64)
            .collect();
        assert_eq!(r.model.tone.crf, ident);
        assert!(r.model.tone.log_dt.iter().all(|&d| d == (0.5f64 / 30.0).ln()));
        assert!(r.model.tone.log_wb.iter().all(|&w| w == [0.0; 3]));

        let mut opts = SlamOptions::from_config(&cfg);
        opts.ablate_blur = true;
        let r = run_slam(&ds, &cfg, &opts).unwrap();
        for w in &r.model.windows {
            assert_eq!(w.velocity.rot, Vector3::zeros());
            assert_eq!(w.velocity.trans, Vector3::zeros());
        }

        let mut opts = SlamOptions::from_config(&cfg);
        opts.ablate_traj = true;
        let r = run_slam(&ds, &cfg, &opts).unwrap();
        assert!(r.losses.iter().all(|row| row.l_traj == 0.0));
        // log_a never optimized under the trajectory ablation.
        assert_eq!(r.model.log_a, (30.0f64 / 2.0).ln());
    }

    #[test]
    fn crf_inverse_inverts_the_projected_grid() {
        let tone = ToneMapper::new(vec![0.0]);
        for &v in &[0.0, 0.1, 0.33, 0.5, 0.77, 1.0] {
            let c = crf_inverse(&tone.crf, v);
            let (back, _, _) = crate::imaging::response(&tone.crf, c);
            assert!((back - v).abs() < 1e-12, "v={v} c={c} back={back}");
        }
    }
}

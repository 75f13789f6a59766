//! Synthetic degraded-sequence generator.
//!
//! Produces RGB-D sequences with known ground truth by rendering a procedural
//! voxel scene along an analytic camera path and simulating the capture
//! process: per-frame auto exposure (exposure value from the median gray),
//! a shutter schedule mapping exposure to shutter openness, motion blur by
//! averaging many sub-exposure renders, and Reinhard tone mapping to 8-bit.
//!
//! The physical exposure time of frame `i` is `dt_i = sv_i / fps`; it both
//! spans the blur window and scales radiance before the response curve, so a
//! single learned duration can explain each frame exactly. Scene radiance is
//! globally calibrated so `dt * radiance` stays within the response grid's
//! domain (see [`RADIANCE_KNEE`]).
//!
//! By default blur averages radiance before tone mapping. The `blur_ldr`
//! switch instead averages tone-mapped frames (cameras that blur in display
//! space do not exist, but renderers that do); sequences made that way are
//! deliberately not exactly representable by the forward model.

use std::f64::consts::PI;
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use rand::Rng;
use thiserror::Error;

use crate::dataset::{
    self, create_layout, DatasetError, DatasetMeta, FrameMeta,
};
use crate::geometry::{
    write_trajectory, CameraIntrinsics, ExposureWindow, GeometryError, Pose,
    TrajectoryPoint, Twist,
};
use crate::img::{
    write_depth_png, write_ldr_png, write_pfm, HdrImage, ImgError, LdrImage, PixelSet,
};
use crate::map::VoxelMap;
use crate::seedstream;

/// Display gamma of the simulated camera's tone curve.
pub const REINHARD_GAMMA: f64 = 2.2;

/// Luma weights (Rec. 601) for the auto-exposure median.
pub const GRAY_WEIGHTS: [f64; 3] = [0.299, 0.587, 0.114];

/// Largest `dt * radiance` the generator allows. Scene radiance is scaled so
/// the brightest exposed value lands here, keeping every observation inside
/// the learnable response grid's [0, 1] domain with a little headroom for the
/// curve to finish its rise to 1.
pub const RADIANCE_KNEE: f64 = 0.98;

/// Exposed value whose Reinhard output is exactly mid-gray:
/// `x* = 0.5^2.2 / (1 - 0.5^2.2)`.
pub fn ae_target() -> f64 {
    let y = 0.5f64.powf(REINHARD_GAMMA);
    y / (1.0 - y)
}

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("unknown scene `{0}` (available: room, edge)")]
    UnknownScene(String),
    #[error("frame {0} has non-positive median gray; cannot auto-expose")]
    BlackFrame(usize),
    #[error("bad sequence spec: {0}")]
    BadSpec(String),
    #[error(transparent)]
    Dataset(#[from] DatasetError),
    #[error(transparent)]
    Img(#[from] ImgError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// What to generate.
#[derive(Debug, Clone)]
pub struct SequenceSpec {
    pub scene: String,
    pub n_frames: usize,
    pub fps: f64,
    pub width: usize,
    pub height: usize,
    /// Sub-exposure renders averaged per frame (≥ 33 when blur is on).
    pub substeps: usize,
    pub blur: bool,
    pub autoexposure: bool,
    pub blur_ldr: bool,
    pub seed: u64,
}

impl SequenceSpec {
    pub fn new(scene: &str) -> Self {
        SequenceSpec {
            scene: scene.to_string(),
            n_frames: 60,
            fps: 30.0,
            width: 96,
            height: 72,
            substeps: 33,
            blur: true,
            autoexposure: true,
            blur_ldr: false,
            seed: 7,
        }
    }

    fn validate(&self) -> Result<(), SynthError> {
        if self.n_frames == 0 {
            return Err(SynthError::BadSpec("n_frames must be positive".into()));
        }
        if !(self.fps > 0.0) {
            return Err(SynthError::BadSpec("fps must be positive".into()));
        }
        if self.width < 8 || self.height < 8 {
            return Err(SynthError::BadSpec("image must be at least 8x8".into()));
        }
        if self.blur && self.substeps < 33 {
            return Err(SynthError::BadSpec(format!(
                "blur quadrature needs >= 33 substeps, got {}",
                self.substeps
            )));
        }
        Ok(())
    }
}

/// Ground truth the generator hands back alongside the files it wrote.
#[derive(Debug, Clone)]
pub struct GeneratedSequence {
    pub meta: DatasetMeta,
    /// The (radiance-calibrated) scene the frames were rendered from.
    pub scene: VoxelMap,
    /// Per-frame exposure windows: true center pose, velocity, and duration.
    pub windows: Vec<ExposureWindow>,
}

// ---------------------------------------------------------------------------
// Tone simulation
// ---------------------------------------------------------------------------

/// Reinhard response on the exposed value `x = dt * radiance`, in [0, 1).
pub fn reinhard01(x: f64) -> f64 {
    (x / (x + 1.0)).powf(1.0 / REINHARD_GAMMA)
}

/// 8-bit Reinhard tone mapping of one HDR pixel.
pub fn reinhard_ldr(hdr: [f64; 3], dt: f64) -> [u8; 3] {
    let mut out = [0u8; 3];
    for ch in 0..3 {
        out[ch] = crate::img::quantize_u8(reinhard01(dt * hdr[ch]));
    }
    out
}

fn gray(px: [f64; 3]) -> f64 {
    GRAY_WEIGHTS[0] * px[0] + GRAY_WEIGHTS[1] * px[1] + GRAY_WEIGHTS[2] * px[2]
}

/// Lower median (index `(n-1)/2` of the sorted values).
fn median_gray(img: &HdrImage) -> f64 {
    let mut grays: Vec<f64> = img.data.iter().map(|&p| gray(p)).collect();
    let k = (grays.len() - 1) / 2;
    let (_, m, _) = grays.select_nth_unstable_by(k, |a, b| a.total_cmp(b));
    *m
}

/// Exposure value that would map the frame's median gray to mid-gray:
/// `2^EV = x* / median`.
pub fn auto_exposure_ev(img: &HdrImage) -> Result<f64, SynthError> {
    let m = median_gray(img);
    if !(m > 0.0) {
        return Err(SynthError::BlackFrame(usize::MAX));
    }
    Ok((ae_target() / m).log2())
}

/// Shutter values from exposure values: affine in `2^EV`, normalized so the
/// longest exposure gets SV = 1 and the shortest SV = 0.1 exactly. A constant
/// EV sequence degenerates to the midpoint SV = 0.55 for every frame.
/// Returns `(sv, sv_gain, sv_bias)` with `sv_i = sv_gain * 2^EV_i + sv_bias`.
pub fn shutter_schedule(evs: &[f64]) -> (Vec<f64>, f64, f64) {
    assert!(!evs.is_empty());
    let t: Vec<f64> = evs.iter().map(|ev| ev.exp2()).collect();
    let mn = t.iter().cloned().fold(f64::INFINITY, f64::min);
    let mx = t.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(mx - mn > 1e-12 * mx.abs().max(1.0)) {
        return (vec![0.55; evs.len()], 0.0, 0.55);
    }
    let span = mx - mn;
    // (t - mn) / span hits 0 and 1 exactly at the extremes, which keeps the
    // endpoint shutter values exactly 0.1 and 1.0.
    let sv: Vec<f64> = t.iter().map(|&x| 0.1 + 0.9 * ((x - mn) / span)).collect();
    let gain = 0.9 / span;
    let bias = 0.1 - gain * mn;
    (sv, gain, bias)
}

/// The generator's response curve as a 256-sample grid over exposed values
/// [0, 1]: Reinhard up to [`RADIANCE_KNEE`], then a straight rise to 1 (the
/// data never reaches that tail, so any monotone completion is equivalent).
pub fn reinhard_crf_grid() -> Vec<f64> {
    let rk = reinhard01(RADIANCE_KNEE);
    (0..crate::imaging::CRF_SIZE)
        .map(|j| {
            let x = j as f64 / (crate::imaging::CRF_SIZE - 1) as f64;
            if x <= RADIANCE_KNEE {
                reinhard01(x)
            } else {
                rk + (x - RADIANCE_KNEE) * (1.0 - rk) / (1.0 - RADIANCE_KNEE)
            }
        })
        .collect()
}

// ---------------------------------------------------------------------------
// Scenes and camera paths
// ---------------------------------------------------------------------------

fn smoothstep01(x: f64) -> f64 {
    let x = x.clamp(0.0, 1.0);
    x * x * (3.0 - 2.0 * x)
}

/// Camera pose at time `t` for a scene's built-in path. Paths are smooth and
/// defined for all `t` (blur windows extend slightly past frame times).
fn path_pose(scene: &str, t: f64) -> Pose {
    match scene {
        "room" => {
            // Hand-held style: dominant yaw pan with gentle pitch and a slow
            // positional orbit. Amplitudes ramp in over the first half second
            // so the sequence starts at rest (matching the tracker's static
            // bootstrap of frame 0).
            let w = smoothstep01(t / 0.5);
            let yaw = w * 0.9 * (2.0 * PI * t / 3.0 + 0.4).sin();
            let pitch = w * 0.16 * (2.0 * PI * t / 5.0 + 1.1).sin();
            let pos = Vector3::new(
                w * 0.7 * (2.0 * PI * t / 7.0).sin(),
                w * 0.12 * (2.0 * PI * t / 6.1 + 0.5).sin(),
                w * 0.5 * ((2.0 * PI * t / 7.0).cos() - 1.0),
            );
            let rot = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), yaw)
                * UnitQuaternion::from_axis_angle(&Vector3::x_axis(), pitch);
            Pose::new(rot, pos)
        }
        "edge" => {
            // Constant lateral translation in front of a two-tone wall; the
            // analytic blur extent is velocity * dt * fx / wall distance.
            Pose::new(UnitQuaternion::identity(), Vector3::new(4.0 * t, 0.0, 0.0))
        }
        _ => unreachable!("scene validated before path evaluation"),
    }
}

/// Velocity (world-frame twist) of the path at `t`, by central differences.
fn path_twist(scene: &str, t: f64) -> Twist {
    let h = 1e-4;
    let a = path_pose(scene, t - h);
    let b = path_pose(scene, t + h);
    let rel = b.rotation * a.rotation.inverse();
    Twist {
        rot: rel.scaled_axis() / (2.0 * h),
        trans: (b.translation - a.translation) / (2.0 * h),
    }
}

fn build_scene(name: &str, seed: u64) -> Result<VoxelMap, SynthError> {
    match name {
        "room" => Ok(build_room(seed)),
        "edge" => Ok(build_edge()),
        other => Err(SynthError::UnknownScene(other.to_string())),
    }
}

/// Empty space: raw density so low that softplus underflows to exactly zero.
const EMPTY_RAW: f64 = -750.0;

/// Textured box room. Walls carry a checker texture and a strong brightness
/// gradient along +x (so panning changes the median gray and with it the
/// simulated auto exposure); the interior holds colored spheres.
fn build_room(seed: u64) -> VoxelMap {
    let n = 64;
    let half = 3.2;
    let mut map = VoxelMap::uniform(
        [n, n, n],
        Vector3::new(-half, -half, -half),
        Vector3::new(half, half, half),
        48,
        0.05,
        8.0,
        EMPTY_RAW,
        [0.0; 3],
    );
    let mut rng = seedstream::stream(seed, "synthgen/room");
    struct Ball {
        c: Vector3<f64>,
        r: f64,
        color: [f64; 3],
    }
    let balls: Vec<Ball> = (0..30)
        .map(|_| {
            // Keep spheres clear of the camera orbit near the origin.
            let c = loop {
                let c = Vector3::new(
                    rng.gen_range(-2.4..2.4),
                    rng.gen_range(-2.4..2.4),
                    rng.gen_range(-2.4..2.4),
                );
                if c.norm() > 1.7 {
                    break c;
                }
            };
            Ball {
                c,
                r: rng.gen_range(0.18..0.45),
                color: [
                    rng.gen_range(0.15..2.2),
                    rng.gen_range(0.15..2.2),
                    rng.gen_range(0.15..2.2),
                ],
            }
        })
        .collect();

    for iz in 0..n {
        for iy in 0..n {
            for ix in 0..n {
                let idx = (iz * n + iy) * n + ix;
                let p = map.node_position(ix, iy, iz);
                // Four node layers (~0.4 m of trilinear support): thick
                // enough that a 48-sample march can never step across a wall
                // without landing inside it.
                let edge = ix < 4 || iy < 4 || iz < 4 || ix >= n - 4 || iy >= n - 4 || iz >= n - 4;
                if edge {
                    // Walls: checker texture, per-axis tint, x-gradient.
                    let f = 1.4;
                    let checker = ((p.x * f).floor() + (p.y * f).floor() + (p.z * f).floor())
                        .rem_euclid(2.0);
                    let tex = if checker < 1.0 { 0.45 } else { 1.0 };
                    let grad = 0.3 + 0.9 * (p.x + half) / (2.0 * half);
                    let tint = [
                        0.9 + 0.25 * (p.y * 0.7).sin(),
                        0.85 + 0.2 * (p.z * 0.9).cos(),
                        0.8 + 0.3 * (p.x * 0.5).sin(),
                    ];
                    map.density_raw[idx] = 12.0;
                    for ch in 0..3 {
                        map.color_raw[3 * idx + ch] = (tex * grad * tint[ch]).ln();
                    }
                    continue;
                }
                if let Some(b) = balls
                    .iter()
                    .find(|b| (p - b.c).norm() < b.r)
                {
                    map.density_raw[idx] = 10.0;
                    for ch in 0..3 {
                        map.color_raw[3 * idx + ch] = b.color[ch].ln();
                    }
                }
            }
        }
    }
    map
}

/// A sharp two-tone wall: dark on x<0, bright on x>0, facing the camera at
/// z≈3. High x-resolution keeps the unblurred edge under ~1 px wide.
fn build_edge() -> VoxelMap {
    let (nx, ny, nz) = (160, 4, 16);
    let half = 3.2;
    let mut map = VoxelMap::uniform(
        [nx, ny, nz],
        Vector3::new(-half, -half, -half),
        Vector3::new(half, half, half),
        48,
        0.05,
        10.0,
        EMPTY_RAW,
        [0.0; 3],
    );
    for iz in nz - 2..nz {
        for iy in 0..ny {
            for ix in 0..nx {
                let idx = (iz * ny + iy) * nx + ix;
                let p = map.node_position(ix, iy, iz);
                let v: f64 = if p.x < 0.0 { 0.12 } else { 2.2 };
                map.density_raw[idx] = 12.0;
                for ch in 0..3 {
                    map.color_raw[3 * idx + ch] = v.ln();
                }
            }
        }
    }
    map
}

// ---------------------------------------------------------------------------
// Generation
// ---------------------------------------------------------------------------

/// Mean radiance over `substeps` renders spanning `[t - dt/2, t + dt/2]`.
fn blur_radiance(
    scene: &VoxelMap,
    scene_name: &str,
    intr: &CameraIntrinsics,
    t: f64,
    dt: f64,
    substeps: usize,
) -> HdrImage {
    let px = PixelSet::full(intr.width, intr.height);
    let mut mean = HdrImage::new(intr.width, intr.height);
    let n = substeps.max(1);
    for j in 0..n {
        let u = if n == 1 { 0.5 } else { j as f64 / (n - 1) as f64 };
        let pose = path_pose(scene_name, t - 0.5 * dt + u * dt);
        let rendered = scene.render_pixels(&pose, intr, &px);
        for (m, r) in mean.data.iter_mut().zip(&rendered) {
            for ch in 0..3 {
                m[ch] += r.color[ch] / n as f64;
            }
        }
    }
    mean
}

/// Mean of tone-mapped substep renders (the `blur_ldr` order).
fn blur_ldr_image(
    scene: &VoxelMap,
    scene_name: &str,
    intr: &CameraIntrinsics,
    t: f64,
    dt: f64,
    substeps: usize,
) -> LdrImage {
    let px = PixelSet::full(intr.width, intr.height);
    let mut mean = LdrImage::new(intr.width, intr.height);
    let n = substeps.max(1);
    for j in 0..n {
        let u = if n == 1 { 0.5 } else { j as f64 / (n - 1) as f64 };
        let pose = path_pose(scene_name, t - 0.5 * dt + u * dt);
        let rendered = scene.render_pixels(&pose, intr, &px);
        for (m, r) in mean.data.iter_mut().zip(&rendered) {
            for ch in 0..3 {
                m[ch] += reinhard01(dt * r.color[ch]) / n as f64;
            }
        }
    }
    mean
}

/// Rounds every channel through f32, matching what the PFM files store, so
/// metadata derived from radiance is bit-consistent with re-reading the files.
fn as_stored(img: &HdrImage) -> HdrImage {
    let mut out = img.clone();
    for p in out.data.iter_mut() {
        for ch in 0..3 {
            p[ch] = p[ch] as f32 as f64;
        }
    }
    out
}

/// Renders, degrades, and writes a full sequence; returns the ground truth.
pub fn generate(spec: &SequenceSpec, out: &Path) -> Result<GeneratedSequence, SynthError> {
    spec.validate()?;
    let mut scene = build_scene(&spec.scene, spec.seed)?;
    let intr = CameraIntrinsics::from_fov(spec.width, spec.height, 1.2);
    let n = spec.n_frames;

    // Pass 1: sharp renders at frame centers; preliminary exposure values.
    let mut sharp: Vec<HdrImage> = Vec::with_capacity(n);
    let mut depths = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / spec.fps;
        let pose = path_pose(&spec.scene, t);
        let (hdr, depth, _) = crate::map::RadianceMap::Voxel(scene.clone())
            .render_frame(&pose, &intr);
        sharp.push(hdr);
        depths.push(depth);
    }
    let evs0: Vec<f64> = if spec.autoexposure {
        sharp
            .iter()
            .enumerate()
            .map(|(i, img)| auto_exposure_ev(img).map_err(|_| SynthError::BlackFrame(i)))
            .collect::<Result<_, _>>()?
    } else {
        vec![0.0; n]
    };
    let (svs, _, _) = shutter_schedule(&evs0);
    let dts: Vec<f64> = svs.iter().map(|sv| sv / spec.fps).collect();

    // Pass 2: blurred radiance with the preliminary exposure times.
    let substeps = if spec.blur { spec.substeps } else { 1 };
    let mut blurred: Vec<HdrImage> = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / spec.fps;
        blurred.push(blur_radiance(&scene, &spec.scene, &intr, t, dts[i], substeps));
    }

    // Radiance calibration: brightest exposed value lands on the knee.
    let mut peak = 0.0f64;
    for i in 0..n {
        for img in [&sharp[i], &blurred[i]] {
            for p in &img.data {
                for ch in 0..3 {
                    peak = peak.max(dts[i] * p[ch]);
                }
            }
        }
    }
    let scale = if peak > 0.0 { RADIANCE_KNEE / peak } else { 1.0 };
    for img in sharp.iter_mut().chain(blurred.iter_mut()) {
        for p in img.data.iter_mut() {
            for ch in 0..3 {
                p[ch] *= scale;
            }
        }
    }
    for c in scene.color_raw.iter_mut() {
        *c += scale.ln();
    }

    // Final metadata from the stored (f32) sharp frames, so EV values are
    // exactly re-derivable from the PFM files. The shutter schedule is
    // invariant to the global radiance scale up to rounding; re-deriving
    // keeps everything consistent with what lands on disk.
    let stored: Vec<HdrImage> = sharp.iter().map(as_stored).collect();
    let evs: Vec<f64> = if spec.autoexposure {
        stored
            .iter()
            .enumerate()
            .map(|(i, img)| auto_exposure_ev(img).map_err(|_| SynthError::BlackFrame(i)))
            .collect::<Result<_, _>>()?
    } else {
        vec![0.0; n]
    };
    let (svs, sv_gain, sv_bias) = shutter_schedule(&evs);
    let dts: Vec<f64> = svs.iter().map(|sv| sv / spec.fps).collect();

    // Write out.
    create_layout(out)?;
    let mut trajectory = Vec::with_capacity(n);
    let mut windows = Vec::with_capacity(n);
    for i in 0..n {
        let t = i as f64 / spec.fps;
        let pose = path_pose(&spec.scene, t);
        trajectory.push(TrajectoryPoint { t, pose: pose.clone() });
        windows.push(
            ExposureWindow::new(i, t, dts[i], pose, path_twist(&spec.scene, t))
                .expect("schedule keeps durations positive"),
        );

        let mut rgb = LdrImage::new(spec.width, spec.height);
        if spec.blur_ldr && spec.blur {
            rgb = blur_ldr_image(&scene, &spec.scene, &intr, t, dts[i], substeps);
        } else {
            for (o, p) in rgb.data.iter_mut().zip(&blurred[i].data) {
                for ch in 0..3 {
                    o[ch] = reinhard01(dts[i] * p[ch]);
                }
            }
        }
        write_ldr_png(&dataset::rgb_path(out, i), &rgb)?;

        let mut rgb_sharp = LdrImage::new(spec.width, spec.height);
        for (o, p) in rgb_sharp.data.iter_mut().zip(&sharp[i].data) {
            for ch in 0..3 {
                o[ch] = reinhard01(dts[i] * p[ch]);
            }
        }
        write_ldr_png(&dataset::rgb_sharp_path(out, i), &rgb_sharp)?;
        write_pfm(&dataset::hdr_sharp_path(out, i), &sharp[i])?;
        write_depth_png(&dataset::depth_path(out, i), &depths[i])?;
    }
    write_trajectory(&dataset::groundtruth_path(out), &trajectory)?;

    let meta = DatasetMeta {
        fps: spec.fps,
        intrinsics: intr,
        seed: spec.seed,
        gray_weights: GRAY_WEIGHTS,
        sv_gain,
        sv_bias,
        frames: (0..n)
            .map(|i| FrameMeta { ev: evs[i], sv: svs[i], dt: dts[i] })
            .collect(),
    };
    dataset::write_meta(out, &meta)?;

    Ok(GeneratedSequence { meta, scene, windows })
}

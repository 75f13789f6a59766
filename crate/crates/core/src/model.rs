//! The full inverse problem state: radiance map, tone mapping, per-frame
//! exposure windows, and the trajectory-smoothness rate.
//!
//! One frame's exposure duration appears in two places: the tone mapper's
//! `log_dt` (brightness) and the window's `[t_start, t_end]` span (blur).
//! `log_dt` is the single source of truth; call
//! [`Model::sync_windows_to_tone`] after changing it so the geometry follows.
//!
//! Parameter updates for window poses go through
//! [`Model::apply_window_deltas`], which retracts the rotation delta onto the
//! quaternion manifold instead of updating components directly.

use nalgebra::{UnitQuaternion, Vector3};

use crate::geometry::{CameraIntrinsics, ExposureWindow, Pose};
use crate::imaging::{ToneGrads, ToneMapper};
use crate::img::{DepthImage, HdrImage, LdrImage, PixelSet};
use crate::map::{MapGrads, RadianceMap, RenderedPixel};

/// Per-window parameter count exposed to the optimizer: rotation tangent (3),
/// center translation (3), rotational velocity (3), translational velocity
/// (3). Duration is optimized through the tone mapper.
pub const WINDOW_OPT_DIM: usize = 12;

#[derive(Debug, Clone)]
pub struct Model {
    pub map: RadianceMap,
    pub tone: ToneMapper,
    pub windows: Vec<ExposureWindow>,
    /// Log of the trajectory interpolation rate (1/s); `exp(log_a) = fps / 2`
    /// makes constant-velocity motion cost-free.
    pub log_a: f64,
    pub intrinsics: CameraIntrinsics,
    pub fps: f64,
}

/// Gradient buffers matching [`Model`]'s parameters. Window entries follow
/// the [`WINDOW_OPT_DIM`] layout; the log-duration column of the window
/// parameterization is folded into `tone.log_dt` by the objective.
#[derive(Debug, Clone)]
pub struct Gradients {
    pub map: MapGrads,
    pub tone: ToneGrads,
    pub windows: Vec<[f64; WINDOW_OPT_DIM]>,
    pub log_a: f64,
}

impl Gradients {
    pub fn zero(&mut self) {
        match &mut self.map {
            MapGrads::Voxel(g) => g.zero(),
            MapGrads::Gaussian(g) => g.zero(),
        }
        self.tone.zero();
        self.windows.iter_mut().for_each(|w| *w = [0.0; WINDOW_OPT_DIM]);
        self.log_a = 0.0;
    }
}

impl Model {
    pub fn new(
        map: RadianceMap,
        tone: ToneMapper,
        windows: Vec<ExposureWindow>,
        intrinsics: CameraIntrinsics,
        fps: f64,
    ) -> Self {
        assert_eq!(tone.n_frames(), windows.len());
        Model {
            map,
            tone,
            windows,
            log_a: (fps / 2.0).ln(),
            intrinsics,
            fps,
        }
    }

    pub fn n_frames(&self) -> usize {
        self.windows.len()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            map: self.map.zero_grads(),
            tone: self.tone.zero_grads(),
            windows: vec![[0.0; WINDOW_OPT_DIM]; self.n_frames()],
            log_a: 0.0,
        }
    }

    /// Subtract an optimizer delta from one window's parameters. The rotation
    /// block applies by left retraction, matching the gradient convention.
    pub fn apply_window_deltas(&mut self, frame: usize, d: &[f64; WINDOW_OPT_DIM]) {
        let w = &mut self.windows[frame];
        let rot = UnitQuaternion::from_scaled_axis(-Vector3::new(d[0], d[1], d[2]))
            * w.center.rotation;
        let trans = w.center.translation - Vector3::new(d[3], d[4], d[5]);
        w.center = Pose::new(rot, trans);
        w.velocity.rot -= Vector3::new(d[6], d[7], d[8]);
        w.velocity.trans -= Vector3::new(d[9], d[10], d[11]);
    }

    /// Propagate the tone mapper's learned durations into the window spans.
    pub fn sync_windows_to_tone(&mut self) {
        for i in 0..self.windows.len() {
            let dt = self.tone.duration(i);
            self.windows[i]
                .set_duration(dt)
                .expect("exp(log_dt) is always a valid duration");
        }
    }

    /// Average radiance over the window's virtual-camera fan, then tone-map:
    /// the model's prediction of the observed (blurred, exposed) frame.
    pub fn render_blurred_ldr(&self, frame: usize, n_cam: usize) -> LdrImage {
        let intr = &self.intrinsics;
        let px = PixelSet::full(intr.width, intr.height);
        let colors = form_image(
            &self.map,
            &self.windows[frame],
            &self.tone,
            frame,
            intr,
            n_cam,
            &px,
        );
        let mut out = LdrImage::new(intr.width, intr.height);
        out.data.copy_from_slice(&colors);
        out
    }

    /// Sharp HDR radiance, depth, and opacity at the window center pose (no
    /// blur, no tone mapping). Background depth is stored as 0 (invalid).
    pub fn render_sharp_hdr(&self, frame: usize) -> (HdrImage, DepthImage, Vec<f64>) {
        let pose = self.windows[frame].pose_at_u(0.5);
        self.map.render_frame(&pose, &self.intrinsics)
    }
}

/// Mean radiance over per-camera renders, computed as deviations from the
/// first camera so that identical renders (a static window) average to the
/// first render bit-for-bit.
pub(crate) fn fan_mean(rendered: &[Vec<RenderedPixel>], n_px: usize) -> Vec<[f64; 3]> {
    let inv_n = 1.0 / rendered.len() as f64;
    let mut mean = vec![[0.0f64; 3]; n_px];
    for (p, m) in mean.iter_mut().enumerate() {
        let base = rendered[0][p].color;
        let mut acc = [0.0f64; 3];
        for r in rendered.iter().skip(1) {
            for ch in 0..3 {
                acc[ch] += r[p].color[ch] - base[ch];
            }
        }
        for ch in 0..3 {
            m[ch] = base[ch] + acc[ch] * inv_n;
        }
    }
    mean
}

/// The full image-formation forward model for one frame: render the map at
/// each virtual camera of the window, average the radiance, and tone-map.
pub fn form_image(
    map: &RadianceMap,
    window: &ExposureWindow,
    tone: &ToneMapper,
    frame: usize,
    intr: &CameraIntrinsics,
    n_cam: usize,
    pixels: &PixelSet,
) -> Vec<[f64; 3]> {
    let fan = window.virtual_camera_fan(n_cam);
    let rendered: Vec<Vec<RenderedPixel>> =
        fan.iter().map(|p| map.render_pixels(p, intr, pixels)).collect();
    fan_mean(&rendered, pixels.len())
        .into_iter()
        .map(|m| tone.apply(frame, m))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::Twist;
    use crate::map::VoxelMap;
    use approx::assert_relative_eq;

    fn tiny_model(n_frames: usize) -> Model {
        let map = RadianceMap::Voxel(VoxelMap::uniform(
            [4, 4, 4],
            Vector3::new(-2.0, -2.0, -2.0),
            Vector3::new(2.0, 2.0, 2.0),
            8,
            0.05,
            5.0,
            0.0,
            [0.0; 3],
        ));
        let fps = 30.0;
        let log_dt: Vec<f64> = (0..n_frames).map(|i| (0.01 + 0.001 * i as f64).ln()).collect();
        let windows: Vec<ExposureWindow> = (0..n_frames)
            .map(|i| {
                ExposureWindow::new(
                    i,
                    i as f64 / fps,
                    log_dt[i].exp(),
                    Pose::identity(),
                    Twist::zero(),
                )
                .unwrap()
            })
            .collect();
        let tone = ToneMapper::new(log_dt);
        Model::new(map, tone, windows, CameraIntrinsics::from_fov(8, 6, 1.2), fps)
    }

    #[test]
    fn window_delta_round_trip_restores_pose() {
        let mut m = tiny_model(2);
        let before = m.windows[1].clone();
        let d = [0.05, -0.02, 0.01, 0.3, -0.1, 0.2, 0.02, 0.0, -0.03, 0.1, 0.0, -0.2];
        m.apply_window_deltas(1, &d);
        let mut neg = d;
        neg.iter_mut().for_each(|x| *x = -*x);
        m.apply_window_deltas(1, &neg);
        assert_relative_eq!(
            m.windows[1].center.rotation.angle_to(&before.center.rotation),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            (m.windows[1].center.translation - before.center.translation).norm(),
            0.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            (m.windows[1].velocity.rot - before.velocity.rot).norm(),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn sync_propagates_durations() {
        let mut m = tiny_model(3);
        m.tone.log_dt[2] = (0.025f64).ln();
        m.sync_windows_to_tone();
        assert_relative_eq!(m.windows[2].duration(), 0.025, epsilon = 1e-15);
        // Midpoint unchanged by duration changes.
        assert_relative_eq!(m.windows[2].t_mid(), 2.0 / 30.0, epsilon = 1e-12);
    }

    #[test]
    fn log_a_initializes_to_half_fps() {
        let m = tiny_model(1);
        assert_relative_eq!(m.log_a.exp(), 15.0, epsilon = 1e-12);
    }
}

//! Radiance map backends.
//!
//! A radiance map stores HDR radiance (linear, unbounded) plus geometry, and
//! can render color / z-depth / opacity for a pixel from any camera pose,
//! together with exact gradients of those outputs with respect to both the
//! map parameters and the camera pose.
//!
//! Two backends share one interface:
//!
//! * [`VoxelMap`] — dense node grid with trilinear interpolation, rendered by
//!   ray marching with transmittance-weighted compositing.
//! * [`GaussianMap`] — isotropic 3-D Gaussians splatted front-to-back.
//!
//! Both store densities/opacities through softening activations (softplus /
//! sigmoid) and colors in log space, so every raw parameter is unconstrained.
//! Expected depth is the *unnormalized* transmittance-weighted sum, so
//! low-opacity pixels report small depths; consumers gate depth use on
//! opacity (see `losses`).

mod checkpoint;
mod gaussian;
mod voxel;

pub use checkpoint::{
    read_checkpoint, write_checkpoint, CheckpointError, ExtraArrays, CHECKPOINT_VERSION,
};
pub use gaussian::{GaussianGrads, GaussianMap};
pub use voxel::{VoxelGrads, VoxelMap};

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::img::{DepthImage, HdrImage, PixelSet};

/// Depth reported for pixels with exactly zero opacity (nothing along the
/// ray). The infinite sentinel can never masquerade as a real depth.
pub const BACKGROUND_DEPTH: f64 = f64::INFINITY;

/// Rendered quantities for one pixel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RenderedPixel {
    pub color: [f64; 3],
    /// Unnormalized expected z-depth (meters); [`BACKGROUND_DEPTH`] if
    /// `opacity == 0`.
    pub depth: f64,
    /// Sum of compositing weights, in `[0, 1]`.
    pub opacity: f64,
}

impl RenderedPixel {
    pub fn background() -> Self {
        RenderedPixel {
            color: [0.0; 3],
            depth: BACKGROUND_DEPTH,
            opacity: 0.0,
        }
    }
}

/// Upstream loss derivatives for one pixel's rendered outputs.
#[derive(Debug, Clone, Copy, Default)]
pub struct PixelUpstream {
    pub d_color: [f64; 3],
    pub d_depth: f64,
    pub d_opacity: f64,
}

/// Gradients with respect to the map parameters, shaped like the backend's
/// parameter arrays.
#[derive(Debug, Clone)]
pub enum MapGrads {
    Voxel(VoxelGrads),
    Gaussian(GaussianGrads),
}

/// Per-pixel inputs to [`RadianceMap::seed_from_depth`].
#[derive(Debug, Clone, Copy)]
pub struct SeedParams {
    /// Take every `stride`-th pixel (row-major).
    pub stride: usize,
    /// Seed only where current rendered opacity is below this.
    pub opacity_threshold: f64,
}

impl Default for SeedParams {
    fn default() -> Self {
        SeedParams {
            stride: 4,
            opacity_threshold: 0.5,
        }
    }
}

/// A renderable HDR radiance map (one of the two backends).
#[derive(Debug, Clone)]
pub enum RadianceMap {
    Voxel(VoxelMap),
    Gaussian(GaussianMap),
}

impl RadianceMap {
    pub fn backend_name(&self) -> &'static str {
        match self {
            RadianceMap::Voxel(_) => "voxel",
            RadianceMap::Gaussian(_) => "gaussian",
        }
    }

    pub fn zero_grads(&self) -> MapGrads {
        match self {
            RadianceMap::Voxel(m) => MapGrads::Voxel(m.zero_grads()),
            RadianceMap::Gaussian(m) => MapGrads::Gaussian(m.zero_grads()),
        }
    }

    /// Renders the listed pixels from `pose`. Output order matches
    /// `pixels.indices`.
    pub fn render_pixels(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        pixels: &PixelSet,
    ) -> Vec<RenderedPixel> {
        match self {
            RadianceMap::Voxel(m) => m.render_pixels(pose, intr, pixels),
            RadianceMap::Gaussian(m) => m.render_pixels(pose, intr, pixels),
        }
    }

    /// Accumulates `d(loss)/d(map params)` into `grads` and returns
    /// `d(loss)/d(pose tangent)` (world-frame rotation tangent, then
    /// translation), given upstream derivatives for each rendered pixel.
    ///
    /// `upstream` must be index-aligned with `pixels.indices`.
    pub fn render_pixels_grad(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        pixels: &PixelSet,
        upstream: &[PixelUpstream],
        grads: &mut MapGrads,
    ) -> [f64; 6] {
        assert_eq!(pixels.len(), upstream.len(), "upstream not pixel-aligned");
        match (self, grads) {
            (RadianceMap::Voxel(m), MapGrads::Voxel(g)) => {
                m.render_pixels_grad(pose, intr, pixels, upstream, g)
            }
            (RadianceMap::Gaussian(m), MapGrads::Gaussian(g)) => {
                m.render_pixels_grad(pose, intr, pixels, upstream, g)
            }
            _ => panic!("gradient buffer backend does not match map backend"),
        }
    }

    /// Renders a full frame (convenience over [`Self::render_pixels`]).
    pub fn render_frame(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
    ) -> (HdrImage, DepthImage, Vec<f64>) {
        let pixels = PixelSet::full(intr.width, intr.height);
        let rendered = self.render_pixels(pose, intr, &pixels);
        let mut color = HdrImage::new(intr.width, intr.height);
        let mut depth = DepthImage::new(intr.width, intr.height);
        let mut opacity = vec![0.0; intr.n_pixels()];
        for (i, r) in rendered.iter().enumerate() {
            color.data[i] = r.color;
            depth.data[i] = if r.depth.is_finite() { r.depth } else { 0.0 };
            opacity[i] = r.opacity;
        }
        (color, depth, opacity)
    }

    /// Claims map capacity for observed geometry the map does not yet cover:
    /// back-projects stride-sampled valid depth pixels and, where the current
    /// rendered opacity is below the threshold, writes density/primitives with
    /// the given radiance estimates. Returns the number of seeded pixels.
    pub fn seed_from_depth(
        &mut self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        depth: &DepthImage,
        radiance_estimate: &HdrImage,
        params: &SeedParams,
    ) -> usize {
        match self {
            RadianceMap::Voxel(m) => {
                m.seed_from_depth(pose, intr, depth, radiance_estimate, params)
            }
            RadianceMap::Gaussian(m) => {
                m.seed_from_depth(pose, intr, depth, radiance_estimate, params)
            }
        }
    }

    pub fn n_params(&self) -> usize {
        match self {
            RadianceMap::Voxel(m) => m.n_params(),
            RadianceMap::Gaussian(m) => m.n_params(),
        }
    }

    /// Mutable access to the i-th scalar parameter under a fixed flat order
    /// (voxel: densities then colors; gaussian: centers, log-scales, logits,
    /// log-colors). Used by finite-difference verification.
    pub fn param_mut(&mut self, i: usize) -> &mut f64 {
        match self {
            RadianceMap::Voxel(m) => {
                let nd = m.density_raw.len();
                if i < nd {
                    &mut m.density_raw[i]
                } else {
                    &mut m.color_raw[i - nd]
                }
            }
            RadianceMap::Gaussian(m) => {
                let (nc, ns, no) =
                    (m.centers.len(), m.log_scales.len(), m.opacity_logits.len());
                if i < nc {
                    &mut m.centers[i]
                } else if i < nc + ns {
                    &mut m.log_scales[i - nc]
                } else if i < nc + ns + no {
                    &mut m.opacity_logits[i - nc - ns]
                } else {
                    &mut m.log_colors[i - nc - ns - no]
                }
            }
        }
    }
}

impl MapGrads {
    /// Gradient of the i-th scalar parameter, matching the flat order of
    /// [`RadianceMap::param_mut`].
    pub fn grad_at(&self, i: usize) -> f64 {
        match self {
            MapGrads::Voxel(g) => {
                let nd = g.density_raw.len();
                if i < nd {
                    g.density_raw[i]
                } else {
                    g.color_raw[i - nd]
                }
            }
            MapGrads::Gaussian(g) => {
                let (nc, ns, no) =
                    (g.centers.len(), g.log_scales.len(), g.opacity_logits.len());
                if i < nc {
                    g.centers[i]
                } else if i < nc + ns {
                    g.log_scales[i - nc]
                } else if i < nc + ns + no {
                    g.opacity_logits[i - nc - ns]
                } else {
                    g.log_colors[i - nc - ns - no]
                }
            }
        }
    }
}

/// Numerically stable `ln(1 + e^x)`.
#[inline]
pub(crate) fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else if x < -30.0 {
        x.exp()
    } else {
        x.exp().ln_1p()
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Back-projects pixel `(ix, iy)` with z-depth `z` into world coordinates.
pub(crate) fn backproject(
    pose: &Pose,
    intr: &CameraIntrinsics,
    ix: usize,
    iy: usize,
    z: f64,
) -> Vector3<f64> {
    let d_cam = intr.ray_dir(ix, iy);
    let tau = z / d_cam.z; // distance along the unit ray with that z-depth
    pose.transform(&(d_cam * tau))
}

//! Isotropic Gaussian point-cloud radiance field.
//!
//! Each primitive has a world-space center, an isotropic scale (log-stored),
//! an opacity logit, and a log color. Projection is pinhole without a local
//! affine correction: a Gaussian at camera depth `z` with scale `s` covers
//! `sigma_u = s * fx / z` by `sigma_v = s * fy / z` pixels. Per pixel the
//! primitives are composited front to back in camera-depth order with
//! `alpha = min(o * exp(-e), ALPHA_MAX)` where
//! `e = ((du/sigma_u)^2 + (dv/sigma_v)^2) / 2`.
//!
//! Primitives behind `z <= Z_CULL` or with `e > E_CUTOFF` are skipped; the
//! alpha clamp and both cutoffs are treated as constants by the backward pass
//! (zero gradient through them). Depth renders as the alpha-weighted sum of
//! center depths, matching the voxel backend's unnormalized convention.

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::img::{DepthImage, HdrImage, PixelSet};

use super::{backproject, sigmoid, PixelUpstream, RenderedPixel, SeedParams};

const Z_CULL: f64 = 0.01;
const E_CUTOFF: f64 = 30.0;
const ALPHA_MAX: f64 = 0.9999;
/// Stop compositing once transmittance drops below this (applied identically
/// in the forward and backward passes; small enough that the truncated tail
/// is invisible to finite-difference checks).
const T_STOP: f64 = 1e-12;

#[derive(Debug, Clone)]
pub struct GaussianMap {
    /// World centers, 3 per primitive.
    pub centers: Vec<f64>,
    /// Log isotropic scale (meters) per primitive.
    pub log_scales: Vec<f64>,
    /// Opacity logit per primitive (sigmoid -> opacity).
    pub opacity_logits: Vec<f64>,
    /// Log radiance, 3 per primitive.
    pub log_colors: Vec<f64>,
    /// Opacity logit assigned to depth-seeded primitives.
    pub seed_opacity_logit: f64,
    /// Seeded scale = factor * stride * z / fx.
    pub seed_scale_factor: f64,
}

#[derive(Debug, Clone)]
pub struct GaussianGrads {
    pub centers: Vec<f64>,
    pub log_scales: Vec<f64>,
    pub opacity_logits: Vec<f64>,
    pub log_colors: Vec<f64>,
}

impl GaussianGrads {
    pub fn zero(&mut self) {
        for g in self
            .centers
            .iter_mut()
            .chain(self.log_scales.iter_mut())
            .chain(self.opacity_logits.iter_mut())
            .chain(self.log_colors.iter_mut())
        {
            *g = 0.0;
        }
    }
}

/// View-dependent per-primitive state shared by every pixel of one pose.
struct Prepared {
    /// Indices into the map, sorted by (camera depth, index).
    order: Vec<u32>,
    /// Camera-space centers for primitives in `order` (same ordering).
    z: Vec<f64>,
    u: Vec<f64>,
    v: Vec<f64>,
    sigma_u: Vec<f64>,
    sigma_v: Vec<f64>,
    opacity: Vec<f64>,
    color: Vec<[f64; 3]>,
}

impl GaussianMap {
    pub fn empty() -> Self {
        GaussianMap {
            centers: Vec::new(),
            log_scales: Vec::new(),
            opacity_logits: Vec::new(),
            log_colors: Vec::new(),
            seed_opacity_logit: 2.0,
            seed_scale_factor: 0.6,
        }
    }

    pub fn len(&self) -> usize {
        self.log_scales.len()
    }

    pub fn is_empty(&self) -> bool {
        self.log_scales.is_empty()
    }

    pub fn n_params(&self) -> usize {
        self.centers.len() + self.log_scales.len() + self.opacity_logits.len() + self.log_colors.len()
    }

    pub fn zero_grads(&self) -> GaussianGrads {
        GaussianGrads {
            centers: vec![0.0; self.centers.len()],
            log_scales: vec![0.0; self.log_scales.len()],
            opacity_logits: vec![0.0; self.opacity_logits.len()],
            log_colors: vec![0.0; self.log_colors.len()],
        }
    }

    pub fn push(&mut self, center: Vector3<f64>, log_scale: f64, opacity_logit: f64, log_color: [f64; 3]) {
        self.centers.extend_from_slice(&[center.x, center.y, center.z]);
        self.log_scales.push(log_scale);
        self.opacity_logits.push(opacity_logit);
        self.log_colors.extend_from_slice(&log_color);
    }

    fn center(&self, i: usize) -> Vector3<f64> {
        Vector3::new(self.centers[3 * i], self.centers[3 * i + 1], self.centers[3 * i + 2])
    }

    fn prepare(&self, pose: &Pose, intr: &CameraIntrinsics) -> Prepared {
        let n = self.len();
        let mut keep: Vec<(u32, f64)> = Vec::with_capacity(n);
        let rot_inv = pose.rotation.inverse();
        let mut cam = Vec::with_capacity(n);
        for i in 0..n {
            let mu_cam = rot_inv * (self.center(i) - pose.translation);
            cam.push(mu_cam);
            if mu_cam.z > Z_CULL {
                keep.push((i as u32, mu_cam.z));
            }
        }
        // Stable front-to-back order: by depth, index breaking ties.
        keep.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap().then(a.0.cmp(&b.0)));

        let m = keep.len();
        let mut p = Prepared {
            order: Vec::with_capacity(m),
            z: Vec::with_capacity(m),
            u: Vec::with_capacity(m),
            v: Vec::with_capacity(m),
            sigma_u: Vec::with_capacity(m),
            sigma_v: Vec::with_capacity(m),
            opacity: Vec::with_capacity(m),
            color: Vec::with_capacity(m),
        };
        for &(i, z) in &keep {
            let mu = cam[i as usize];
            let s = self.log_scales[i as usize].exp();
            p.order.push(i);
            p.z.push(z);
            p.u.push(intr.fx * mu.x / z + intr.cx);
            p.v.push(intr.fy * mu.y / z + intr.cy);
            p.sigma_u.push(s * intr.fx / z);
            p.sigma_v.push(s * intr.fy / z);
            p.opacity.push(sigmoid(self.opacity_logits[i as usize]));
            let lc = &self.log_colors[3 * i as usize..3 * i as usize + 3];
            p.color.push([lc[0].exp(), lc[1].exp(), lc[2].exp()]);
        }
        p
    }

    fn render_prepared(&self, p: &Prepared, pu: f64, pv: f64) -> RenderedPixel {
        let mut transmittance = 1.0;
        let mut color = [0.0f64; 3];
        let mut depth = 0.0;
        let mut opacity = 0.0;
        for k in 0..p.order.len() {
            if transmittance < T_STOP {
                break;
            }
            let du = pu - p.u[k];
            let dv = pv - p.v[k];
            let e = 0.5 * ((du / p.sigma_u[k]).powi(2) + (dv / p.sigma_v[k]).powi(2));
            if e > E_CUTOFF {
                continue;
            }
            let alpha = (p.opacity[k] * (-e).exp()).min(ALPHA_MAX);
            let w = transmittance * alpha;
            for ch in 0..3 {
                color[ch] += w * p.color[k][ch];
            }
            depth += w * p.z[k];
            opacity += w;
            transmittance *= 1.0 - alpha;
        }
        if opacity == 0.0 {
            RenderedPixel::background()
        } else {
            RenderedPixel {
                color,
                depth,
                opacity,
            }
        }
    }

    pub fn render_pixel(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        ix: usize,
        iy: usize,
    ) -> RenderedPixel {
        let p = self.prepare(pose, intr);
        self.render_prepared(&p, ix as f64 + 0.5, iy as f64 + 0.5)
    }

    pub fn render_pixels(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        pixels: &PixelSet,
    ) -> Vec<RenderedPixel> {
        let p = self.prepare(pose, intr);
        pixels
            .indices
            .iter()
            .map(|&i| {
                let (ix, iy) = (i as usize % intr.width, i as usize / intr.width);
                self.render_prepared(&p, ix as f64 + 0.5, iy as f64 + 0.5)
            })
            .collect()
    }

    /// Backward pass; see the voxel backend for the suffix recursion. Returns
    /// the pose-tangent gradient `[rot, trans]` and accumulates parameter
    /// gradients into `grads`.
    pub fn render_pixels_grad(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        pixels: &PixelSet,
        upstream: &[PixelUpstream],
        grads: &mut GaussianGrads,
    ) -> [f64; 6] {
        let p = self.prepare(pose, intr);
        let mut pose_grad = [0.0f64; 6];
        // Camera-frame gradients per prepared primitive, mapped to world at
        // the end (one rotation per primitive instead of one per sample).
        let mut g_mc: Vec<Vector3<f64>> = vec![Vector3::zeros(); p.order.len()];
        let mut hit_k: Vec<u32> = Vec::with_capacity(64);
        let mut hit_alpha: Vec<f64> = Vec::with_capacity(64);
        let mut hit_u: Vec<f64> = Vec::with_capacity(64);
        let mut hit_t: Vec<f64> = Vec::with_capacity(64);

        for (pk, &pix) in pixels.indices.iter().enumerate() {
            let up = &upstream[pk];
            if up.d_color == [0.0; 3] && up.d_depth == 0.0 && up.d_opacity == 0.0 {
                continue;
            }
            let (ix, iy) = (pix as usize % intr.width, pix as usize / intr.width);
            let (pu, pv) = (ix as f64 + 0.5, iy as f64 + 0.5);

            hit_k.clear();
            hit_alpha.clear();
            hit_u.clear();
            hit_t.clear();
            let mut transmittance = 1.0;
            for k in 0..p.order.len() {
                if transmittance < T_STOP {
                    break;
                }
                let du = pu - p.u[k];
                let dv = pv - p.v[k];
                let e = 0.5 * ((du / p.sigma_u[k]).powi(2) + (dv / p.sigma_v[k]).powi(2));
                if e > E_CUTOFF {
                    continue;
                }
                let alpha = (p.opacity[k] * (-e).exp()).min(ALPHA_MAX);
                let mut uw = up.d_opacity + up.d_depth * p.z[k];
                for ch in 0..3 {
                    uw += up.d_color[ch] * p.color[k][ch];
                }
                hit_k.push(k as u32);
                hit_alpha.push(alpha);
                hit_u.push(uw);
                hit_t.push(transmittance);
                transmittance *= 1.0 - alpha;
            }

            let mut suffix = 0.0;
            for h in (0..hit_k.len()).rev() {
                let k = hit_k[h] as usize;
                let alpha = hit_alpha[h];
                let t_i = hit_t[h];
                let w = t_i * alpha;
                let i = p.order[k] as usize;

                let d_alpha = t_i * (hit_u[h] - suffix);
                suffix = alpha * hit_u[h] + (1.0 - alpha) * suffix;

                // Color and direct depth paths flow regardless of the clamp.
                for ch in 0..3 {
                    grads.log_colors[3 * i + ch] += w * up.d_color[ch] * p.color[k][ch];
                }
                let mut d_z = w * up.d_depth;

                let o = p.opacity[k];
                let du = pu - p.u[k];
                let dv = pv - p.v[k];
                let e = 0.5 * ((du / p.sigma_u[k]).powi(2) + (dv / p.sigma_v[k]).powi(2));
                let expe = (-e).exp();
                if o * expe < ALPHA_MAX {
                    // d alpha / d o = exp(-e); d o / d logit = o (1 - o).
                    grads.opacity_logits[i] += d_alpha * expe * o * (1.0 - o);
                    // d alpha / d e = -alpha.
                    let d_e = -d_alpha * alpha;
                    let d_du = d_e * du / (p.sigma_u[k] * p.sigma_u[k]);
                    let d_dv = d_e * dv / (p.sigma_v[k] * p.sigma_v[k]);
                    let d_sig_u = -d_e * du * du / p.sigma_u[k].powi(3);
                    let d_sig_v = -d_e * dv * dv / p.sigma_v[k].powi(3);

                    // Scale path: sigma = s * f / z, d sigma / d log s = sigma.
                    grads.log_scales[i] += d_sig_u * p.sigma_u[k] + d_sig_v * p.sigma_v[k];

                    // Projection center path: u = fx x / z + cx (d du / d u_i = -1).
                    let z = p.z[k];
                    let d_u_center = -d_du;
                    let d_v_center = -d_dv;
                    g_mc[k].x += d_u_center * intr.fx / z;
                    g_mc[k].y += d_v_center * intr.fy / z;
                    // z appears in u, v, sigma_u, sigma_v:
                    // du_i/dz = -fx x / z^2 = -(u_i - cx)/z, dsigma/dz = -sigma/z.
                    d_z += d_u_center * (-(p.u[k] - intr.cx) / z)
                        + d_v_center * (-(p.v[k] - intr.cy) / z)
                        + d_sig_u * (-p.sigma_u[k] / z)
                        + d_sig_v * (-p.sigma_v[k] / z);
                }
                g_mc[k].z += d_z;
            }
        }

        // Map camera-frame center gradients to world parameters and the pose
        // tangent: mu_cam = R^T (mu_w - t).
        let r = pose.rotation;
        for k in 0..p.order.len() {
            if g_mc[k] == Vector3::zeros() {
                continue;
            }
            let i = p.order[k] as usize;
            let g_world = r * g_mc[k];
            grads.centers[3 * i] += g_world.x;
            grads.centers[3 * i + 1] += g_world.y;
            grads.centers[3 * i + 2] += g_world.z;
            pose_grad[3] -= g_world.x;
            pose_grad[4] -= g_world.y;
            pose_grad[5] -= g_world.z;
            let arm = self.center(i) - pose.translation;
            let rot = g_world.cross(&arm);
            pose_grad[0] += rot.x;
            pose_grad[1] += rot.y;
            pose_grad[2] += rot.z;
        }
        pose_grad
    }

    /// See [`super::RadianceMap::seed_from_depth`].
    pub fn seed_from_depth(
        &mut self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        depth: &DepthImage,
        radiance_estimate: &HdrImage,
        params: &SeedParams,
    ) -> usize {
        let px = PixelSet::strided(intr.width, intr.height, params.stride);
        let rendered = self.render_pixels(pose, intr, &px);
        let mut count = 0usize;
        for (k, &pix) in px.indices.iter().enumerate() {
            let (ix, iy) = (pix as usize % intr.width, pix as usize / intr.width);
            let z = depth.at(ix, iy);
            if z <= 0.0 || rendered[k].opacity >= params.opacity_threshold {
                continue;
            }
            let p = backproject(pose, intr, ix, iy, z);
            let scale = self.seed_scale_factor * params.stride as f64 * z / intr.fx;
            let c = radiance_estimate.at(ix, iy);
            let log_color = [
                c[0].max(1e-6).ln(),
                c[1].max(1e-6).ln(),
                c[2].max(1e-6).ln(),
            ];
            self.push(p, scale.max(1e-4).ln(), self.seed_opacity_logit, log_color);
            count += 1;
        }
        count
    }
}

//! Dense voxel-grid radiance field.
//!
//! Fields live on a node lattice spanning an axis-aligned box: `nx*ny*nz`
//! nodes, trilinear interpolation inside each cell, zero density outside the
//! box. Density is stored raw and activated with softplus; color is stored in
//! log space and activated with exp, so interpolation blends radiance
//! geometrically and stays positive.
//!
//! Rendering marches a fixed ladder of `n_samples` depths uniformly spaced in
//! `[near, far]` along each ray and composites
//! `alpha_i = 1 - exp(-sigma_i * delta)` front to back:
//! `C = sum_i T_i alpha_i c_i` with `T_i = prod_{j<i} (1 - alpha_j)`.
//! Samples outside the box are skipped. Intended use places cameras inside
//! the box (room-style scenes), so rays terminate on dense boundary regions;
//! a ray whose sample segment misses the box entirely renders background.
//!
//! The backward pass re-walks the ray and uses the standard suffix recursion
//! for compositing: with `u_i = dL/dw_i` and
//! `V_i = a_{i+1} u_{i+1} + (1 - a_{i+1}) V_{i+1}`, the alpha gradient is
//! `dL/da_i = T_i (u_i - V_i)`, which avoids dividing by `1 - a_i`.

use nalgebra::Vector3;

use crate::geometry::{CameraIntrinsics, Pose};
use crate::img::{DepthImage, HdrImage, PixelSet};

use super::{
    backproject, sigmoid, softplus, PixelUpstream, RenderedPixel, SeedParams,
};

#[derive(Debug, Clone)]
pub struct VoxelMap {
    pub nx: usize,
    pub ny: usize,
    pub nz: usize,
    pub bounds_min: Vector3<f64>,
    pub bounds_max: Vector3<f64>,
    /// Raw density per node (softplus -> sigma), x-fastest layout.
    pub density_raw: Vec<f64>,
    /// Log radiance per node, 3 channels interleaved.
    pub color_raw: Vec<f64>,
    /// Ray-marching sample count.
    pub n_samples: usize,
    /// Sample ladder range along the ray (meters).
    pub near: f64,
    pub far: f64,
    /// Raw density written by depth seeding.
    pub seed_density_raw: f64,
}

/// Gradient buffers shaped like [`VoxelMap`]'s parameter arrays.
#[derive(Debug, Clone)]
pub struct VoxelGrads {
    pub density_raw: Vec<f64>,
    pub color_raw: Vec<f64>,
}

impl VoxelGrads {
    pub fn zero(&mut self) {
        self.density_raw.iter_mut().for_each(|g| *g = 0.0);
        self.color_raw.iter_mut().for_each(|g| *g = 0.0);
    }
}

/// Trilinear cell lookup: corner indices, weights, and the chain factors for
/// spatial gradients.
struct TriCell {
    idx: [usize; 8],
    w: [f64; 8],
    f: [f64; 3],
    /// d(grid coordinate)/d(world coordinate) per axis.
    scale: [f64; 3],
}

impl VoxelMap {
    /// Uniform-valued map (mostly for tests and procedural scenes).
    #[allow(clippy::too_many_arguments)]
    pub fn uniform(
        resolution: [usize; 3],
        bounds_min: Vector3<f64>,
        bounds_max: Vector3<f64>,
        n_samples: usize,
        near: f64,
        far: f64,
        density_raw: f64,
        log_color: [f64; 3],
    ) -> Self {
        let [nx, ny, nz] = resolution;
        assert!(nx >= 2 && ny >= 2 && nz >= 2, "need at least 2 nodes per axis");
        assert!(far > near && near > 0.0, "need 0 < near < far");
        let n = nx * ny * nz;
        let mut color_raw = Vec::with_capacity(3 * n);
        for _ in 0..n {
            color_raw.extend_from_slice(&log_color);
        }
        VoxelMap {
            nx,
            ny,
            nz,
            bounds_min,
            bounds_max,
            density_raw: vec![density_raw; n],
            color_raw,
            n_samples,
            near,
            far,
            seed_density_raw: 6.0,
        }
    }

    pub fn n_nodes(&self) -> usize {
        self.nx * self.ny * self.nz
    }

    pub fn n_params(&self) -> usize {
        self.density_raw.len() + self.color_raw.len()
    }

    pub fn zero_grads(&self) -> VoxelGrads {
        VoxelGrads {
            density_raw: vec![0.0; self.density_raw.len()],
            color_raw: vec![0.0; self.color_raw.len()],
        }
    }

    #[inline]
    pub fn node_index(&self, ix: usize, iy: usize, iz: usize) -> usize {
        (iz * self.ny + iy) * self.nx + ix
    }

    /// World position of a lattice node.
    pub fn node_position(&self, ix: usize, iy: usize, iz: usize) -> Vector3<f64> {
        let e = self.bounds_max - self.bounds_min;
        Vector3::new(
            self.bounds_min.x + e.x * ix as f64 / (self.nx - 1) as f64,
            self.bounds_min.y + e.y * iy as f64 / (self.ny - 1) as f64,
            self.bounds_min.z + e.z * iz as f64 / (self.nz - 1) as f64,
        )
    }

    #[inline]
    fn inside(&self, p: &Vector3<f64>) -> bool {
        p.x >= self.bounds_min.x
            && p.x <= self.bounds_max.x
            && p.y >= self.bounds_min.y
            && p.y <= self.bounds_max.y
            && p.z >= self.bounds_min.z
            && p.z <= self.bounds_max.z
    }

    fn cell(&self, p: &Vector3<f64>) -> TriCell {
        let n = [self.nx, self.ny, self.nz];
        let mut i0 = [0usize; 3];
        let mut f = [0.0f64; 3];
        let mut scale = [0.0f64; 3];
        for a in 0..3 {
            let extent = self.bounds_max[a] - self.bounds_min[a];
            let s = (n[a] - 1) as f64 / extent;
            let g = ((p[a] - self.bounds_min[a]) * s).clamp(0.0, (n[a] - 1) as f64);
            let i = (g.floor() as usize).min(n[a] - 2);
            i0[a] = i;
            f[a] = g - i as f64;
            scale[a] = s;
        }
        let wx = [1.0 - f[0], f[0]];
        let wy = [1.0 - f[1], f[1]];
        let wz = [1.0 - f[2], f[2]];
        let mut idx = [0usize; 8];
        let mut w = [0.0f64; 8];
        for bz in 0..2 {
            for by in 0..2 {
                for bx in 0..2 {
                    let j = (bz << 2) | (by << 1) | bx;
                    idx[j] = self.node_index(i0[0] + bx, i0[1] + by, i0[2] + bz);
                    w[j] = wx[bx] * wy[by] * wz[bz];
                }
            }
        }
        TriCell { idx, w, f, scale }
    }

    #[inline]
    fn gather(&self, cell: &TriCell, field: &[f64], stride: usize, offset: usize) -> [f64; 8] {
        let mut v = [0.0; 8];
        for j in 0..8 {
            v[j] = field[cell.idx[j] * stride + offset];
        }
        v
    }

    /// True if the sample segment `[near, far]` along the ray can intersect
    /// the box (slab test).
    fn segment_hits_box(&self, o: &Vector3<f64>, d: &Vector3<f64>) -> bool {
        let mut tmin = self.near;
        let mut tmax = self.far;
        for a in 0..3 {
            if d[a].abs() < 1e-15 {
                if o[a] < self.bounds_min[a] || o[a] > self.bounds_max[a] {
                    return false;
                }
                continue;
            }
            let inv = 1.0 / d[a];
            let t1 = (self.bounds_min[a] - o[a]) * inv;
            let t2 = (self.bounds_max[a] - o[a]) * inv;
            let (lo, hi) = if t1 <= t2 { (t1, t2) } else { (t2, t1) };
            tmin = tmin.max(lo);
            tmax = tmax.min(hi);
            if tmax < tmin {
                return false;
            }
        }
        true
    }

    pub fn render_pixel(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        ix: usize,
        iy: usize,
    ) -> RenderedPixel {
        let d_cam = intr.ray_dir(ix, iy);
        let dz = d_cam.z;
        let d_w = pose.rotation * d_cam;
        let o = pose.translation;
        if !self.segment_hits_box(&o, &d_w) {
            return RenderedPixel::background();
        }
        let delta = (self.far - self.near) / self.n_samples as f64;
        let mut transmittance = 1.0;
        let mut color = [0.0f64; 3];
        let mut depth = 0.0;
        let mut opacity = 0.0;
        for i in 0..self.n_samples {
            let tau = self.near + (i as f64 + 0.5) * delta;
            let p = o + d_w * tau;
            if !self.inside(&p) {
                continue;
            }
            let cell = self.cell(&p);
            let raw_d = interp(&self.gather(&cell, &self.density_raw, 1, 0), cell.f);
            let sigma = softplus(raw_d);
            let alpha = 1.0 - (-sigma * delta).exp();
            if alpha <= 0.0 {
                continue;
            }
            let w = transmittance * alpha;
            for ch in 0..3 {
                let log_c = interp(&self.gather(&cell, &self.color_raw, 3, ch), cell.f);
                color[ch] += w * log_c.exp();
            }
            depth += w * tau * dz;
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

    pub fn render_pixels(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        pixels: &PixelSet,
    ) -> Vec<RenderedPixel> {
        pixels
            .indices
            .iter()
            .map(|&i| {
                let (ix, iy) = (i as usize % intr.width, i as usize / intr.width);
                self.render_pixel(pose, intr, ix, iy)
            })
            .collect()
    }

    /// Backward pass for the listed pixels. Accumulates parameter gradients
    /// into `grads` and returns the pose-tangent gradient
    /// `[rot_x, rot_y, rot_z, t_x, t_y, t_z]` (world-frame left tangent).
    pub fn render_pixels_grad(
        &self,
        pose: &Pose,
        intr: &CameraIntrinsics,
        pixels: &PixelSet,
        upstream: &[PixelUpstream],
        grads: &mut VoxelGrads,
    ) -> [f64; 6] {
        let mut pose_grad = [0.0f64; 6];
        let delta = (self.far - self.near) / self.n_samples as f64;
        // Per-sample scratch reused across pixels.
        let mut s_alpha = vec![0.0f64; self.n_samples];
        let mut s_u = vec![0.0f64; self.n_samples];
        let mut s_trans = vec![0.0f64; self.n_samples];
        let mut s_active = vec![false; self.n_samples];

        for (k, &pix) in pixels.indices.iter().enumerate() {
            let up = &upstream[k];
            if up.d_color == [0.0; 3] && up.d_depth == 0.0 && up.d_opacity == 0.0 {
                continue;
            }
            let (ix, iy) = (pix as usize % intr.width, pix as usize / intr.width);
            let d_cam = intr.ray_dir(ix, iy);
            let dz = d_cam.z;
            let d_w = pose.rotation * d_cam;
            let o = pose.translation;
            if !self.segment_hits_box(&o, &d_w) {
                continue;
            }

            // Forward pass: record alpha, T before the sample, and u = dL/dw.
            let mut transmittance = 1.0;
            for i in 0..self.n_samples {
                s_active[i] = false;
                let tau = self.near + (i as f64 + 0.5) * delta;
                let p = o + d_w * tau;
                if !self.inside(&p) {
                    continue;
                }
                let cell = self.cell(&p);
                let raw_d = interp(&self.gather(&cell, &self.density_raw, 1, 0), cell.f);
                let sigma = softplus(raw_d);
                let alpha = 1.0 - (-sigma * delta).exp();
                if alpha <= 0.0 {
                    continue;
                }
                let mut u = up.d_opacity + up.d_depth * tau * dz;
                for ch in 0..3 {
                    let log_c = interp(&self.gather(&cell, &self.color_raw, 3, ch), cell.f);
                    u += up.d_color[ch] * log_c.exp();
                }
                s_alpha[i] = alpha;
                s_u[i] = u;
                s_trans[i] = transmittance;
                s_active[i] = true;
                transmittance *= 1.0 - alpha;
            }

            // Reverse pass with the suffix recursion.
            let mut suffix = 0.0; // V_i
            let mut d_pos_sum = Vector3::zeros(); // sum_i dL/dx_i
            let mut d_dir_sum = Vector3::zeros(); // sum_i tau_i dL/dx_i
            for i in (0..self.n_samples).rev() {
                if !s_active[i] {
                    continue;
                }
                let tau = self.near + (i as f64 + 0.5) * delta;
                let p = o + d_w * tau;
                let cell = self.cell(&p);
                let (raw_d, raw_d_grad) =
                    interp_grad(&self.gather(&cell, &self.density_raw, 1, 0), cell.f);
                let alpha = s_alpha[i];
                let t_i = s_trans[i];
                let w = t_i * alpha;

                let d_alpha = t_i * (s_u[i] - suffix);
                // d alpha / d sigma = delta * exp(-sigma delta) = delta (1 - alpha)
                let d_sigma = d_alpha * delta * (1.0 - alpha);
                let d_raw = d_sigma * sigmoid(raw_d);

                let mut d_pos = Vector3::new(
                    d_raw * raw_d_grad[0] * cell.scale[0],
                    d_raw * raw_d_grad[1] * cell.scale[1],
                    d_raw * raw_d_grad[2] * cell.scale[2],
                );
                for j in 0..8 {
                    grads.density_raw[cell.idx[j]] += d_raw * cell.w[j];
                }
                for ch in 0..3 {
                    let vals = self.gather(&cell, &self.color_raw, 3, ch);
                    let (log_c, log_c_grad) = interp_grad(&vals, cell.f);
                    let c = log_c.exp();
                    let d_c = w * up.d_color[ch];
                    let d_log = d_c * c;
                    for j in 0..8 {
                        grads.color_raw[cell.idx[j] * 3 + ch] += d_log * cell.w[j];
                    }
                    d_pos.x += d_log * log_c_grad[0] * cell.scale[0];
                    d_pos.y += d_log * log_c_grad[1] * cell.scale[1];
                    d_pos.z += d_log * log_c_grad[2] * cell.scale[2];
                }

                d_pos_sum += d_pos;
                d_dir_sum += d_pos * tau;
                suffix = alpha * s_u[i] + (1.0 - alpha) * suffix;
            }

            // Rotation tangent: dL/de = d_w x (sum_i tau_i dL/dx_i).
            let rot = d_w.cross(&d_dir_sum);
            pose_grad[0] += rot.x;
            pose_grad[1] += rot.y;
            pose_grad[2] += rot.z;
            pose_grad[3] += d_pos_sum.x;
            pose_grad[4] += d_pos_sum.y;
            pose_grad[5] += d_pos_sum.z;
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
            if !self.inside(&p) {
                continue;
            }
            // Nearest node.
            let n = [self.nx, self.ny, self.nz];
            let mut ni = [0usize; 3];
            for a in 0..3 {
                let s = (n[a] - 1) as f64 / (self.bounds_max[a] - self.bounds_min[a]);
                ni[a] = (((p[a] - self.bounds_min[a]) * s).round() as usize).min(n[a] - 1);
            }
            let idx = self.node_index(ni[0], ni[1], ni[2]);
            let newly_claimed = self.density_raw[idx] < self.seed_density_raw;
            self.density_raw[idx] = self.density_raw[idx].max(self.seed_density_raw);
            if newly_claimed {
                let c = radiance_estimate.at(ix, iy);
                for ch in 0..3 {
                    self.color_raw[idx * 3 + ch] = c[ch].max(1e-6).ln();
                }
            }
            count += 1;
        }
        count
    }
}

/// Trilinear interpolation; corners ordered `(z<<2)|(y<<1)|x`.
#[inline]
fn interp(v: &[f64; 8], f: [f64; 3]) -> f64 {
    let c00 = v[0] + f[0] * (v[1] - v[0]);
    let c10 = v[2] + f[0] * (v[3] - v[2]);
    let c01 = v[4] + f[0] * (v[5] - v[4]);
    let c11 = v[6] + f[0] * (v[7] - v[6]);
    let c0 = c00 + f[1] * (c10 - c00);
    let c1 = c01 + f[1] * (c11 - c01);
    c0 + f[2] * (c1 - c0)
}

/// Trilinear interpolation plus the gradient in grid coordinates.
#[inline]
fn interp_grad(v: &[f64; 8], f: [f64; 3]) -> (f64, [f64; 3]) {
    let c00 = v[0] + f[0] * (v[1] - v[0]);
    let c10 = v[2] + f[0] * (v[3] - v[2]);
    let c01 = v[4] + f[0] * (v[5] - v[4]);
    let c11 = v[6] + f[0] * (v[7] - v[6]);
    let c0 = c00 + f[1] * (c10 - c00);
    let c1 = c01 + f[1] * (c11 - c01);
    let value = c0 + f[2] * (c1 - c0);

    let d00 = v[1] - v[0];
    let d10 = v[3] - v[2];
    let d01 = v[5] - v[4];
    let d11 = v[7] - v[6];
    let dx0 = d00 + f[1] * (d10 - d00);
    let dx1 = d01 + f[1] * (d11 - d01);
    let gx = dx0 + f[2] * (dx1 - dx0);
    let gy0 = c10 - c00;
    let gy1 = c11 - c01;
    let gy = gy0 + f[2] * (gy1 - gy0);
    let gz = c1 - c0;
    (value, [gx, gy, gz])
}

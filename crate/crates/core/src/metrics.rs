//! Reconstruction quality metrics and the evaluation protocol.
//!
//! Image metrics operate on [0, 1] images; trajectory error aligns the
//! estimate to ground truth with a closed-form similarity (or rigid) fit
//! before measuring, since a monocular-style reconstruction is only defined
//! up to the gauge of its first frame.
//!
//! Radiance is recovered up to a global scale (scaling the map down and the
//! white balance up changes nothing observable), so HDR quality is measured
//! in a normalized display space: both prediction and ground truth are
//! exposed by the geometric-mean ground-truth exposure time, the remaining
//! scalar gauge is fit per sequence in log space, and values clamp to [0, 1].

use std::path::Path;

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::TrajectoryPoint;
use crate::img::{DepthImage, HdrImage, LdrImage};

/// PSNR returned when the images are exactly equal.
pub const PSNR_CAP_DB: f64 = 99.0;

/// Maximum timestamp difference when pairing estimated and reference poses.
pub const ATE_MAX_DT: f64 = 0.02;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("image dimensions differ: {0}x{1} vs {2}x{3}")]
    SizeMismatch(usize, usize, usize, usize),
    #[error("only {found} associated pose pairs (need at least 3)")]
    NotEnoughPairs { found: usize },
    #[error("metric undefined on empty input")]
    Empty,
    #[error("failed to write metrics: {0}")]
    Io(#[from] std::io::Error),
    #[error("failed to encode metrics: {0}")]
    Json(#[from] serde_json::Error),
}

fn check_dims(
    aw: usize,
    ah: usize,
    bw: usize,
    bh: usize,
) -> Result<(), MetricsError> {
    if aw != bw || ah != bh {
        return Err(MetricsError::SizeMismatch(aw, ah, bw, bh));
    }
    if aw == 0 || ah == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(())
}

/// Peak signal-to-noise ratio in dB over all channels, peak value `peak`.
/// Identical images return [`PSNR_CAP_DB`].
pub fn psnr(a: &LdrImage, b: &LdrImage, peak: f64) -> Result<f64, MetricsError> {
    check_dims(a.width, a.height, b.width, b.height)?;
    let mut se = 0.0;
    for (pa, pb) in a.data.iter().zip(&b.data) {
        for ch in 0..3 {
            let d = pa[ch] - pb[ch];
            se += d * d;
        }
    }
    let mse = se / (3.0 * a.data.len() as f64);
    if mse == 0.0 {
        return Ok(PSNR_CAP_DB);
    }
    Ok((10.0 * (peak * peak / mse).log10()).min(PSNR_CAP_DB))
}

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn ssim_kernel() -> [f64; SSIM_WINDOW] {
    let mut k = [0.0; SSIM_WINDOW];
    let c = (SSIM_WINDOW / 2) as f64;
    let mut sum = 0.0;
    for (i, v) in k.iter_mut().enumerate() {
        let d = i as f64 - c;
        *v = (-d * d / (2.0 * SSIM_SIGMA * SSIM_SIGMA)).exp();
        sum += *v;
    }
    for v in k.iter_mut() {
        *v /= sum;
    }
    k
}

fn ssim_term(ma: f64, mb: f64, va: f64, vb: f64, cov: f64) -> f64 {
    let c1 = SSIM_K1 * SSIM_K1;
    let c2 = SSIM_K2 * SSIM_K2;
    ((2.0 * ma * mb + c1) * (2.0 * cov + c2))
        / ((ma * ma + mb * mb + c1) * (va + vb + c2))
}

/// Mean structural similarity with the standard 11x11 Gaussian window
/// (sigma 1.5), averaged over channels and window positions fully inside the
/// image. Images smaller than the window fall back to whole-image statistics,
/// so two constant images score exactly the luminance term.
pub fn ssim(a: &LdrImage, b: &LdrImage) -> Result<f64, MetricsError> {
    check_dims(a.width, a.height, b.width, b.height)?;
    let (w, h) = (a.width, a.height);
    let mut total = 0.0;
    for ch in 0..3 {
        let pa: Vec<f64> = a.data.iter().map(|p| p[ch]).collect();
        let pb: Vec<f64> = b.data.iter().map(|p| p[ch]).collect();
        total += ssim_channel(&pa, &pb, w, h);
    }
    Ok(total / 3.0)
}

fn ssim_channel(a: &[f64], b: &[f64], w: usize, h: usize) -> f64 {
    if w < SSIM_WINDOW || h < SSIM_WINDOW {
        // Whole-image statistics with uniform weights.
        let n = a.len() as f64;
        let ma = a.iter().sum::<f64>() / n;
        let mb = b.iter().sum::<f64>() / n;
        let mut va = 0.0;
        let mut vb = 0.0;
        let mut cov = 0.0;
        for (&x, &y) in a.iter().zip(b) {
            va += (x - ma) * (x - ma);
            vb += (y - mb) * (y - mb);
            cov += (x - ma) * (y - mb);
        }
        return ssim_term(ma, mb, va / n, vb / n, cov / n);
    }

    let k = ssim_kernel();
    let half = SSIM_WINDOW / 2;
    // Separable weighted moments: blur rows then columns.
    let blur = |src: &[f64]| -> Vec<f64> {
        let mut tmp = vec![0.0; src.len()];
        for y in 0..h {
            for x in half..w - half {
                let mut s = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    s += kv * src[y * w + x + i - half];
                }
                tmp[y * w + x] = s;
            }
        }
        let mut out = vec![0.0; src.len()];
        for y in half..h - half {
            for x in half..w - half {
                let mut s = 0.0;
                for (i, &kv) in k.iter().enumerate() {
                    s += kv * tmp[(y + i - half) * w + x];
                }
                out[y * w + x] = s;
            }
        }
        out
    };
    let aa: Vec<f64> = a.iter().map(|v| v * v).collect();
    let bb: Vec<f64> = b.iter().map(|v| v * v).collect();
    let ab: Vec<f64> = a.iter().zip(b).map(|(x, y)| x * y).collect();
    let (ma, mb) = (blur(a), blur(b));
    let (maa, mbb, mab) = (blur(&aa), blur(&bb), blur(&ab));

    let mut sum = 0.0;
    let mut count = 0usize;
    for y in half..h - half {
        for x in half..w - half {
            let i = y * w + x;
            let va = maa[i] - ma[i] * ma[i];
            let vb = mbb[i] - mb[i] * mb[i];
            let cov = mab[i] - ma[i] * mb[i];
            sum += ssim_term(ma[i], mb[i], va, vb, cov);
            count += 1;
        }
    }
    sum / count as f64
}

/// Mean absolute depth error in centimeters over pixels with valid reference
/// depth (> 0).
pub fn depth_l1_cm(pred: &DepthImage, gt: &DepthImage) -> Result<f64, MetricsError> {
    check_dims(pred.width, pred.height, gt.width, gt.height)?;
    let mut sum = 0.0;
    let mut n = 0usize;
    for (&p, &g) in pred.data.iter().zip(&gt.data) {
        if g > 0.0 {
            sum += (p - g).abs();
            n += 1;
        }
    }
    if n == 0 {
        return Err(MetricsError::Empty);
    }
    Ok(100.0 * sum / n as f64)
}

/// How the estimated trajectory is aligned to the reference before measuring.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Alignment {
    /// Rotation + translation + uniform scale (Umeyama closed form).
    Similarity,
    /// Rotation + translation only.
    Rigid,
}

/// Absolute trajectory error: RMSE of position residuals after the best
/// alignment of the estimate onto the reference. Poses are paired by nearest
/// timestamp within [`ATE_MAX_DT`]; fewer than 3 pairs is an error.
pub fn ate_rmse(
    est: &[TrajectoryPoint],
    reference: &[TrajectoryPoint],
    alignment: Alignment,
) -> Result<f64, MetricsError> {
    let mut xs: Vec<Vector3<f64>> = Vec::new();
    let mut ys: Vec<Vector3<f64>> = Vec::new();
    for e in est {
        let best = reference
            .iter()
            .min_by(|a, b| (a.t - e.t).abs().total_cmp(&(b.t - e.t).abs()));
        if let Some(r) = best {
            if (r.t - e.t).abs() <= ATE_MAX_DT {
                xs.push(e.pose.translation);
                ys.push(r.pose.translation);
            }
        }
    }
    if xs.len() < 3 {
        return Err(MetricsError::NotEnoughPairs { found: xs.len() });
    }

    let n = xs.len() as f64;
    let mx: Vector3<f64> = xs.iter().sum::<Vector3<f64>>() / n;
    let my: Vector3<f64> = ys.iter().sum::<Vector3<f64>>() / n;
    let mut cov = Matrix3::<f64>::zeros();
    let mut var_x = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        let dx = x - mx;
        let dy = y - my;
        cov += dy * dx.transpose();
        var_x += dx.norm_squared();
    }
    cov /= n;
    var_x /= n;

    let svd = cov.svd(true, true);
    let u = svd.u.expect("3x3 SVD always yields U");
    let v_t = svd.v_t.expect("3x3 SVD always yields V^T");
    let mut s = Matrix3::identity();
    if (u.determinant() * v_t.determinant()) < 0.0 {
        s[(2, 2)] = -1.0;
    }
    let r = u * s * v_t;
    let scale = match alignment {
        Alignment::Similarity => {
            if var_x > 0.0 {
                (svd.singular_values[0] * s[(0, 0)]
                    + svd.singular_values[1] * s[(1, 1)]
                    + svd.singular_values[2] * s[(2, 2)])
                    / var_x
            } else {
                1.0
            }
        }
        Alignment::Rigid => 1.0,
    };
    let t = my - scale * (r * mx);

    let mut se = 0.0;
    for (x, y) in xs.iter().zip(&ys) {
        se += (y - (scale * (r * x) + t)).norm_squared();
    }
    Ok((se / n).sqrt())
}

// ---------------------------------------------------------------------------
// Evaluation protocol
// ---------------------------------------------------------------------------

/// Per-sequence exposure gauge: geometric-mean log ratio between reference
/// and predicted radiance over pixels where the exposed reference stays
/// strictly inside (0, 1) — clamped values carry no gauge information.
pub struct ExposureFit {
    pub log_scale: f64,
    pub n_used: usize,
}

pub fn fit_global_exposure(
    pred: &[HdrImage],
    reference: &[HdrImage],
    dt_ref: f64,
) -> ExposureFit {
    let mut sum = 0.0;
    let mut n = 0usize;
    for (p, r) in pred.iter().zip(reference) {
        for (pp, rp) in p.data.iter().zip(&r.data) {
            for ch in 0..3 {
                let exposed = dt_ref * rp[ch];
                if exposed > 1e-4 && exposed < 1.0 && pp[ch] > 0.0 {
                    sum += (rp[ch] / pp[ch]).ln();
                    n += 1;
                }
            }
        }
    }
    ExposureFit {
        log_scale: if n > 0 { sum / n as f64 } else { 0.0 },
        n_used: n,
    }
}

/// Exposes an HDR image by `scale` and clamps to the display range.
pub fn display_image(hdr: &HdrImage, scale: f64) -> LdrImage {
    let mut out = LdrImage::new(hdr.width, hdr.height);
    for (o, p) in out.data.iter_mut().zip(&hdr.data) {
        for ch in 0..3 {
            o[ch] = (scale * p[ch]).clamp(0.0, 1.0);
        }
    }
    out
}

/// Geometric mean of per-frame exposure durations.
pub fn geometric_mean_dt(dts: &[f64]) -> f64 {
    let s: f64 = dts.iter().map(|d| d.ln()).sum();
    (s / dts.len() as f64).exp()
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame: usize,
    pub psnr_db: f64,
    pub ssim: f64,
    pub depth_l1_cm: f64,
}

/// Everything `eval` reports for one sequence. The image-quality means are
/// absent (`null` on disk) when the dataset carries no sharp reference
/// frames and only the trajectory could be scored.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_frames: usize,
    pub ate_rmse_m: f64,
    pub mean_psnr_db: Option<f64>,
    pub mean_ssim: Option<f64>,
    pub mean_depth_l1_cm: Option<f64>,
    /// Fitted radiance gauge (multiplies predicted radiance).
    pub exposure_scale: Option<f64>,
    pub frames: Vec<FrameMetrics>,
}

impl EvalReport {
    pub fn from_frames(
        frames: Vec<FrameMetrics>,
        ate_rmse_m: f64,
        exposure_scale: f64,
    ) -> Self {
        let n = frames.len() as f64;
        EvalReport {
            n_frames: frames.len(),
            ate_rmse_m,
            mean_psnr_db: Some(frames.iter().map(|f| f.psnr_db).sum::<f64>() / n),
            mean_ssim: Some(frames.iter().map(|f| f.ssim).sum::<f64>() / n),
            mean_depth_l1_cm: Some(frames.iter().map(|f| f.depth_l1_cm).sum::<f64>() / n),
            exposure_scale: Some(exposure_scale),
            frames,
        }
    }

    /// Report for a run whose dataset has poses but no sharp reference
    /// frames: trajectory error only.
    pub fn trajectory_only(n_frames: usize, ate_rmse_m: f64) -> Self {
        EvalReport {
            n_frames,
            ate_rmse_m,
            mean_psnr_db: None,
            mean_ssim: None,
            mean_depth_l1_cm: None,
            exposure_scale: None,
            frames: Vec::new(),
        }
    }
}

pub fn write_metrics(path: &Path, report: &EvalReport) -> Result<(), MetricsError> {
    let mut s = serde_json::to_string_pretty(report)?;
    s.push('\n');
    std::fs::write(path, s)?;
    Ok(())
}

pub fn read_metrics(path: &Path) -> Result<EvalReport, MetricsError> {
    Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?)
}
